"""Frequency content and spatial variance of intermediate feature maps."""

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from ..errors import GeometryError
from .report import write_csv, write_json

__all__ = ["SpectrumProfile", "radial_amplitude", "delta_log_amplitude", "feature_variance",
           "spectrum_and_variance_profile"]

EPS = 1e-8


@dataclass
class SpectrumProfile:
    labels: list
    delta_log_amp: list
    variance: list
    spatial: list
    provenance: dict = field(default_factory=dict)

    def rows(self):
        return list(zip(self.labels, self.spatial, self.delta_log_amp, self.variance))

    def write(self, out_dir, stem="spectrum"):
        write_csv(f"{out_dir}/{stem}.csv", ["depth", "side", "delta_log_amp", "variance"], self.rows())
        write_json(f"{out_dir}/{stem}.json", asdict(self))


def _check_planes(planes):
    if planes.dim() != 4:
        raise GeometryError(f"expected (B, C, h, w) feature maps, got shape {tuple(planes.shape)}")
    if planes.shape[-1] < 2 or planes.shape[-2] < 2:
        raise GeometryError("feature maps need at least 2x2 spatial positions")


def radial_amplitude(planes):
    """Mean DFT amplitude per integer radius ``round(|k|)``, averaged over batch and channels."""
    _check_planes(planes)
    h, w = planes.shape[-2:]
    amp = torch.fft.fft2(planes.double()).abs().mean(dim=(0, 1)).numpy()
    ky = np.fft.fftfreq(h) * h
    kx = np.fft.fftfreq(w) * w
    radius = np.rint(np.hypot(ky[:, None], kx[None, :])).astype(int)
    sums = np.bincount(radius.ravel(), weights=amp.ravel())
    counts = np.bincount(radius.ravel())
    present = counts > 0
    return np.nonzero(present)[0], sums[present] / counts[present]


def delta_log_amplitude(planes, eps=EPS):
    """log amplitude of the highest radial bin minus that of the zero-frequency bin."""
    _, prof = radial_amplitude(planes)
    return float(np.log(prof[-1] + eps) - np.log(prof[0] + eps))


def feature_variance(planes):
    """Spatial variance per channel, averaged over channels and batch."""
    _check_planes(planes)
    return float(planes.double().var(dim=(-2, -1), unbiased=False).mean())


@torch.no_grad()
def spectrum_and_variance_profile(model, pixels, eps=EPS):
    """Delta log-amplitude and variance of every tapped depth for one batch."""
    was_training = model.training
    model.eval()
    fmap = model.forward_features(pixels, return_taps=True)
    model.train(was_training)
    labels, dla, var, side = [], [], [], []
    for label, t in fmap.taps:
        planes = model._to_grid(t)
        labels.append(label)
        side.append(int(planes.shape[-1]))
        dla.append(delta_log_amplitude(planes, eps))
        var.append(feature_variance(planes))
    return SpectrumProfile(labels=labels, delta_log_amp=dla, variance=var, spatial=side)
