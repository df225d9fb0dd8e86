"""Fourier-domain and spatial reconstruction losses.

Conventions: the forward transform is unnormalized with the zero frequency at
index ``(0, 0)`` (``numpy``/``torch`` FFT layout).  Losses are means, so the
default weighting ``lambda = 0.1`` keeps its meaning across resolutions:

- ``l_spa``: L1 error over masked pixels and channels
- ``l_freq``: ``sum(omega * |F(composite) - F(target)|) / (C * H * W)``, averaged
  over the batch, where ``composite`` carries gradient only on masked pixels
  and ``omega`` is the same spectral error magnitude, gradient-stopped.
"""

import warnings
from dataclasses import dataclass

import torch

from .errors import ConfigError, GeometryError, NumericError

__all__ = [
    "DEFAULT_LAMBDA",
    "SpectralTerms",
    "dft2",
    "composite_prediction",
    "freq_weight",
    "loss_freq",
    "loss_spa",
    "total_loss",
]

DEFAULT_LAMBDA = 0.1


@dataclass
class SpectralTerms:
    l_spa: torch.Tensor
    l_freq: torch.Tensor
    total: torch.Tensor
    omega: torch.Tensor
    lam: float = DEFAULT_LAMBDA

    def as_floats(self):
        return {"l_spa": float(self.l_spa), "l_freq": float(self.l_freq), "total": float(self.total)}


def _check_finite(x, what):
    if not torch.isfinite(x).all():
        raise NumericError(f"non-finite values in {what}")


def dft2(planes):
    """2-D DFT over the last two axes of real or complex channel planes."""
    if planes.shape[-1] < 1 or planes.shape[-2] < 1:
        raise GeometryError("DFT needs H, W >= 1")
    _check_finite(planes, "dft2 input")
    return torch.fft.fft2(planes, dim=(-2, -1))


def _as_image_mask(pred, target, pixel_mask):
    if pred.shape != target.shape:
        raise GeometryError(f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    m = pixel_mask.bool()
    if m.shape[-2:] != pred.shape[-2:]:
        raise GeometryError(f"mask {tuple(m.shape)} does not match image {tuple(pred.shape)}")
    if m.dim() == pred.dim() - 1:
        m = m.unsqueeze(-3)
    return m.to(pred.dtype)


def composite_prediction(pred, pixel_mask):
    """``pred`` on masked pixels, gradient-stopped ``pred`` elsewhere (same values)."""
    m = pixel_mask.to(pred.dtype)
    if m.dim() == pred.dim() - 1:
        m = m.unsqueeze(-3)
    return pred * m + pred.detach() * (1 - m)


def _spectral_error(pred, target, pixel_mask):
    m = _as_image_mask(pred, target, pixel_mask)
    return dft2(composite_prediction(pred, m)) - dft2(target)


def freq_weight(pred, target, pixel_mask, normalize=False, error=None):
    """Adaptive frequency weights: magnitude of the spectral error, no gradient.

    With ``normalize`` each channel's weights are divided by their maximum.
    """
    if error is None:
        error = _spectral_error(pred, target, pixel_mask)
    omega = error.detach().abs()
    if normalize:
        peak = omega.amax(dim=(-2, -1), keepdim=True)
        omega = omega / torch.where(peak > 0, peak, torch.ones_like(peak))
    return omega


def loss_freq(pred, target, pixel_mask, omega=None, normalize_omega=False):
    """Weighted Fourier-domain distance; gradient flows through masked pixels only.

    A precomputed ``omega`` can be supplied (it is used as a constant).
    """
    error = _spectral_error(pred, target, pixel_mask)
    if omega is None:
        omega = freq_weight(pred, target, pixel_mask, normalize=normalize_omega, error=error)
    c, h, w = pred.shape[-3:]
    per_image = (omega * error.abs()).sum(dim=(-3, -2, -1)) / (c * h * w)
    loss = per_image.mean()
    _check_finite(loss, "l_freq")
    return loss


def loss_spa(pred, target, pixel_mask):
    """Mean absolute error over masked pixels (and all channels)."""
    m = _as_image_mask(pred, target, pixel_mask)
    m = m.expand_as(pred)
    count = m.sum()
    if count == 0:
        warnings.warn("empty mask: spatial loss defined as 0", RuntimeWarning, stacklevel=2)
        return (pred - target).abs().sum() * 0.0
    loss = ((pred - target).abs() * m).sum() / count
    _check_finite(loss, "l_spa")
    return loss


def total_loss(pred, target, pixel_mask, lam=DEFAULT_LAMBDA, omega=None, normalize_omega=False):
    if lam < 0:
        raise ConfigError(f"lambda must be >= 0, got {lam}", key="train.lambda_freq")
    if omega is None:
        omega = freq_weight(pred, target, pixel_mask, normalize=normalize_omega)
    l_spa = loss_spa(pred, target, pixel_mask)
    l_freq = loss_freq(pred, target, pixel_mask, omega=omega)
    return SpectralTerms(l_spa=l_spa, l_freq=l_freq, total=l_spa + lam * l_freq, omega=omega, lam=lam)
