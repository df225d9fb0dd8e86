"""Checkpoint directories: ``manifest.json`` plus one tensor container.

Layout of a checkpoint directory::

    manifest.json        UTF-8 JSON, see ``MANIFEST_KEYS``
    manifest.sha256      SHA-256 of manifest.json in ``sha256sum`` format
    tensors.safetensors  little-endian arrays indexed by name

Tensor names are the model's ``state_dict`` keys prefixed with ``model.``;
optimizer moments are stored as ``optim.<param name>.<slot>``.  The
manifest records the SHA-256 of the container; both checksums are verified
on load, so any changed byte is reported as an integrity error.
Writes go to a temporary sibling directory that is renamed into place.
"""

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .errors import IncompatibleCheckpointError, IntegrityError

__all__ = ["FORMAT_VERSION", "Checkpoint", "save_checkpoint", "load_checkpoint", "config_hash"]

FORMAT_VERSION = 1
TENSOR_FILE = "tensors.safetensors"
MANIFEST_FILE = "manifest.json"
MANIFEST_SUM = "manifest.sha256"
MANIFEST_KEYS = (
    "format_version", "kind", "epoch", "complete", "config", "config_hash", "backbone",
    "metrics", "rng", "optimizer", "tensor_file", "tensor_sha256", "tensor_count",
)


def config_hash(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Checkpoint:
    manifest: dict
    model_state: dict
    optim_state: dict = field(default_factory=dict)

    @property
    def epoch(self):
        return self.manifest["epoch"]


def _optimizer_tensors(optimizer, model):
    if optimizer is None:
        return {}, None
    names = {id(p): n for n, p in model.named_parameters()}
    tensors = {}
    groups = []
    for group in optimizer.param_groups:
        hyper = {k: v for k, v in group.items() if k != "params"}
        hyper["params"] = [names[id(p)] for p in group["params"]]
        groups.append(hyper)
        for p in group["params"]:
            for slot, value in optimizer.state.get(p, {}).items():
                if torch.is_tensor(value):
                    tensors[f"optim.{names[id(p)]}.{slot}"] = value.detach().clone().contiguous()
    return tensors, groups


def save_checkpoint(path, model, optimizer=None, epoch=0, config=None, metrics=None, rng=None,
                    complete=True, kind="pretrain"):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = {f"model.{k}": v.detach().clone().contiguous() for k, v in model.state_dict().items()}
    optim_tensors, groups = _optimizer_tensors(optimizer, model)
    tensors.update(optim_tensors)
    blob = st_save(tensors)
    config = config or {}
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "epoch": int(epoch),
        "complete": bool(complete),
        "config": config,
        "config_hash": config_hash(config),
        "backbone": model.cfg.to_dict(),
        "metrics": list(metrics or []),
        "rng": rng or {},
        "optimizer": groups,
        "tensor_file": TENSOR_FILE,
        "tensor_sha256": hashlib.sha256(blob).hexdigest(),
        "tensor_count": len(tensors),
    }
    tmp = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        (tmp / TENSOR_FILE).write_bytes(blob)
        text = json.dumps(manifest, indent=2, sort_keys=True, default=str).encode("utf-8")
        (tmp / MANIFEST_FILE).write_bytes(text)
        (tmp / MANIFEST_SUM).write_text(f"{hashlib.sha256(text).hexdigest()}  {MANIFEST_FILE}\n", encoding="ascii")
        if path.exists():
            old = path.with_name(f".{path.name}.old")
            if old.exists():
                shutil.rmtree(old)
            os.replace(path, old)
            os.replace(tmp, path)
            shutil.rmtree(old)
        else:
            os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        text = (path / MANIFEST_FILE).read_bytes()
        recorded = (path / MANIFEST_SUM).read_bytes()
    except FileNotFoundError as exc:
        raise IntegrityError(f"{path} is missing {Path(exc.filename).name}") from None
    if recorded != f"{hashlib.sha256(text).hexdigest()}  {MANIFEST_FILE}\n".encode("ascii"):
        raise IntegrityError(f"checksum mismatch for {path / MANIFEST_FILE}")
    try:
        manifest = json.loads(text.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"unreadable manifest in {path}: {exc}") from None
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format {version} is not supported (reader expects {FORMAT_VERSION})")
    try:
        blob = (path / manifest["tensor_file"]).read_bytes()
    except (FileNotFoundError, KeyError, TypeError):
        raise IntegrityError(f"{path} has no readable tensor container") from None
    if hashlib.sha256(blob).hexdigest() != manifest["tensor_sha256"]:
        raise IntegrityError(f"checksum mismatch for {path / manifest['tensor_file']}")
    try:
        tensors = st_load(blob)
    except (SafetensorError, ValueError) as exc:
        raise IntegrityError(f"corrupt tensor container: {exc}") from None
    if len(tensors) != manifest["tensor_count"]:
        raise IntegrityError("tensor count does not match manifest")
    model_state = {k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")}
    optim_state = {k[len("optim."):]: v for k, v in tensors.items() if k.startswith("optim.")}
    return Checkpoint(manifest, model_state, optim_state)


def restore_model(model, ckpt, strict=True):
    """Load weights; a head present in the checkpoint is attached if missing."""
    state = ckpt.model_state
    if model.head is None and "head.weight" in state:
        model.attach_head(state["head.weight"].shape[0])
    if not strict:
        state = {k: v for k, v in state.items() if not k.startswith("head.")}
    missing, unexpected = model.load_state_dict(state, strict=False)
    if strict and (missing or unexpected):
        raise IncompatibleCheckpointError(
            f"checkpoint does not match model: missing={missing} unexpected={unexpected}")
    if not strict and unexpected:
        raise IncompatibleCheckpointError(f"unexpected tensors in checkpoint: {unexpected}")
    return model


def restore_optimizer(optimizer, model, ckpt):
    params = dict(model.named_parameters())
    groups = ckpt.manifest.get("optimizer") or []
    for group, saved in zip(optimizer.param_groups, groups):
        for k, v in saved.items():
            if k != "params":
                group[k] = tuple(v) if isinstance(v, list) else v
    for key, value in ckpt.optim_state.items():
        name, slot = key.rsplit(".", 1)
        optimizer.state[params[name]][slot] = value.clone()
    return optimizer


def model_from_checkpoint(path_or_ckpt, seed=0):
    from .backbones import BackboneConfig, build_backbone

    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else load_checkpoint(path_or_ckpt)
    cfg = BackboneConfig(**ckpt.manifest["backbone"])
    model = build_backbone(cfg, seed=seed)
    restore_model(model, ckpt)
    return model, ckpt
