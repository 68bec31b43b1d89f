"""Versioned checkpoint container shared by segmentation models and cPAEs."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch

from .cpae import CpaeModel, check_pairing
from .errors import ConfigError, DependencyError, ShapeError
from .soman import SomanModel

FORMAT = "sfseg-checkpoint/1"
KINDS = {"soman": SomanModel, "cpae": CpaeModel}


def config_hash(cfg) -> str:
    if hasattr(cfg, "to_dict"):
        cfg = cfg.to_dict()
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def kind_of(model):
    for k, cls in KINDS.items():
        if isinstance(model, cls):
            return k
    raise ConfigError("model", f"cannot checkpoint {type(model).__name__}")


def save_checkpoint(path, model, cfg_hash="", extra=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": FORMAT,
        "kind": kind_of(model),
        "metadata": model.metadata(),
        "config_hash": cfg_hash,
        "state": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "extra": extra or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def read_payload(path, kind=None, cfg_hash=None):
    path = Path(path)
    if not path.exists():
        raise DependencyError(str(path))
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != FORMAT:
        raise ConfigError("checkpoint", f"{path}: unsupported format {payload.get('format')!r}")
    if kind is not None and payload["kind"] != kind:
        raise ConfigError("checkpoint", f"{path}: expected a {kind} checkpoint, found {payload['kind']}")
    if cfg_hash is not None and payload["config_hash"] != cfg_hash:
        raise ConfigError("checkpoint", f"{path}: written under config {payload['config_hash']}, "
                                        f"current config is {cfg_hash}")
    return payload


def load_checkpoint(path, kind=None, cfg_hash=None):
    """Rebuild the model from metadata and load its arrays; returns (model, payload)."""
    payload = read_payload(path, kind, cfg_hash)
    model = KINDS[payload["kind"]].from_metadata(payload["metadata"])
    model.load_state_dict(payload["state"])
    model.eval()
    return model, payload


def load_cpae_for(path, soman, cfg_hash=None):
    """Load a cPAE and refuse it if its feature metadata does not fit ``soman``."""
    payload = read_payload(path, "cpae", cfg_hash)
    q = CpaeModel.from_metadata(payload["metadata"])
    try:
        check_pairing(q, soman)
    except ShapeError as e:
        raise ShapeError(f"{path}: {e}") from None
    q.load_state_dict(payload["state"])
    q.eval()
    return q, payload
