"""Checkpoint archives: a zip holding a JSON manifest plus one raw array per
parameter, keyed by the module path string.  Reload is bit-exact."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from typing import Optional

import numpy as np
import torch
from torch import nn

from .autoencoder import EncoderConfig, GraphEncoder, make_heads
from .denoiser import Denoiser, DenoiserConfig
from .diffusion import ConditionEncoder, DiffusionConfig

FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _state_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def save_checkpoint(path, kind: str, modules: dict[str, nn.Module], config: dict,
                    extra: Optional[dict] = None) -> None:
    """``modules`` maps a namespace ("encoder", "heads", ...) to a module; the
    tensor keys in the archive are "<namespace>/<state-dict-path>"."""
    tensors: dict[str, np.ndarray] = {}
    for ns, module in modules.items():
        for k, arr in _state_arrays(module).items():
            tensors[f"{ns}/{k}"] = arr
    manifest = {
        "format": FORMAT_VERSION,
        "kind": kind,
        "config": config,
        "extra": extra or {},
        "tensors": {k: {"shape": list(v.shape), "dtype": str(v.dtype)}
                    for k, v in tensors.items()},
    }
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        zf.writestr("manifest.json", json.dumps(manifest, sort_keys=True, indent=2))
        for k, arr in tensors.items():
            buf = io.BytesIO()
            np.save(buf, arr, allow_pickle=False)
            zf.writestr(f"tensors/{k}.npy", buf.getvalue())


def load_checkpoint(path):
    """Returns (manifest, {namespace: {key: tensor}})."""
    try:
        zf = zipfile.ZipFile(path, "r")
    except (FileNotFoundError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with zf:
        manifest = json.loads(zf.read("manifest.json"))
        states: dict[str, dict[str, torch.Tensor]] = {}
        for full_key, meta in manifest["tensors"].items():
            ns, key = full_key.split("/", 1)
            arr = np.load(io.BytesIO(zf.read(f"tensors/{full_key}.npy")), allow_pickle=False)
            if list(arr.shape) != meta["shape"] or str(arr.dtype) != meta["dtype"]:
                raise CheckpointError(f"tensor {full_key} does not match its manifest entry")
            states.setdefault(ns, {})[key] = torch.as_tensor(arr)
    return manifest, states


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# typed wrappers
# ---------------------------------------------------------------------------


def save_encoder_checkpoint(path, encoder: GraphEncoder, heads: nn.Module,
                            extra: Optional[dict] = None) -> None:
    save_checkpoint(path, "autoencoder", {"encoder": encoder, "heads": heads},
                    {"encoder": encoder.config.to_dict(),
                     "precision": str(encoder.dtype).replace("torch.", "")},
                    extra)


def load_encoder_checkpoint(path):
    manifest, states = load_checkpoint(path)
    if manifest["kind"] != "autoencoder":
        raise CheckpointError(f"{path} is a {manifest['kind']!r} checkpoint, expected autoencoder")
    config = EncoderConfig.from_dict(manifest["config"]["encoder"])
    dtype = getattr(torch, manifest["config"].get("precision", "float64"))
    encoder = GraphEncoder(config).to(dtype)
    encoder.load_state_dict({k: v.to(dtype) for k, v in states["encoder"].items()})
    heads = make_heads(config).to(dtype)
    heads.load_state_dict({k: v.to(dtype) for k, v in states["heads"].items()})
    return encoder, heads, manifest


def save_denoiser_checkpoint(path, denoiser: Denoiser, diffusion_config: DiffusionConfig,
                             condition_encoder: Optional[ConditionEncoder] = None,
                             extra: Optional[dict] = None) -> None:
    dtype = next(denoiser.parameters()).dtype
    modules = {"denoiser": denoiser}
    config = {"denoiser": denoiser.config.to_dict(),
              "diffusion": diffusion_config.to_dict(),
              "precision": str(dtype).replace("torch.", "")}
    if condition_encoder is not None:
        modules["cond_encoder"] = condition_encoder
        config["cond_encoder"] = condition_encoder.to_config()
    save_checkpoint(path, "denoiser", modules, config, extra)


def load_denoiser_checkpoint(path):
    manifest, states = load_checkpoint(path)
    if manifest["kind"] != "denoiser":
        raise CheckpointError(f"{path} is a {manifest['kind']!r} checkpoint, expected denoiser")
    config = DenoiserConfig.from_dict(manifest["config"]["denoiser"])
    diffusion_config = DiffusionConfig.from_dict(manifest["config"]["diffusion"])
    dtype = getattr(torch, manifest["config"].get("precision", "float64"))
    denoiser = Denoiser(config).to(dtype)
    denoiser.load_state_dict({k: v.to(dtype) for k, v in states["denoiser"].items()})
    cond_encoder = None
    if "cond_encoder" in manifest["config"]:
        cond_encoder = ConditionEncoder(**manifest["config"]["cond_encoder"]).to(dtype)
        cond_encoder.load_state_dict({k: v.to(dtype) for k, v in states["cond_encoder"].items()})
    return denoiser, diffusion_config, cond_encoder, manifest
