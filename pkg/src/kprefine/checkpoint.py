"""Checkpoint directory: ``manifest.json`` plus ``params.bin``.

The binary holds every array as little-endian float32, back to back, in
declaration order: network parameters, then Adam first moments, then Adam
second moments. The manifest records shapes, byte offsets and a SHA-256 of
the binary.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, CorruptCheckpointError
from .nn import AdamState, ConvParams
from .refine import PADDING_PLAN, NetworkWeights, RefineConfig, Variant

FORMAT = "kprefine-checkpoint/1"
MANIFEST = "manifest.json"
BUFFER = "params.bin"
_LE_F32 = np.dtype("<f4")


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def save_checkpoint(path, weights: NetworkWeights, cfg: RefineConfig, adam: AdamState | None = None, extra=None):
    """Write a checkpoint directory. Parameters are stored as float32."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = weights.parameter_names()
    arrays = list(weights.parameters())
    if adam is not None:
        names += [f"adam.m.{n}" for n in weights.parameter_names()]
        names += [f"adam.v.{n}" for n in weights.parameter_names()]
        arrays += list(adam.m) + list(adam.v)
    entries = []
    chunks = []
    offset = 0
    for name, arr in zip(names, arrays):
        raw = np.ascontiguousarray(arr, dtype=_LE_F32).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "dtype": "float32-le",
        "refine": cfg.to_dict(),
        "entries": entries,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "adam": None
        if adam is None
        else {"step": adam.step, "lr": adam.lr, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps},
        "extra": extra or {},
    }
    (path / BUFFER).write_bytes(blob)
    (path / MANIFEST).write_text(_dumps(manifest), encoding="utf-8")
    return path


def load_checkpoint(path, expected: RefineConfig | None = None):
    """Returns ``(weights, cfg, adam_or_None, extra)``."""
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / BUFFER).read_bytes()
    except FileNotFoundError as exc:
        raise CorruptCheckpointError(f"incomplete checkpoint at {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CorruptCheckpointError(f"unreadable manifest at {path}") from exc
    if manifest.get("format") != FORMAT:
        raise CorruptCheckpointError(f"unknown checkpoint format {manifest.get('format')!r}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise CorruptCheckpointError(f"checksum mismatch in {path / BUFFER}")
    cfg = RefineConfig.from_dict(manifest["refine"])
    if expected is not None and expected != cfg:
        raise ConfigurationError(f"checkpoint config {cfg} does not match expected {expected}")

    arrays = {}
    for ent in manifest["entries"]:
        raw = blob[ent["offset"] : ent["offset"] + ent["nbytes"]]
        arrays[ent["name"]] = np.frombuffer(raw, dtype=_LE_F32).astype(np.float32).reshape(ent["shape"])

    weights = NetworkWeights([], None)
    if cfg.variant is not Variant.SAM_ONLY:
        try:
            layers = [
                ConvParams(arrays[f"conv{i + 1}.kernels"], arrays[f"conv{i + 1}.bias"], pad)
                for i, pad in enumerate(PADDING_PLAN)
            ]
        except KeyError as exc:
            raise CorruptCheckpointError(f"missing tensor {exc}") from exc
        weights = NetworkWeights(layers, arrays.get("head"))
        weights.check(cfg)

    adam = None
    if manifest.get("adam") is not None:
        names = weights.parameter_names()
        hyper = manifest["adam"]
        adam = AdamState(
            [arrays[f"adam.m.{n}"] for n in names],
            [arrays[f"adam.v.{n}"] for n in names],
            step=int(hyper["step"]),
            lr=float(hyper["lr"]),
            beta1=float(hyper["beta1"]),
            beta2=float(hyper["beta2"]),
            eps=float(hyper["eps"]),
        )
    return weights, cfg, adam, manifest.get("extra", {})
