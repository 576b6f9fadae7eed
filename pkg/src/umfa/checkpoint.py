"""Checkpoint files: a JSON manifest plus a raw float32 blob.

The manifest at ``path`` names its blob (``<path>.bin``) and records every
parameter's shape and byte offset. Adam moments, when present, are stored in
the same blob under a separate ``optimizer`` table so that resumed runs
continue bit-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from umfa import blob as blobfmt
from umfa.net import Params, param_shapes
from umfa.optim import AdamState
from umfa.tensor import Tensor

FORMAT = "umfa-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: Params
    config: dict
    step: int
    optimizer: Optional[AdamState] = None
    loss_network: dict = field(default_factory=dict)
    path: Optional[Path] = None


def blob_path_for(path: Path) -> Path:
    return path.with_name(path.name + ".bin")


def save_checkpoint(
    params: Params,
    config: dict,
    step: int,
    path,
    optimizer: Optional[AdamState] = None,
    loss_network: Optional[dict] = None,
) -> Path:
    path = Path(path)
    names = sorted(params)
    arrays = [(n, params[n].data) for n in names]
    if optimizer is not None and optimizer.m:
        arrays += [(f"m/{n}", m) for n, m in zip(names, optimizer.m)]
        arrays += [(f"v/{n}", v) for n, v in zip(names, optimizer.v)]
    raw, table = blobfmt.pack(arrays)

    entries = {e["name"]: e for e in table}
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "blob": blob_path_for(path).name,
        "blob_bytes": len(raw),
        "step": step,
        "config": config,
        "loss_network": loss_network or {},
        "params": [entries[n] for n in names],
    }
    if optimizer is not None:
        manifest["optimizer"] = {
            "t": optimizer.t,
            "lr": optimizer.lr,
            "beta1": optimizer.beta1,
            "beta2": optimizer.beta2,
            "eps": optimizer.eps,
            "m": [entries[f"m/{n}"] for n in names] if optimizer.m else [],
            "v": [entries[f"v/{n}"] for n in names] if optimizer.v else [],
        }
    path.parent.mkdir(parents=True, exist_ok=True)
    blob_path_for(path).write_bytes(raw)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _read(raw: bytes, entry: dict) -> np.ndarray:
    try:
        return blobfmt.read_array(raw, entry["offset"], tuple(entry["shape"]))
    except EOFError:
        raise CheckpointError(f"truncated blob while reading {entry['name']}") from None


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        manifest = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{path}: not a checkpoint manifest (format {manifest.get('format')!r})")
    if manifest.get("version") != VERSION:
        raise CheckpointError(f"version mismatch: checkpoint has {manifest.get('version')!r}, expected {VERSION}")
    blob_path = path.parent / manifest["blob"]
    if not blob_path.is_file():
        raise FileNotFoundError(f"checkpoint blob not found: {blob_path}")
    raw = blob_path.read_bytes()
    if len(raw) < manifest.get("blob_bytes", 0):
        raise CheckpointError(
            f"truncated blob: {blob_path} has {len(raw)} bytes, manifest expects {manifest['blob_bytes']}"
        )

    config = manifest.get("config", {})
    expected = param_shapes(int(config.get("width", 32)))
    entries = {e["name"]: e for e in manifest.get("params", [])}
    for name in expected:
        if name not in entries:
            raise CheckpointError(f"missing parameter {name} in {path}")
    unknown = sorted(set(entries) - set(expected))
    if unknown:
        raise CheckpointError(f"unexpected parameters in {path}: {unknown}")
    params: Params = {}
    for name, shape in expected.items():
        if tuple(entries[name]["shape"]) != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: manifest {entries[name]['shape']}, model expects {list(shape)}"
            )
        params[name] = Tensor(_read(raw, entries[name]), requires_grad=True, name=name)

    optimizer = None
    opt = manifest.get("optimizer")
    if opt is not None:
        optimizer = AdamState(lr=opt["lr"], beta1=opt["beta1"], beta2=opt["beta2"], eps=opt["eps"], t=opt["t"])
        if opt["m"]:
            optimizer.m = [_read(raw, e) for e in opt["m"]]
            optimizer.v = [_read(raw, e) for e in opt["v"]]
    return Checkpoint(
        params=params,
        config=config,
        step=int(manifest["step"]),
        optimizer=optimizer,
        loss_network=manifest.get("loss_network", {}),
        path=path,
    )
