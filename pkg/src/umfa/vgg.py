"""Frozen VGG16-topology feature extractor used by the perceptual losses.

Only blocks 1-4 are built. Taps are named ``relu{block}_{conv}`` and are
read after the ReLU of that conv.

Weights come from one of two sources: a seeded He-uniform initialization
(the default, fully reproducible) or an external manifest + blob pair::

    {
      "format": "umfa-vgg16",
      "version": 1,
      "blob": "vgg16.bin",
      "preprocess": {"mean": [0.485, 0.456, 0.406], "std": [0.229, 0.224, 0.225]},
      "layers": [
        {"name": "block1_conv1", "weight": {"shape": [64, 3, 3, 3], "offset": 0},
                                 "bias":   {"shape": [64], "offset": 6912}},
        ...
      ]
    }

``preprocess`` is optional; when present the image is normalized per channel
before the first conv.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from umfa import blob as blobfmt
from umfa import ops
from umfa.tensor import Tensor

TAPS = ("relu1_2", "relu2_2", "relu3_3", "relu4_3")
BLOCKS = ((64, 2), (128, 2), (256, 3), (512, 3))
MANIFEST_FORMAT = "umfa-vgg16"
MANIFEST_VERSION = 1


class WeightFileError(ValueError):
    """A weight manifest or blob does not describe the expected network."""


def layer_shapes() -> dict[str, tuple]:
    shapes, cin = {}, 3
    for b, (width, convs) in enumerate(BLOCKS, start=1):
        for j in range(1, convs + 1):
            shapes[f"block{b}_conv{j}"] = (width, cin, 3, 3)
            cin = width
    return shapes


def tap_shape(tap: str, size: int) -> tuple[int, int, int]:
    """(channels, h, w) of a tap for a square ``size`` input."""
    b = int(tap[4]) - 1
    side = size // 2 ** b
    return BLOCKS[b][0], side, side


class LossNetwork:
    """Truncated VGG16 whose parameters never receive gradients."""

    def __init__(self, layers: dict[str, tuple[np.ndarray, np.ndarray]], source: str,
                 seed: Optional[int] = None, preprocess: Optional[dict] = None):
        expected = layer_shapes()
        if list(layers) != list(expected):
            missing = [n for n in expected if n not in layers]
            raise WeightFileError(f"loss network layers missing or misordered: {missing or list(layers)}")
        self.layers: dict[str, tuple[Tensor, Tensor]] = {}
        for name, (w, b) in layers.items():
            if tuple(w.shape) != expected[name] or tuple(b.shape) != (expected[name][0],):
                raise WeightFileError(
                    f"{name}: expected weight {expected[name]} and bias ({expected[name][0]},), "
                    f"got {tuple(w.shape)} and {tuple(b.shape)}"
                )
            self.layers[name] = (Tensor(w), Tensor(b))
        self.source = source
        self.seed = seed
        self.preprocess = preprocess
        self._mean = self._std = None
        if preprocess:
            self._mean = Tensor(np.asarray(preprocess["mean"]).reshape(1, 3, 1, 1))
            self._std = Tensor(np.asarray(preprocess["std"]).reshape(1, 3, 1, 1))

    @classmethod
    def random(cls, seed: int = 0) -> "LossNetwork":
        rng = np.random.default_rng(seed)
        layers = {}
        for name, shape in layer_shapes().items():
            bound = np.sqrt(6.0 / (shape[1] * 9))
            layers[name] = (
                rng.uniform(-bound, bound, size=shape).astype(np.float32),
                np.zeros(shape[0], dtype=np.float32),
            )
        return cls(layers, source="seeded-random", seed=seed)

    def blob(self) -> tuple[bytes, list[dict]]:
        arrays = []
        for name, (w, b) in self.layers.items():
            arrays += [(f"{name}.weight", w.data), (f"{name}.bias", b.data)]
        return blobfmt.pack(arrays)

    def digest(self) -> str:
        """SHA-256 of the parameter bytes; unchanged for as long as the network is frozen."""
        return blobfmt.digest(self.blob()[0])

    def describe(self) -> dict:
        return {"source": self.source, "seed": self.seed, "sha256": self.digest()}

    def extract(self, image: Tensor, taps: Iterable[str] = TAPS) -> dict[str, Tensor]:
        taps = set(taps)
        unknown = taps - set(TAPS)
        if unknown:
            raise ValueError(f"unknown taps {sorted(unknown)}; available: {TAPS}")
        if image.ndim != 4 or image.shape[1] != 3:
            raise ValueError(f"extract expects an (n, 3, h, w) image, got shape {image.shape}")
        h, w = image.shape[2:]
        if h % 8 or w % 8:
            raise ValueError(f"loss network input {h}x{w} is not divisible by 8")
        deepest = max(int(t[4]) for t in taps)

        x = image
        if self._mean is not None:
            x = (x - self._mean) / self._std
        out: dict[str, Tensor] = {}
        for b, (_, convs) in enumerate(BLOCKS[:deepest], start=1):
            if b > 1:
                x = ops.maxpool2d(x)
            for j in range(1, convs + 1):
                wt, bias = self.layers[f"block{b}_conv{j}"]
                x = ops.relu(ops.conv2d(x, wt, bias, padding=1))
            tap = f"relu{b}_{convs}"
            if tap in taps:
                out[tap] = x
        return out

    def save_weights(self, manifest_path) -> Path:
        """Write this network as manifest + blob (``<manifest stem>.bin``)."""
        manifest_path = Path(manifest_path)
        blob_path = manifest_path.with_suffix(".bin")
        raw, table = self.blob()
        by_name = {e["name"]: e for e in table}
        layers = []
        for name in self.layers:
            w, b = by_name[f"{name}.weight"], by_name[f"{name}.bias"]
            layers.append({
                "name": name,
                "weight": {"shape": w["shape"], "offset": w["offset"]},
                "bias": {"shape": b["shape"], "offset": b["offset"]},
            })
        manifest = {
            "format": MANIFEST_FORMAT,
            "version": MANIFEST_VERSION,
            "blob": blob_path.name,
            "layers": layers,
        }
        if self.preprocess:
            manifest["preprocess"] = self.preprocess
        blob_path.write_bytes(raw)
        manifest_path.write_text(json.dumps(manifest, indent=2) + "\n")
        return manifest_path


def load_weights(manifest_path) -> LossNetwork:
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise FileNotFoundError(f"weight manifest not found: {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise WeightFileError(f"{manifest_path}: not valid JSON ({exc})") from None
    if manifest.get("format") != MANIFEST_FORMAT:
        raise WeightFileError(f"{manifest_path}: format is {manifest.get('format')!r}, expected {MANIFEST_FORMAT!r}")
    if manifest.get("version") != MANIFEST_VERSION:
        raise WeightFileError(f"{manifest_path}: unsupported version {manifest.get('version')!r}")
    blob_path = manifest_path.parent / manifest["blob"]
    if not blob_path.is_file():
        raise FileNotFoundError(f"weight blob not found: {blob_path}")
    raw = blob_path.read_bytes()

    expected = layer_shapes()
    entries = {e["name"]: e for e in manifest.get("layers", [])}
    extra = sorted(set(entries) - set(expected))
    if extra:
        raise WeightFileError(f"unexpected layers in manifest: {extra}")
    layers = {}
    for name, shape in expected.items():
        if name not in entries:
            raise WeightFileError(f"manifest is missing layer {name}")
        e = entries[name]
        if tuple(e["weight"]["shape"]) != shape or tuple(e["bias"]["shape"]) != (shape[0],):
            raise WeightFileError(
                f"{name}: shape mismatch, expected weight {list(shape)} / bias [{shape[0]}], "
                f"got {e['weight']['shape']} / {e['bias']['shape']}"
            )
        try:
            w = blobfmt.read_array(raw, e["weight"]["offset"], shape)
            b = blobfmt.read_array(raw, e["bias"]["offset"], (shape[0],))
        except EOFError as exc:
            raise WeightFileError(f"{name}: {exc}") from None
        layers[name] = (w, b)
    return LossNetwork(layers, source="external-weights", preprocess=manifest.get("preprocess"))
