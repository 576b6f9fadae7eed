"""End-to-end training: split, pair, stylize, loss, backward, Adam, log, checkpoint."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from umfa import imageio
from umfa.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from umfa.losses import LossReport, LossWeights, total_loss
from umfa.net import Aggregation, init_params, stylize
from umfa.optim import AdamState, adam_step
from umfa.tensor import Tape, Tensor
from umfa.vgg import LossNetwork, load_weights

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, report: Optional[LossReport], reason: str):
        super().__init__(f"training aborted at step {step}: {reason}; last report {report}")
        self.step = step
        self.report = report


@dataclass
class TrainConfig:
    data_dir: str
    out: str = "umfa.ckpt"
    epochs: int = 2
    image_size: int = 256
    lr: float = 1e-4
    weights: LossWeights = field(default_factory=LossWeights)
    strategy: Aggregation = Aggregation.MFA
    seed: int = 0
    batch_size: int = 1
    checkpoint_every: int = 0
    log_path: Optional[str] = None
    width: int = 32
    loss_weights: Optional[str] = None
    loss_seed: int = 0
    reshuffle: bool = False
    max_steps: Optional[int] = None

    def __post_init__(self):
        self.strategy = Aggregation.parse(self.strategy)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.image_size % 16 or self.image_size < 16:
            raise ValueError(f"image_size must be a positive multiple of 16, got {self.image_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not (self.lr > 0 and math.isfinite(self.lr)):
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["strategy"] = self.strategy.value
        d["weights"] = dataclasses.asdict(self.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


def split_dataset(data_dir, seed: int) -> tuple[list[Path], list[Path]]:
    """Seeded shuffle of the image files; first half content, second half style."""
    files = imageio.list_images(data_dir)
    if len(files) < 2:
        raise ValueError(f"{data_dir}: need at least 2 images, found {len(files)}")
    order = np.random.default_rng(seed).permutation(len(files))
    shuffled = [files[i] for i in order]
    if len(shuffled) % 2:
        log.warning("odd number of images; dropping %s", shuffled[-1])
        shuffled = shuffled[:-1]
    half = len(shuffled) // 2
    return shuffled[:half], shuffled[half:]


def build_loss_network(config: TrainConfig) -> LossNetwork:
    if config.loss_weights:
        return load_weights(config.loss_weights)
    return LossNetwork.random(config.loss_seed)


class _ImageCache:
    def __init__(self, size: int, capacity: int = 256):
        self.size = size
        self.capacity = capacity
        self._items: dict[Path, np.ndarray] = {}

    def get(self, path: Path) -> np.ndarray:
        arr = self._items.get(path)
        if arr is None:
            arr = imageio.resize_center(imageio.load_image(path), self.size).data
            if len(self._items) >= self.capacity:
                self._items.pop(next(iter(self._items)))
            self._items[path] = arr
        return arr


def pair_indices(step: int, n_content: int, n_style: int, batch_size: int, seed: int,
                 reshuffle: bool) -> list[tuple[int, int]]:
    """(content, style) indices of every sample in a step's batch."""
    steps_per_epoch = math.ceil(n_content / batch_size)
    epoch = step // steps_per_epoch
    pairs = []
    for b in range(batch_size):
        t = (step % steps_per_epoch) * batch_size + b
        ci, si = t % n_content, t % n_style
        if reshuffle and epoch > 0:
            rng = np.random.default_rng([seed, epoch])
            ci = int(rng.permutation(n_content)[ci])
            si = int(rng.permutation(n_style)[si])
        pairs.append((ci, si))
    return pairs


def _write_line(fh, record: dict) -> None:
    fh.write(json.dumps(record, sort_keys=True) + "\n")
    fh.flush()


def train(
    config: TrainConfig,
    phi: Optional[LossNetwork] = None,
    resume: Optional[str] = None,
) -> Checkpoint:
    """Run training and return the final checkpoint (also written to ``config.out``).

    With ``resume`` the run continues from that checkpoint's parameters,
    optimizer moments and step counter; the log is appended to.
    """
    phi = phi if phi is not None else build_loss_network(config)
    content_files, style_files = split_dataset(config.data_dir, config.seed)
    steps_per_epoch = math.ceil(len(content_files) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    if config.max_steps is not None:
        total_steps = min(total_steps, config.max_steps)

    if resume:
        ck = load_checkpoint(resume)
        params, state, start = ck.params, ck.optimizer or AdamState(lr=config.lr), ck.step
    else:
        params, state, start = init_params(config.width, config.seed), AdamState(lr=config.lr), 0
    names = sorted(params)
    plist = [params[n] for n in names]
    phi_info = phi.describe()
    snapshot = config.to_dict()

    cache = _ImageCache(config.image_size)
    log_fh = None
    if config.log_path:
        Path(config.log_path).parent.mkdir(parents=True, exist_ok=True)
        log_fh = open(config.log_path, "a" if resume else "w")
        _write_line(log_fh, {"event": "config", "config": snapshot, "loss_network": phi_info,
                             "start_step": start, "total_steps": total_steps})
    log.info("training %d steps from step %d; loss network %s", total_steps, start, phi_info)

    last: Optional[LossReport] = None
    try:
        for step in range(start, total_steps):
            idx = pair_indices(step, len(content_files), len(style_files), config.batch_size,
                               config.seed, config.reshuffle)
            try:
                c = np.concatenate([cache.get(content_files[i]) for i, _ in idx])
                s = np.concatenate([cache.get(style_files[j]) for _, j in idx])
            except (imageio.ImageFormatError, OSError) as exc:
                log.warning("step %d: skipping undecodable pair (%s)", step + 1, exc)
                continue
            content, style = Tensor(c), Tensor(s)

            with Tape() as tape:
                output = stylize(content, style, params, config.strategy)
                report = total_loss(output, content, style, phi, config.weights)
            if not math.isfinite(report.total):
                raise TrainingAborted(step + 1, last, f"non-finite total loss {report.total}")
            for p in plist:
                p.grad = np.zeros_like(p.data)
            tape.backward(report.tensor)
            del tape
            adam_step(plist, state)
            last = report

            if log_fh:
                _write_line(log_fh, report.to_record(step + 1))
            if config.checkpoint_every and (step + 1) % config.checkpoint_every == 0:
                out = Path(config.out)
                save_checkpoint(params, snapshot, step + 1, out.with_name(f"{out.name}.step{step + 1:06d}"),
                                optimizer=state, loss_network=phi_info)
    finally:
        if log_fh:
            log_fh.close()

    out = save_checkpoint(params, snapshot, max(start, total_steps), config.out, optimizer=state, loss_network=phi_info)
    return Checkpoint(params=params, config=snapshot, step=max(start, total_steps), optimizer=state,
                      loss_network=phi_info, path=out)
