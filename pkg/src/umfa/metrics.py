"""Evaluation criteria (SSIM to content, Gram loss to style) and the runtime benchmark."""

from __future__ import annotations

import contextlib
import os
import statistics
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from threadpoolctl import threadpool_info, threadpool_limits

from umfa import imageio
from umfa.losses import ssim, style_loss
from umfa.net import Aggregation, Params, stylize
from umfa.tensor import Tensor
from umfa.vgg import LossNetwork

# GPU timings reported for the reference implementation (seconds per image), for comparison only
REFERENCE_SECONDS = {256: 0.14, 512: 0.24, 1024: 0.64}

TRIPLE_ROLES = ("content", "style", "output")


def evaluate(content: Tensor, style: Tensor, output: Tensor, phi: LossNetwork) -> dict:
    if output.shape != content.shape:
        raise ValueError(f"output shape {output.shape} differs from content shape {content.shape}")
    gram_loss, _ = style_loss(output, style, phi)
    return {"ssim": ssim(output, content).item(), "gram_loss": gram_loss.item()}


def find_triples(directory) -> dict[str, dict[str, Path]]:
    """Group ``<name>_content.*``, ``<name>_style.*``, ``<name>_output.*`` files by ``<name>``."""
    triples: dict[str, dict[str, Path]] = {}
    for path in imageio.list_images(directory):
        stem, _, role = path.stem.rpartition("_")
        if stem and role in TRIPLE_ROLES:
            triples.setdefault(stem, {})[role] = path
    incomplete = sorted(k for k, v in triples.items() if len(v) != 3)
    if incomplete:
        raise ValueError(f"{directory}: incomplete triples {incomplete}")
    if not triples:
        raise ValueError(f"{directory}: no <name>_content/_style/_output image triples found")
    return dict(sorted(triples.items()))


def evaluate_dir(directory, phi: LossNetwork) -> dict:
    items = []
    for name, files in find_triples(directory).items():
        imgs = {role: imageio.load_image(p) for role, p in files.items()}
        row = evaluate(imgs["content"], imgs["style"], imgs["output"], phi)
        items.append({"name": name, **row})
    return {
        "ssim": float(np.mean([r["ssim"] for r in items])),
        "gram_loss": float(np.mean([r["gram_loss"] for r in items])),
        "count": len(items),
        "items": items,
    }


def _blas_threads() -> int:
    info = threadpool_info()
    return max((p.get("num_threads", 1) for p in info), default=1)


def bench(
    params: Params,
    sizes: Sequence[int],
    runs: int = 5,
    strategy: Aggregation = Aggregation.MFA,
    threads: Optional[int] = 1,
    seed: int = 0,
) -> list[dict]:
    """Median wall-clock seconds of ``stylize`` per square image size.

    Inputs are random tensors so decoding never enters the timing. One
    untimed warm-up call precedes the timed runs.
    """
    for size in sizes:
        if size % 16:
            raise ValueError(f"bench size {size} is not divisible by 16")
    rng = np.random.default_rng(seed)
    rows = []
    limit = threadpool_limits(limits=threads) if threads else contextlib.nullcontext()
    with limit:
        thread_count = _blas_threads()
        for size in sizes:
            content = Tensor(rng.random((1, 3, size, size)))
            style = Tensor(rng.random((1, 3, size, size)))
            stylize(content, style, params, strategy)
            times = []
            for _ in range(runs):
                t0 = time.perf_counter()
                stylize(content, style, params, strategy)
                times.append(time.perf_counter() - t0)
            rows.append({
                "size": size,
                "median_s": statistics.median(times),
                "runs": runs,
                "thread_count": thread_count,
            })
    return rows


def format_bench(rows: list[dict]) -> str:
    lines = [f"{'size':>6}  {'median_s':>9}  {'runs':>4}  {'threads':>7}  {'reference_gpu_s':>15}"]
    for r in rows:
        ref = REFERENCE_SECONDS.get(r["size"])
        ref_s = f"{ref:.2f}" if ref is not None else "-"
        lines.append(f"{r['size']:>6}  {r['median_s']:>9.3f}  {r['runs']:>4}  {r['thread_count']:>7}  {ref_s:>15}")
    lines.append(f"cpu_count={os.cpu_count()}")
    return "\n".join(lines)
