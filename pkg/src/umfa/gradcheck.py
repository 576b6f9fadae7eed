"""Central finite-difference checks of the analytic gradients.

Checks run in float64 storage; float32 rounding on a +/-1e-3 perturbation
would otherwise dominate the comparison. Inputs are kept away from the
kinks of ReLU and max-pool so the function is smooth within the stencil.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from umfa import losses, net, ops
from umfa.tensor import Tape, Tensor, precision
from umfa.vgg import LossNetwork

RTOL = 1e-3
ATOL = 1e-6


@dataclass
class GradCheckResult:
    name: str
    checked: int
    max_rel_error: float
    max_abs_error: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < RTOL and self.max_abs_error < ATOL

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}  {self.name:<34} elements={self.checked:<5} "
                f"max_rel={self.max_rel_error:.2e} max_abs(small)={self.max_abs_error:.2e}")


def _indices(t: Tensor, limit: Optional[int], rng: np.random.Generator) -> list[tuple]:
    all_idx = list(np.ndindex(*t.shape))
    if limit is None or len(all_idx) <= limit:
        return all_idx
    pick = rng.choice(len(all_idx), size=limit, replace=False)
    return [all_idx[i] for i in sorted(pick)]


def check(
    name: str,
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    delta: float = 1e-3,
    max_elements: Optional[int] = None,
    seed: int = 0,
) -> GradCheckResult:
    """Compare ``d fn() / d inputs`` from the tape against central differences.

    ``fn`` must return a single-element tensor and read ``inputs`` afresh on
    every call. Elements whose analytic gradient is below ``ATOL`` are
    compared absolutely, all others relatively.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = fn()
    tape.backward(loss)
    analytic = [np.zeros(t.shape) if t.grad is None else t.grad.astype(np.float64) for t in inputs]

    rng = np.random.default_rng(seed)
    max_rel = max_abs = 0.0
    checked = 0
    for t, a in zip(inputs, analytic):
        for idx in _indices(t, max_elements, rng):
            orig = t.data[idx]
            t.data[idx] = orig + delta
            f_plus = fn().item()
            t.data[idx] = orig - delta
            f_minus = fn().item()
            t.data[idx] = orig
            numeric = (f_plus - f_minus) / (2 * delta)
            err = abs(a[idx] - numeric)
            if abs(a[idx]) < ATOL:
                max_abs = max(max_abs, err)
            else:
                max_rel = max(max_rel, err / max(abs(a[idx]), abs(numeric)))
            checked += 1
    return GradCheckResult(name, checked, max_rel, max_abs)


# ---------------------------------------------------------------------------
# the suite
# ---------------------------------------------------------------------------


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x) + 0.0


def _distinct(rng, shape, gap=0.01):
    # values with pairwise gaps >> delta, so pooling argmaxes never flip
    n = int(np.prod(shape))
    return (rng.permutation(n) * gap - n * gap / 2).reshape(shape)


def _projected(out: Tensor, proj: np.ndarray) -> Tensor:
    return ops.sum(out * Tensor.wrap(proj))


def primitive_checks(seed: int = 0) -> list[GradCheckResult]:
    """Every differentiable primitive on random ``1x2x4x4`` inputs (delta 1e-3)."""
    rng = np.random.default_rng(seed)
    shape = (1, 2, 4, 4)
    results = []

    def run(name, build, *arrays, delta=1e-3, proj_shape=None):
        tensors = [Tensor(a) for a in arrays]
        probe = build(*tensors)
        proj = rng.normal(size=proj_shape or probe.shape)
        results.append(check(name, lambda: _projected(build(*tensors), proj), tensors, delta=delta))

    x = rng.normal(size=shape)
    run("conv2d 3x3 (input, weight, bias)", lambda a, w, b: ops.conv2d(a, w, b, padding=1),
        x, rng.normal(size=(3, 2, 3, 3)), rng.normal(size=(3,)))
    run("conv2d 1x1", lambda a, w, b: ops.conv2d(a, w, b), x, rng.normal(size=(3, 2, 1, 1)),
        rng.normal(size=(3,)))
    run("conv2d 3x3 stride 2", lambda a, w: ops.conv2d(a, w, stride=2, padding=1), x,
        rng.normal(size=(2, 2, 3, 3)))
    run("maxpool2d", ops.maxpool2d, _distinct(rng, shape))
    run("upsample_nearest", ops.upsample_nearest, x)
    run("concat_channels", ops.concat_channels, x, rng.normal(size=(1, 3, 4, 4)))
    run("relu", ops.relu, _away_from_zero(rng, shape))
    run("sigmoid", ops.sigmoid, x)
    run("add (broadcast)", ops.add, x, rng.normal(size=(1, 2, 1, 1)))
    run("sub (broadcast)", ops.sub, x, rng.normal(size=(1, 2, 1, 1)))
    run("mul (broadcast)", ops.mul, x, rng.normal(size=(1, 2, 1, 1)))
    run("div (broadcast)", ops.div, x, rng.uniform(0.5, 2.0, size=(1, 2, 1, 1)))
    run("sqrt", ops.sqrt, rng.uniform(0.5, 2.0, size=shape))
    run("sum", ops.sum, x)
    run("mean", ops.mean, x)
    run("mean_spatial", ops.mean_spatial, x)
    run("reshape", lambda a: ops.reshape(a, (1, 1, 4, 8)), x)
    run("channel_moments mean", lambda a: ops.channel_moments(a, 1e-5)[0], x)
    run("channel_moments std", lambda a: ops.channel_moments(a, 1e-5)[1], x)
    run("gram", lambda a: ops.reshape(ops.gram(a), (1, 1, 2, 2)), x)
    run("adain (content, style)", net.adain, x, rng.normal(size=shape) * 2 + 1)
    img = (1, 3, 16, 16)
    run("ssim (x, y)", losses.ssim, rng.uniform(0.1, 0.9, size=img), rng.uniform(0.1, 0.9, size=img))
    return results


def toy_images(size: int, seed: int = 0) -> tuple[Tensor, Tensor]:
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(0.05, 0.95, size=(1, 3, size, size))), Tensor(
        rng.uniform(0.05, 0.95, size=(1, 3, size, size)))


def model_checks(
    width: int = 4,
    size: int = 32,
    strategies: Iterable[str] = ("mfa",),
    per_tensor: int = 2,
    delta: float = 1e-5,
    seed: int = 0,
) -> list[GradCheckResult]:
    """Total loss w.r.t. every model parameter tensor (sampled elements) and the output image."""
    results = []
    phi = LossNetwork.random(seed)
    content, style = toy_images(size, seed)
    weights = losses.LossWeights()
    for strategy in strategies:
        params = net.init_params(width, seed)
        # nonzero biases so that no unit sits exactly at a ReLU kink
        rng = np.random.default_rng(seed + 1)
        for name, p in params.items():
            if name.endswith(".bias"):
                p.data[...] = rng.uniform(0.01, 0.05, size=p.shape)

        def loss(params=params, strategy=strategy):
            out = net.stylize(content, style, params, strategy)
            return losses.total_loss(out, content, style, phi, weights).tensor

        for name in sorted(params):
            results.append(check(f"total loss [{strategy}] d/d {name}", loss, [params[name]],
                                 delta=delta, max_elements=per_tensor, seed=seed))
            params[name].requires_grad = True

    out = Tensor(np.random.default_rng(seed + 2).uniform(0.05, 0.95, size=(1, 3, size, size)))
    results.append(check("total loss d/d output image",
                         lambda: losses.total_loss(out, content, style, phi, weights).tensor,
                         [out], delta=delta, max_elements=24, seed=seed))
    return results


def run_suite(model: bool = True, **model_kwargs) -> list[GradCheckResult]:
    with precision(np.float64):
        results = primitive_checks()
        if model:
            results += model_checks(**model_kwargs)
    return results
