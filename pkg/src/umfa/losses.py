"""Training objective: weighted sum of Gram style loss, feature content loss and SSIM loss."""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from umfa import ops
from umfa.tensor import Tensor
from umfa.vgg import TAPS, LossNetwork

CONTENT_TAP = "relu2_2"

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_RANGE = 1.0


@dataclass(frozen=True)
class LossWeights:
    """Multipliers of the style, content and SSIM terms."""

    alpha: float = 0.8
    beta: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        for name in ("alpha", "beta", "gamma"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be finite and >= 0, got {value}")


@dataclass
class LossReport:
    """Scalar values of one loss evaluation.

    ``ssim`` is the similarity itself; the SSIM loss term is ``1 - ssim``.
    """

    total: float
    style: float
    content: float
    ssim: float
    per_tap: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    @property
    def ssim_loss(self) -> float:
        return 1.0 - self.ssim

    def to_record(self, step: int) -> dict:
        return {
            "step": step,
            "total": self.total,
            "style": self.style,
            "content": self.content,
            "ssim": self.ssim,
            "per_tap": dict(self.per_tap),
        }


def _require_same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def _sum_squares(x: Tensor) -> Tensor:
    return ops.sum(x * x)


def content_term(feat_o: Tensor, feat_c: Tensor) -> Tensor:
    """Squared feature distance divided by C*H*W (and by the batch size)."""
    _require_same_shape(feat_o, feat_c, "content loss")
    return _sum_squares(feat_o - feat_c) / float(feat_o.size)


def style_term(feat_o: Tensor, feat_s: Tensor) -> Tensor:
    """Squared Frobenius distance of unnormalized Gram matrices over the output tap's C*H*W."""
    n, c, h, w = feat_o.shape
    diff = ops.gram(feat_o) - ops.gram(feat_s)
    return _sum_squares(diff) / float(n * c * h * w)


def content_loss(output: Tensor, content: Tensor, phi: LossNetwork) -> Tensor:
    _require_same_shape(output, content, "content loss")
    fo = phi.extract(output, [CONTENT_TAP])[CONTENT_TAP]
    fc = phi.extract(content, [CONTENT_TAP])[CONTENT_TAP]
    return content_term(fo, fc)


def style_loss(output: Tensor, style: Tensor, phi: LossNetwork) -> tuple[Tensor, dict[str, Tensor]]:
    fo = phi.extract(output, TAPS)
    fs = phi.extract(style, TAPS)
    per_tap = {tap: style_term(fo[tap], fs[tap]) for tap in TAPS}
    total = per_tap[TAPS[0]]
    for tap in TAPS[1:]:
        total = total + per_tap[tap]
    return total, per_tap


@functools.lru_cache(maxsize=None)
def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(x: Tensor, y: Tensor) -> Tensor:
    """Mean SSIM over all valid 11x11 Gaussian windows of every channel.

    Channels are treated independently and averaged; windows never extend
    past the image border.
    """
    _require_same_shape(x, y, "ssim")
    n, c, h, w = x.shape
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")
    window = Tensor.wrap(_gaussian_window(SSIM_WINDOW, SSIM_SIGMA).astype(x.dtype)[None, None])
    c1 = (SSIM_K1 * SSIM_RANGE) ** 2
    c2 = (SSIM_K2 * SSIM_RANGE) ** 2

    xs = ops.reshape(x, (n * c, 1, h, w))
    ys = ops.reshape(y, (n * c, 1, h, w))

    def blur(t):
        return ops.conv2d(t, window)

    mu_x, mu_y = blur(xs), blur(ys)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = blur(xs * xs) - mu_xx
    var_y = blur(ys * ys) - mu_yy
    cov = blur(xs * ys) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return ops.mean(num / den)


def total_loss(
    output: Tensor,
    content: Tensor,
    style: Tensor,
    phi: LossNetwork,
    weights: LossWeights = LossWeights(),
) -> LossReport:
    """Evaluate all three terms; ``report.tensor`` is the differentiable total."""
    _require_same_shape(output, content, "total loss")
    fo = phi.extract(output, TAPS)
    fc = phi.extract(content, [CONTENT_TAP])
    fs = phi.extract(style, TAPS)

    per_tap = {tap: style_term(fo[tap], fs[tap]) for tap in TAPS}
    style_t = per_tap[TAPS[0]]
    for tap in TAPS[1:]:
        style_t = style_t + per_tap[tap]
    content_t = content_term(fo[CONTENT_TAP], fc[CONTENT_TAP])
    ssim_t = ssim(output, content)

    total = weights.alpha * style_t + weights.beta * content_t + weights.gamma * (1.0 - ssim_t)
    return LossReport(
        total=total.item(),
        style=style_t.item(),
        content=content_t.item(),
        ssim=ssim_t.item(),
        per_tap={tap: t.item() for tap, t in per_tap.items()},
        weights=weights,
        tensor=total,
    )
