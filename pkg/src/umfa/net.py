"""U-Net style-transfer network with dense-block encoder and multi-layer feature aggregation.

Data flow for a content/style pair::

    encode(content) --+
                      +--> aggregate (none | bfa | mfa) --> AdaIN per level --> decode
    encode(style) ----+

Parameters live in a plain ``dict[str, Tensor]`` whose keys are stable and
sorted-iterable; every function here takes that dict. The pyramid width is
inferred from the stem conv, so a narrow toy model (width 4) and the full
model (width 32) share all code paths.
"""

from __future__ import annotations

import enum
from typing import Optional, Sequence

import numpy as np

from umfa import ops
from umfa.tensor import Tensor, default_dtype

LEVELS = 5
ADAIN_EPS = 1e-5

Params = dict[str, Tensor]
FeaturePyramid = list[Tensor]


class Aggregation(str, enum.Enum):
    NONE = "none"
    BFA = "bfa"
    MFA = "mfa"

    @classmethod
    def parse(cls, value) -> "Aggregation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(s.value for s in cls)
            raise ValueError(f"unknown aggregation strategy {value!r}; choose one of {{{choices}}}") from None


def level_channels(width: int = 32) -> list[int]:
    return [width * 2 ** k for k in range(LEVELS)]


def param_shapes(width: int = 32) -> dict[str, tuple]:
    """Name -> shape for every parameter of a model with stem width ``width``."""
    ch = level_channels(width)
    shapes: dict[str, tuple] = {}

    def conv(name, cin, cout, k):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    conv("stem", 3, ch[0], 3)
    for k in range(1, LEVELS):
        c = ch[k - 1]
        conv(f"ddb{k}.dense1", c, c, 3)
        conv(f"ddb{k}.dense2", 2 * c, c, 3)
        conv(f"ddb{k}.dense3", 3 * c, c, 3)
        conv(f"ddb{k}.reduce", 4 * c, ch[k], 1)
        conv(f"ddb{k}.proj", ch[k], ch[k], 1)
    for k in range(1, LEVELS):
        conv(f"mfa{k}", ch[k - 1] + ch[k], ch[k], 1)
    conv("bfa", sum(ch), ch[-1], 1)
    for k in range(LEVELS - 1):
        conv(f"ucb{k}.up", ch[k + 1], ch[k + 1] // 2, 3)
        conv(f"ucb{k}.fuse", ch[k + 1] // 2 + ch[k], ch[k], 1)
        conv(f"ucb{k}.refine", ch[k], ch[k], 3)
    conv("out", ch[0], 3, 3)
    return dict(sorted(shapes.items()))


def init_params(width: int = 32, seed: int = 0) -> Params:
    """He-uniform conv weights (fan-in), zero biases, drawn in sorted-name order."""
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, shape in param_shapes(width).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            bound = np.sqrt(6.0 / fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data.astype(default_dtype()), requires_grad=True, name=name)
    return params


def model_width(params: Params) -> int:
    return params["stem.weight"].shape[0]


def _conv(x: Tensor, params: Params, name: str) -> Tensor:
    w = params[f"{name}.weight"]
    return ops.conv2d(x, w, params[f"{name}.bias"], padding=w.shape[-1] // 2)


def _conv_relu(x: Tensor, params: Params, name: str) -> Tensor:
    return ops.relu(_conv(x, params, name))


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------


def dense_block(x: Tensor, params: Params, prefix: str) -> Tensor:
    """Three densely connected 3x3 convs; output is ``concat(x, o1, o2, o3)`` with 4c channels."""
    o1 = _conv_relu(x, params, f"{prefix}.dense1")
    o2 = _conv_relu(ops.concat_channels(x, o1), params, f"{prefix}.dense2")
    o3 = _conv_relu(ops.concat_channels(x, o1, o2), params, f"{prefix}.dense3")
    return ops.concat_channels(x, o1, o2, o3)


def ddb(x: Tensor, params: Params, k: int) -> Tensor:
    """Downsampling dense block ``k``: halves h and w, doubles channels."""
    prefix = f"ddb{k}"
    y = dense_block(ops.maxpool2d(x), params, prefix)
    y = _conv_relu(y, params, f"{prefix}.reduce")
    return _conv_relu(y, params, f"{prefix}.proj")


def encode(image: Tensor, params: Params) -> FeaturePyramid:
    if image.ndim != 4 or image.shape[1] != 3:
        raise ValueError(f"encode expects an (n, 3, h, w) image, got shape {image.shape}")
    h, w = image.shape[2:]
    if h % 16 or w % 16:
        need_h, need_w = -h % 16, -w % 16
        raise ValueError(
            f"image size {h}x{w} is not divisible by 16; pad by {need_h} rows and "
            f"{need_w} columns (or resize to {h + need_h}x{w + need_w})"
        )
    feats = [_conv_relu(image, params, "stem")]
    for k in range(1, LEVELS):
        feats.append(ddb(feats[-1], params, k))
    return feats


# ---------------------------------------------------------------------------
# transfer module
# ---------------------------------------------------------------------------


def mfa_aggregate(pyramid: FeaturePyramid, params: Params, strategy: Aggregation) -> FeaturePyramid:
    strategy = Aggregation.parse(strategy)
    if strategy is Aggregation.NONE:
        return list(pyramid)
    if strategy is Aggregation.MFA:
        agg = [pyramid[0]]
        for k in range(1, LEVELS):
            fused = ops.concat_channels(ops.maxpool2d(agg[-1]), pyramid[k])
            agg.append(_conv_relu(fused, params, f"mfa{k}"))
        return agg
    # BFA: every shallower level pooled down to the bottom and fused there
    pooled = []
    for k, f in enumerate(pyramid[:-1]):
        for _ in range(LEVELS - 1 - k):
            f = ops.maxpool2d(f)
        pooled.append(f)
    bottom = _conv_relu(ops.concat_channels(*pooled, pyramid[-1]), params, "bfa")
    return list(pyramid[:-1]) + [bottom]


def adain(content: Tensor, style: Tensor, eps: float = ADAIN_EPS) -> Tensor:
    """Shift each content channel to the style channel's mean and std."""
    if content.shape[1] != style.shape[1] or style.shape[0] not in (1, content.shape[0]):
        raise ValueError(
            f"adain: content shape {content.shape} and style shape {style.shape} disagree on channels"
        )
    c_mu, c_std = ops.channel_moments(content, eps)
    s_mu, s_std = ops.channel_moments(style, eps)
    return s_std * (content - c_mu) / c_std + s_mu


def transfer(
    content_pyr: FeaturePyramid,
    style_pyr: FeaturePyramid,
    params: Params,
    strategy: Aggregation = Aggregation.MFA,
) -> FeaturePyramid:
    agg_c = mfa_aggregate(content_pyr, params, strategy)
    agg_s = mfa_aggregate(style_pyr, params, strategy)
    return [adain(c, s) for c, s in zip(agg_c, agg_s)]


# ---------------------------------------------------------------------------
# decoder
# ---------------------------------------------------------------------------


def ucb(up_input: Tensor, skip: Tensor, params: Params, k: int) -> Tensor:
    """Upsampling block ``k``: upsample, halve, join the skip feature, restore its width."""
    x = ops.upsample_nearest(up_input)
    if x.shape[2:] != skip.shape[2:]:
        raise ValueError(
            f"ucb{k}: upsampled shape {x.shape} does not match skip feature shape {skip.shape}"
        )
    x = _conv_relu(x, params, f"ucb{k}.up")
    x = ops.concat_channels(x, skip)
    x = _conv_relu(x, params, f"ucb{k}.fuse")
    return _conv_relu(x, params, f"ucb{k}.refine")


def decode(pyramid: FeaturePyramid, params: Params) -> Tensor:
    x = pyramid[-1]
    for k in range(LEVELS - 2, -1, -1):
        x = ucb(x, pyramid[k], params, k)
    return ops.sigmoid(_conv(x, params, "out"))


def stylize(
    content: Tensor,
    style: Tensor,
    params: Params,
    strategy: Aggregation = Aggregation.MFA,
) -> Tensor:
    """Stylized image at the content's resolution, values in [0, 1]."""
    return decode(transfer(encode(content, params), encode(style, params), params, strategy), params)


def parameter_list(params: Params, names: Optional[Sequence[str]] = None) -> list[Tensor]:
    return [params[n] for n in (names or sorted(params))]
