"""Pseudo Depth Aggregation Module.

Fuses L candidate pseudo-depth maps (each replicated to 3 channels) into a
single map.  Channel attention pools a depthwise 5x5 convolution of each
map into a shared MLP that emits per-map 3-vector weights; spatial
attention runs two 1x1 convs over the channel-concatenated maps and emits
per-map single-channel weight planes.  The aggregate keeps the raw sum of
the maps and adds the two attention-reweighted sums scaled by lambda_c and
lambda_s.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (ConfigError, DimensionError, NumericError, Tensor,
                     concat, global_pool, split)
from .params import Conv2d, Linear

__all__ = [
    "PseudoDepthSet", "PdamParams", "pdam_param_count",
    "channel_attention", "spatial_attention", "aggregate",
]


@dataclass
class PseudoDepthSet:
    """L pseudo-depth maps of shape (1, 3, h, w) plus their source tags."""

    maps: list
    source_tags: list = field(default_factory=list)

    def __post_init__(self):
        if not self.maps:
            raise ConfigError("a pseudo-depth set needs at least one map")
        ref = self.maps[0]
        for m in self.maps:
            if not isinstance(m, Tensor) or m.ndim != 4:
                raise DimensionError("pseudo-depth maps must be 4-D tensors")
            if m.shape[0] != 1 or m.shape[1] != 3:
                raise DimensionError(
                    f"expected map shape (1, 3, h, w), got {m.shape}")
            if m.shape != ref.shape:
                raise DimensionError(
                    f"maps disagree on shape: {m.shape} vs {ref.shape}")
        if not self.source_tags:
            self.source_tags = [f"map{i}" for i in range(len(self.maps))]
        if len(self.source_tags) != len(self.maps):
            raise ConfigError("one source tag per map required")

    @classmethod
    def from_planes(cls, planes, source_tags=None, dtype=np.float32):
        """Wrap (h, w) planes, replicating each to three channels."""
        maps = []
        for p in planes:
            arr = np.asarray(p, dtype=dtype)
            if arr.ndim != 2:
                raise DimensionError(f"expected (h, w) planes, got {arr.shape}")
            maps.append(Tensor(np.broadcast_to(arr, (1, 3) + arr.shape).copy()))
        return cls(maps=maps, source_tags=list(source_tags or []))

    @property
    def num_maps(self) -> int:
        return len(self.maps)

    @property
    def spatial(self) -> tuple:
        return self.maps[0].shape[2:]


class PdamParams:
    """Weights for both attention branches over a fixed number of maps."""

    def __init__(self, rng, num_maps: int, hidden: int | None = None,
                 mid: int | None = None, lambda_c: float = 0.5,
                 lambda_s: float = 0.5, dtype=np.float32):
        if num_maps < 1:
            raise ConfigError("num_maps must be >= 1")
        if lambda_c < 0 or lambda_s < 0:
            raise ConfigError("lambda weights must be >= 0")
        L = num_maps
        self.num_maps = L
        self.lambda_c = float(lambda_c)
        self.lambda_s = float(lambda_s)
        self.hidden = int(hidden) if hidden else 6 * L
        self.mid = int(mid) if mid else 3 * L
        # per-map depthwise 5x5 sharpens pooled statistics only; Eq. sums
        # always see the raw maps
        self.dw = [Conv2d(rng, 3, 3, 5, padding=2, groups=3, bias=False, dtype=dtype)
                   for _ in range(L)]
        self.fc1 = Linear(rng, 6 * L, self.hidden, dtype=dtype)
        self.fc2 = Linear(rng, self.hidden, 3 * L, dtype=dtype)
        self.sconv1 = Conv2d(rng, 3 * L, self.mid, 1, dtype=dtype)
        self.sconv2 = Conv2d(rng, self.mid, L, 1, dtype=dtype)

    @classmethod
    def zero_initialized(cls, num_maps: int, lambda_c: float = 0.5,
                         lambda_s: float = 0.5, dtype=np.float32) -> "PdamParams":
        """All-zero weights: both attention branches emit sigmoid(0) = 0.5."""
        p = cls(np.random.default_rng(0), num_maps, lambda_c=lambda_c,
                lambda_s=lambda_s, dtype=dtype)
        for _, t in p.named_parameters():
            t.data = np.zeros_like(t.data)
        return p

    def named_parameters(self, prefix: str = "pdam"):
        for i, c in enumerate(self.dw):
            yield from c.named_parameters(f"{prefix}.dw{i}")
        yield from self.fc1.named_parameters(f"{prefix}.fc1")
        yield from self.fc2.named_parameters(f"{prefix}.fc2")
        yield from self.sconv1.named_parameters(f"{prefix}.sconv1")
        yield from self.sconv2.named_parameters(f"{prefix}.sconv2")

    def num_scalars(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())


def pdam_param_count(num_maps: int, hidden: int | None = None,
                     mid: int | None = None) -> int:
    """Closed-form scalar count matching PdamParams' enumeration."""
    L = num_maps
    hidden = hidden or 6 * L
    mid = mid or 3 * L
    dw = L * (3 * 25)
    mlp = (6 * L * hidden + hidden) + (hidden * 3 * L + 3 * L)
    sp = (3 * L * mid + mid) + (mid * L + L)
    return dw + mlp + sp


def _check_pairing(pd_set: PseudoDepthSet, params: PdamParams) -> None:
    if pd_set.num_maps != params.num_maps:
        raise ConfigError(
            f"parameter set built for {params.num_maps} maps, got {pd_set.num_maps}")


def channel_attention(pd_set: PseudoDepthSet, params: PdamParams) -> list:
    """Per-map (1, 3, 1, 1) weights in (0, 1).

    Each map is depthwise-convolved, max- and average-pooled to 3-vectors,
    and the pooled pairs are concatenated map by map (max then avg) into a
    6L feature that the shared two-layer MLP squashes to 3L sigmoids.
    """
    _check_pairing(pd_set, params)
    feats = []
    for m, dw in zip(pd_set.maps, params.dw):
        c = dw(m)
        feats.append(global_pool(c, "max").reshape((1, 3)))
        feats.append(global_pool(c, "avg").reshape((1, 3)))
    y = concat(feats, axis=1)
    h = params.fc1(y).relu()
    w = params.fc2(h).sigmoid()
    parts = split(w, [3] * params.num_maps, axis=1)
    return [p.reshape((1, 3, 1, 1)) for p in parts]


def spatial_attention(pd_set: PseudoDepthSet, params: PdamParams) -> list:
    """Per-map (1, 1, h, w) weight planes in (0, 1)."""
    _check_pairing(pd_set, params)
    stack = concat(pd_set.maps, axis=1)
    a = params.sconv1(stack).relu()
    s = params.sconv2(a).sigmoid()
    return split(s, [1] * params.num_maps, axis=1)


def aggregate(pd_set: PseudoDepthSet, params: PdamParams) -> Tensor:
    """Sum of raw maps plus lambda-scaled attention-reweighted sums.

    With lambda_c == lambda_s == 0 the attention branches are skipped
    entirely and the result is exactly the elementwise sum of the maps.
    """
    _check_pairing(pd_set, params)
    use_c = params.lambda_c != 0.0
    use_s = params.lambda_s != 0.0
    w_c = w_s = None
    if use_c:
        try:
            w_c = channel_attention(pd_set, params)
        except NumericError as e:
            raise NumericError(f"channel attention failed: {e}")
    if use_s:
        try:
            w_s = spatial_attention(pd_set, params)
        except NumericError as e:
            raise NumericError(f"spatial attention failed: {e}")
    total = None
    for i, m in enumerate(pd_set.maps):
        term = m
        if use_c:
            term = term + (m * w_c[i]) * params.lambda_c
        if use_s:
            term = term + (m * w_s[i]) * params.lambda_s
        total = term if total is None else total + term
    return total
