"""Latent-space toy segmentation network with pseudo-depth fusion.

A trainable stride-8 stem stands in for a frozen VAE encoder, a small UNet
runs at 1/8 resolution on the fused latent, and a 1x1 head scores the
concatenated feature pyramid before bilinear upsampling back to pixels.
Fusion happens once, at the latent: the RGB latent is mixed with either
Gaussian noise, an encoded pseudo-depth latent, or nothing, using the
noise-schedule weights at the configured timestep(s).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (ConfigError, DimensionError, Tensor, concat, crop2d,
                     upsample_bilinear, upsample_nearest2x)
from .params import Conv2d, ParamStore
from .diffusion import (DESK_ENCODER_WIDTHS, NoiseSchedule, PdEncoderParams,
                        build_schedule, encode_pd, fuse_gaussian, fuse_manual,
                        fuse_structured, mixing_weights)
from .pdam import PdamParams, PseudoDepthSet, aggregate

__all__ = ["FusionSpec", "SegModel", "SegNetParams", "seg_loss", "LossParts",
           "softmax_probs"]

FUSION_MODES = ("rgb_only", "gaussian", "structured", "manual")
PD_SOURCES = ("none", "single", "addition", "pdam")


@dataclass(frozen=True)
class FusionSpec:
    """How the RGB latent and the pseudo depth are combined."""

    fusion_mode: str = "structured"
    pd_source: str = "pdam"
    t: tuple = (0,)
    w_rgb: float = 0.95
    w_pd: float = 0.05

    def validate(self, schedule_len: int) -> None:
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion_mode {self.fusion_mode!r}")
        if self.pd_source not in PD_SOURCES:
            raise ConfigError(f"unknown pd_source {self.pd_source!r}")
        if not self.t:
            raise ConfigError("need at least one timestep tap")
        for t in self.t:
            if not 0 <= int(t) < schedule_len:
                raise ConfigError(f"timestep {t} outside schedule")
        if self.w_rgb < 0 or self.w_pd < 0:
            raise ConfigError("manual fusion weights must be >= 0")
        if self.needs_pd and self.pd_source == "none":
            raise ConfigError(
                f"fusion_mode {self.fusion_mode!r} needs a pd_source other than 'none'")

    @property
    def needs_pd(self) -> bool:
        if self.fusion_mode == "structured":
            return True
        return self.fusion_mode == "manual" and self.w_pd != 0.0


class SegNetParams:
    """Stem, UNet and head weights (everything except PD encoder/PDAM)."""

    def __init__(self, rng, num_classes: int, num_taps: int = 1, base: int = 32,
                 latent_channels: int = 4, dtype=np.float32):
        if num_classes < 2:
            raise ConfigError("need at least two classes")
        b = int(base)
        lc = int(latent_channels)
        self.num_classes = int(num_classes)
        self.base = b
        self.latent_channels = lc
        self.num_taps = int(num_taps)
        self.stem = [
            Conv2d(rng, 3, 16, 3, stride=2, padding=1, dtype=dtype),
            Conv2d(rng, 16, 32, 3, stride=2, padding=1, dtype=dtype),
            Conv2d(rng, 32, lc, 3, stride=2, padding=1, dtype=dtype),
        ]
        self.enc1 = [Conv2d(rng, lc, b, 3, padding=1, dtype=dtype),
                     Conv2d(rng, b, b, 3, padding=1, dtype=dtype)]
        self.down1 = Conv2d(rng, b, 2 * b, 3, stride=2, padding=1, dtype=dtype)
        self.enc2 = [Conv2d(rng, 2 * b, 2 * b, 3, padding=1, dtype=dtype),
                     Conv2d(rng, 2 * b, 2 * b, 3, padding=1, dtype=dtype)]
        self.down2 = Conv2d(rng, 2 * b, 4 * b, 3, stride=2, padding=1, dtype=dtype)
        self.bot = [Conv2d(rng, 4 * b, 4 * b, 3, padding=1, dtype=dtype),
                    Conv2d(rng, 4 * b, 4 * b, 3, padding=1, dtype=dtype)]
        self.dec1 = [Conv2d(rng, 6 * b, 2 * b, 3, padding=1, dtype=dtype),
                     Conv2d(rng, 2 * b, 2 * b, 3, padding=1, dtype=dtype)]
        self.dec2 = [Conv2d(rng, 3 * b, b, 3, padding=1, dtype=dtype),
                     Conv2d(rng, b, b, 3, padding=1, dtype=dtype)]
        head_in = self.num_taps * (3 * b + lc)
        self.head = Conv2d(rng, head_in, num_classes, 1, dtype=dtype)

    def named_parameters(self):
        groups = [("stem", self.stem), ("unet.enc1", self.enc1),
                  ("unet.down1", [self.down1]), ("unet.enc2", self.enc2),
                  ("unet.down2", [self.down2]), ("unet.bot", self.bot),
                  ("unet.dec1", self.dec1), ("unet.dec2", self.dec2)]
        for prefix, convs in groups:
            for i, c in enumerate(convs):
                yield from c.named_parameters(f"{prefix}.{i}")
        yield from self.head.named_parameters("head")

    def stem_forward(self, rgb: Tensor) -> Tensor:
        if rgb.ndim != 4 or rgb.shape[1] != 3:
            raise DimensionError(f"expected (n, 3, h, w) input, got {rgb.shape}")
        if rgb.shape[2] % 8 or rgb.shape[3] % 8:
            raise DimensionError(
                f"spatial extents must be multiples of 8, got {rgb.shape}")
        h = self.stem[0](rgb).relu()
        h = self.stem[1](h).relu()
        return self.stem[2](h)

    def unet_forward(self, z: Tensor) -> tuple:
        """Return (fine, coarse) decoder features at 1/8 and 1/16 scale."""
        s1 = self.enc1[1](self.enc1[0](z).relu()).relu()
        h = self.down1(s1).relu()
        s2 = self.enc2[1](self.enc2[0](h).relu()).relu()
        h = self.down2(s2).relu()
        h = self.bot[1](self.bot[0](h).relu()).relu()
        h = crop2d(upsample_nearest2x(h), *s2.shape[2:])
        h = concat([h, s2], axis=1)
        c1 = self.dec1[1](self.dec1[0](h).relu()).relu()
        h = crop2d(upsample_nearest2x(c1), *s1.shape[2:])
        h = concat([h, s1], axis=1)
        fine = self.dec2[1](self.dec2[0](h).relu()).relu()
        return fine, c1


class SegModel:
    """Bundle of all trainable parts plus the fusion recipe."""

    def __init__(self, seg: SegNetParams, enc: PdEncoderParams | None,
                 pdam: PdamParams | None, schedule: NoiseSchedule,
                 spec: FusionSpec):
        self.seg = seg
        self.enc = enc
        self.pdam = pdam
        self.schedule = schedule
        self.spec = spec
        spec.validate(schedule.timesteps)

    @classmethod
    def create(cls, rng, num_classes: int, spec: FusionSpec, num_maps: int = 0,
               base: int = 32, enc_widths=DESK_ENCODER_WIDTHS,
               schedule: NoiseSchedule | None = None, lambda_c: float = 0.5,
               lambda_s: float = 0.5, dtype=np.float32) -> "SegModel":
        schedule = schedule or build_schedule()
        seg = SegNetParams(rng, num_classes, num_taps=len(spec.t), base=base,
                           dtype=dtype)
        enc = pdam = None
        if spec.needs_pd:
            if num_maps < 1:
                raise ConfigError("pd fusion requested but no maps configured")
            enc = PdEncoderParams(rng, widths=enc_widths, dtype=dtype)
            if spec.pd_source == "pdam":
                pdam = PdamParams(rng, num_maps, lambda_c=lambda_c,
                                  lambda_s=lambda_s, dtype=dtype)
        return cls(seg, enc, pdam, schedule, spec)

    def named_parameters(self):
        yield from self.seg.named_parameters()
        if self.enc is not None:
            yield from self.enc.named_parameters("enc")
        if self.pdam is not None:
            yield from self.pdam.named_parameters("pdam")

    def build_store(self) -> ParamStore:
        store = ParamStore()
        store.extend(self.named_parameters())
        return store

    def aggregate_pd(self, pd_set: PseudoDepthSet) -> Tensor:
        src = self.spec.pd_source
        if src == "single":
            if pd_set.num_maps != 1:
                raise ConfigError(
                    f"pd_source 'single' expects one map, got {pd_set.num_maps}")
            return pd_set.maps[0]
        if src == "addition":
            total = pd_set.maps[0]
            for m in pd_set.maps[1:]:
                total = total + m
            return total
        if src == "pdam":
            if self.pdam is None:
                raise ConfigError("model was built without PDAM parameters")
            return aggregate(pd_set, self.pdam)
        raise ConfigError(f"pd_source {src!r} does not aggregate")

    def forward(self, rgb: Tensor, pd_set: PseudoDepthSet | None = None,
                noise_rng=None) -> Tensor:
        """Logits of shape (1, K, h, w) at input resolution."""
        spec = self.spec
        z_rgb = self.seg.stem_forward(rgb)
        lat = None
        if spec.needs_pd:
            if pd_set is None:
                raise ConfigError(
                    f"fusion_mode {spec.fusion_mode!r} requires pseudo-depth maps")
            if pd_set.spatial != rgb.shape[2:]:
                raise DimensionError(
                    f"pseudo depth {pd_set.spatial} does not match input {rgb.shape[2:]}")
            lat = encode_pd(self.aggregate_pd(pd_set), self.enc)
        parts = []
        for t in spec.t:
            if spec.fusion_mode == "rgb_only":
                w_sig, _ = mixing_weights(self.schedule, int(t))
                z_t = z_rgb * w_sig
            elif spec.fusion_mode == "gaussian":
                if noise_rng is None:
                    raise ConfigError("gaussian fusion needs a noise generator")
                eps = Tensor(noise_rng.standard_normal(z_rgb.shape)
                             .astype(z_rgb.data.dtype))
                z_t = fuse_gaussian(z_rgb, eps, self.schedule, int(t))
            elif spec.fusion_mode == "structured":
                z_t = fuse_structured(z_rgb, lat, self.schedule, int(t))
            else:
                z_t = fuse_manual(z_rgb, lat if lat is not None else z_rgb,
                                  spec.w_rgb, spec.w_pd)
            fine, coarse = self.seg.unet_forward(z_t)
            coarse8 = crop2d(upsample_nearest2x(coarse), *fine.shape[2:])
            parts.extend([fine, coarse8, z_t])
        logits8 = self.seg.head(concat(parts, axis=1))
        return upsample_bilinear(logits8, rgb.shape[2], rgb.shape[3])

    def param_count(self) -> int:
        return sum(t.data.size for _, t in self.named_parameters())


# loss -----------------------------------------------------------------------


@dataclass
class LossParts:
    total: Tensor
    ce: float
    dice: float
    all_ignored: bool


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Channel softmax of raw (1, K, h, w) logits (inference path)."""
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    return e / e.sum(axis=1, keepdims=True)


def seg_loss(logits: Tensor, labels: np.ndarray, ce_weight: float = 1.0,
             dice_weight: float = 1.0, ignore: int = 255,
             smooth: float = 1.0) -> LossParts:
    """Masked cross entropy plus soft dice over classes present in the
    target.

    ``labels`` is an (h, w) integer map; ``ignore`` pixels contribute to
    neither term.  If every pixel is ignored the loss is zero and the
    result is flagged.  The log-softmax shift uses the detached per-pixel
    max, which leaves gradients exact because softmax is shift-invariant.
    """
    if logits.ndim != 4 or logits.shape[0] != 1:
        raise DimensionError(f"expected (1, k, h, w) logits, got {logits.shape}")
    k = logits.shape[1]
    labels = np.asarray(labels)
    if labels.shape != logits.shape[2:]:
        raise DimensionError(
            f"labels {labels.shape} do not match logits {logits.shape[2:]}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ConfigError("labels must be integers")
    valid = labels != ignore
    bad = valid & ((labels < 0) | (labels >= k))
    if bad.any():
        raise ConfigError(f"label id outside [0, {k}) and not ignore")
    n_valid = int(valid.sum())
    if n_valid == 0:
        dt = logits.data.dtype
        return LossParts(total=Tensor(np.zeros((), dtype=dt)), ce=0.0, dice=0.0,
                         all_ignored=True)
    dt = logits.data.dtype
    onehot = ((labels[None] == np.arange(k)[:, None, None]) & valid[None])
    onehot = Tensor(onehot[None].astype(dt))
    validf = Tensor(valid[None, None].astype(dt))

    shift = Tensor(logits.data.max(axis=1, keepdims=True))
    shifted = logits - shift
    lse = shifted.exp().sum(axis=1, keepdims=True).log()
    logp = shifted - lse

    ce = -((onehot * logp).sum()) * (1.0 / n_valid)

    probs = logp.exp()
    inter = (probs * onehot).sum(axis=(0, 2, 3))
    pred_mass = (probs * validf).sum(axis=(0, 2, 3))
    target_mass = onehot.data.sum(axis=(0, 2, 3))
    present = target_mass > 0
    num = inter * 2.0 + smooth
    den = pred_mass + Tensor(target_mass) + smooth
    dice_per_class = 1.0 - num / den
    presentf = Tensor(present.astype(dt))
    dice = (dice_per_class * presentf).sum() * (1.0 / int(present.sum()))

    total = ce * ce_weight + dice * dice_weight
    return LossParts(total=total, ce=float(ce.data), dice=float(dice.data),
                     all_ignored=False)
