"""Synthetic depth-ambiguous scenes and pseudo-depth estimator emulation.

Scenes are rectangles and discs over a background plane, painted far to
near so nearer objects occlude.  The class of an object is the pair (shape
kind, depth bucket); all buckets of a shape share one base colour and each
object adds a colour jitter much larger than the per-class tint, so RGB
alone cannot separate the buckets and depth is the deciding cue.

Pseudo-depth estimators are emulated by perturbation profiles (affine
error, box blur, noise, quantization, edge erosion, speckle, holes) plus a
per-sample failure mode that replaces blob-shaped regions of the map with
mostly-inverted depth, the way monocular estimators flip depth ordering on
reflective or textureless surfaces.  Regional rather than whole-map
corruption is what gives per-pixel attention something to detect: a failed
map remains locally trustworthy outside its blobs, and inverted content is
visible as cross-map disagreement where averaging would just cancel it
into a flat, misleading plane.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from .tensor import ConfigError, DimensionError, Tensor, bilinear_matrix
from .pdam import PseudoDepthSet
from . import fileio

__all__ = [
    "SceneConfig", "PerturbProfile", "ObjectSpec", "SegSample",
    "DEFAULT_PROFILES", "default_profiles",
    "gen_scene", "paint_scene", "perturb_depth",
    "build_dataset", "load_manifest",
    "resize_plane", "resize_chw", "resize_labels",
]


@dataclass(frozen=True)
class SceneConfig:
    """Geometry and appearance knobs for generated scenes."""

    image_size: int = 64
    num_classes: int = 6
    objects_min: int = 5
    objects_max: int = 9
    texture_noise: float = 0.05
    color_jitter: float = 0.15
    color_tint: float = 0.03
    seed: int = 0

    def validate(self) -> None:
        if self.image_size < 16 or self.image_size % 8:
            raise ConfigError("image_size must be a multiple of 8 and >= 16")
        if self.num_classes < 2:
            raise ConfigError("need at least two classes (background + 1)")
        if not 1 <= self.objects_min <= self.objects_max:
            raise ConfigError("need 1 <= objects_min <= objects_max")
        if self.texture_noise < 0 or self.color_jitter < 0 or self.color_tint < 0:
            raise ConfigError("noise amplitudes must be >= 0")


@dataclass(frozen=True)
class PerturbProfile:
    """One emulated estimator: deterministic given (gt depth, seed)."""

    name: str
    scale: float = 1.0
    shift: float = 0.0
    blur_radius: int = 0
    noise_sigma: float = 0.0
    quant_levels: int = 0
    erosion_width: int = 0
    speckle_sigma: float = 0.0
    hole_rate: float = 0.0
    hole_radius: int = 2
    failure_rate: float = 0.0
    failure_mix: float = 0.0
    failure_coverage: float = 0.75

    def validate(self) -> None:
        if self.scale <= 0:
            raise ConfigError("profile scale must be > 0")
        if min(self.noise_sigma, self.speckle_sigma, self.hole_rate) < 0:
            raise ConfigError("profile noise amplitudes must be >= 0")
        if self.blur_radius < 0 or self.erosion_width < 0 or self.hole_radius < 1:
            raise ConfigError("profile extents must be non-negative")
        if self.quant_levels and self.quant_levels < 2:
            raise ConfigError("quant_levels must be 0 (off) or >= 2")
        if not 0 <= self.failure_rate <= 1 or not 0 <= self.failure_mix <= 1:
            raise ConfigError("failure_rate and failure_mix must lie in [0, 1]")
        if not 0 < self.failure_coverage <= 1:
            raise ConfigError("failure_coverage must lie in (0, 1]")


def default_profiles() -> dict:
    return {
        "sharp": PerturbProfile("sharp", blur_radius=1, noise_sigma=0.03,
                                failure_rate=0.6),
        "smooth": PerturbProfile("smooth", blur_radius=5, shift=0.05,
                                 noise_sigma=0.01, failure_rate=0.6),
        "quantized": PerturbProfile("quantized", blur_radius=2, scale=0.9,
                                    noise_sigma=0.02, quant_levels=16,
                                    failure_rate=0.6),
        "sensor": PerturbProfile("sensor", blur_radius=1, noise_sigma=0.02,
                                 speckle_sigma=0.10, hole_rate=0.0015,
                                 hole_radius=3, erosion_width=1),
    }


DEFAULT_PROFILES = default_profiles()

PSEUDO_PROFILE_NAMES = ("sharp", "smooth", "quantized")

_BG_COLOR = np.array([0.45, 0.45, 0.42])
_SHAPE_COLORS = {"rect": np.array([0.60, 0.40, 0.32]),
                 "disc": np.array([0.34, 0.48, 0.60])}
_DEPTH_LO, _DEPTH_HI = 0.10, 0.85
_BUCKET_MARGIN = 0.02


@dataclass(frozen=True)
class ObjectSpec:
    kind: str            # rect | disc
    cls: int
    depth: float
    cy: int
    cx: int
    ry: int              # disc uses ry as its radius
    rx: int
    color: tuple


def class_layout(num_classes: int) -> list:
    """(kind, bucket_lo, bucket_hi) per object class id 1..K-1.

    Rectangles take the first ceil((K-1)/2) classes, discs the rest; each
    shape's buckets partition the same global depth range.
    """
    n_obj = num_classes - 1
    n_rect = (n_obj + 1) // 2
    n_disc = n_obj - n_rect
    layout = []
    for kind, count in (("rect", n_rect), ("disc", n_disc)):
        if count == 0:
            continue
        edges = np.linspace(_DEPTH_LO, _DEPTH_HI, count + 1)
        for i in range(count):
            layout.append((kind, float(edges[i] + _BUCKET_MARGIN),
                           float(edges[i + 1] - _BUCKET_MARGIN)))
    return layout


def _class_tint(cls: int, amount: float) -> np.ndarray:
    rng = np.random.default_rng(10_000 + cls)
    return rng.uniform(-amount, amount, size=3)


@dataclass
class SegSample:
    """One scene: image, truth, and any number of pseudo-depth maps."""

    rgb: np.ndarray                      # (1, 3, h, w) float32 in [0, 1]
    gt_depth: np.ndarray                 # (1, 1, h, w) float32 in [0, 1]
    labels: np.ndarray                   # (h, w) int32, 255 = ignore
    pd: dict = field(default_factory=dict)          # name -> (1, 3, h, w)
    degenerate: dict = field(default_factory=dict)  # name -> bool

    def to_pd_set(self, names) -> PseudoDepthSet:
        missing = [n for n in names if n not in self.pd]
        if missing:
            raise ConfigError(f"sample lacks pseudo-depth maps {missing}")
        return PseudoDepthSet(maps=[Tensor(self.pd[n]) for n in names],
                              source_tags=list(names))


def paint_scene(config: SceneConfig, objects) -> SegSample:
    """Rasterize objects far-to-near over the background plane."""
    config.validate()
    s = config.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    labels = np.zeros((s, s), dtype=np.int32)
    depth = (0.90 + 0.08 * (yy / max(s - 1, 1))).astype(np.float64)
    rgb = np.empty((s, s, 3), dtype=np.float64)
    rgb[:] = _BG_COLOR
    for ob in sorted(objects, key=lambda o: -o.depth):
        if ob.kind == "rect":
            mask = ((np.abs(yy - ob.cy) <= ob.ry) & (np.abs(xx - ob.cx) <= ob.rx))
        elif ob.kind == "disc":
            mask = ((yy - ob.cy) ** 2 + (xx - ob.cx) ** 2) <= ob.ry ** 2
        else:
            raise ConfigError(f"unknown object kind {ob.kind!r}")
        labels[mask] = ob.cls
        depth[mask] = ob.depth
        rgb[mask] = np.asarray(ob.color)
    return SegSample(
        rgb=np.clip(rgb, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)[None],
        gt_depth=depth.astype(np.float32)[None, None],
        labels=labels,
    )


def gen_scene(config: SceneConfig, index: int, profiles=()) -> SegSample:
    """Scene number ``index`` under the config seed, with pseudo-depth maps
    for each requested profile."""
    config.validate()
    rng = np.random.default_rng([config.seed, index])
    layout = class_layout(config.num_classes)
    s = config.image_size
    n_obj = int(rng.integers(config.objects_min, config.objects_max + 1))
    objects = []
    for _ in range(n_obj):
        cls = int(rng.integers(1, config.num_classes))
        kind, lo, hi = layout[cls - 1]
        depth = float(rng.uniform(lo, hi))
        if kind == "rect":
            ry, rx = [int(r) for r in rng.integers(7, 16, size=2)]
        else:
            # discs need a larger radius range than rect half-extents to
            # carry comparable pixel mass per class
            ry = rx = int(rng.integers(8, 15))
        margin = 3
        cy = int(rng.integers(margin, s - margin))
        cx = int(rng.integers(margin, s - margin))
        base = _SHAPE_COLORS[kind] + _class_tint(cls, config.color_tint)
        color = tuple(np.clip(base + rng.uniform(
            -config.color_jitter, config.color_jitter, size=3), 0.02, 0.98))
        objects.append(ObjectSpec(kind=kind, cls=cls, depth=depth, cy=cy,
                                  cx=cx, ry=ry, rx=rx, color=color))
    sample = paint_scene(config, objects)
    noisy = sample.rgb[0].transpose(1, 2, 0) + rng.normal(
        0.0, config.texture_noise, size=(s, s, 3))
    sample.rgb = np.clip(noisy, 0.0, 1.0).astype(np.float32).transpose(2, 0, 1)[None]
    for i, prof in enumerate(profiles):
        pd, degenerate = perturb_depth(
            sample.gt_depth[0, 0], prof, [config.seed, index, 7000 + i])
        sample.pd[prof.name] = pd
        sample.degenerate[prof.name] = degenerate
    return sample


def perturb_depth(gt_depth: np.ndarray, profile: PerturbProfile, seed):
    """Emulate one estimator; returns ((1, 3, h, w) float32, degenerate).

    Stage order: regional failure swap, affine, box blur, additive noise,
    speckle, quantization, edge erosion, holes, min-max normalization,
    3-channel replication.  A flat map (range < 1e-9) normalizes to all
    0.5 and is flagged degenerate instead of dividing by zero.
    """
    profile.validate()
    d = np.asarray(gt_depth, dtype=np.float64)
    if d.ndim != 2:
        raise DimensionError(f"expected an (h, w) depth plane, got {d.shape}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if profile.failure_rate > 0 and rng.random() < profile.failure_rate:
        field_ = ndimage.uniform_filter(
            rng.standard_normal(d.shape), size=13, mode="reflect")
        flo, fhi = field_.min(), field_.max()
        if fhi - flo > 1e-12:
            field_ = (field_ - flo) / (fhi - flo)
        field_ = d.min() + field_ * (d.max() - d.min())
        # corruption is regional: a smooth blob mask covers roughly
        # failure_coverage of the plane and ramps to 1 inside, so failed
        # maps stay locally trustworthy outside the blobs
        raw = ndimage.uniform_filter(
            rng.standard_normal(d.shape), size=max(min(d.shape) // 5, 7),
            mode="reflect")
        cut = float(np.quantile(raw, 1.0 - profile.failure_coverage))
        soft = 0.5 * float(raw.std()) + 1e-12
        mask = np.clip((raw - cut) / soft, 0.0, 1.0)
        # failed content anti-correlates with truth (ordinal inversion,
        # as when an estimator flips depth ordering on reflective or
        # textureless surfaces); the field term keeps two simultaneously
        # failed maps from agreeing with each other
        inverted = d.min() + d.max() - d
        garbage = 0.7 * inverted + 0.3 * field_
        corrupted = profile.failure_mix * d + (1.0 - profile.failure_mix) * garbage
        d = (1.0 - mask) * d + mask * corrupted
    d = profile.scale * d + profile.shift
    if profile.blur_radius:
        d = ndimage.uniform_filter(d, size=2 * profile.blur_radius + 1,
                                   mode="nearest")
    if profile.noise_sigma:
        d = d + rng.normal(0.0, profile.noise_sigma, size=d.shape)
    if profile.speckle_sigma:
        d = d * (1.0 + rng.normal(0.0, profile.speckle_sigma, size=d.shape))
    if profile.quant_levels:
        lo, hi = d.min(), d.max()
        if hi - lo > 1e-12:
            q = profile.quant_levels - 1
            d = lo + np.round((d - lo) / (hi - lo) * q) * (hi - lo) / q
    if profile.erosion_width:
        d = ndimage.maximum_filter(d, size=2 * profile.erosion_width + 1,
                                   mode="nearest")
    if profile.hole_rate:
        n_holes = int(round(profile.hole_rate * d.size))
        if n_holes:
            h, w = d.shape
            yy, xx = np.mgrid[0:h, 0:w]
            for _ in range(n_holes):
                cy = int(rng.integers(0, h))
                cx = int(rng.integers(0, w))
                hole = ((yy - cy) ** 2 + (xx - cx) ** 2) <= profile.hole_radius ** 2
                d[hole] = 0.0
    lo, hi = d.min(), d.max()
    degenerate = bool(hi - lo < 1e-9)
    if degenerate:
        d = np.full_like(d, 0.5)
    else:
        d = (d - lo) / (hi - lo)
    pd = np.broadcast_to(d.astype(np.float32), (1, 3) + d.shape).copy()
    return pd, degenerate


# resizing helpers (numpy, used by augmentation and multi-scale inference) ----


def resize_plane(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of an (h0, w0) plane (half-pixel centres)."""
    arr = np.asarray(arr)
    if arr.shape == (h, w):
        return arr
    dt = arr.dtype if arr.dtype in (np.float32, np.float64) else np.float32
    mr = bilinear_matrix(h, arr.shape[0], dt)
    mc = bilinear_matrix(w, arr.shape[1], dt)
    return (mr @ arr.astype(dt) @ mc.T).astype(dt)


def resize_chw(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    """Bilinear resize of (..., c, h0, w0) over the trailing two axes."""
    arr = np.asarray(arr)
    if arr.shape[-2:] == (h, w):
        return arr
    lead = arr.shape[:-2]
    flat = arr.reshape((-1,) + arr.shape[-2:])
    out = np.stack([resize_plane(p, h, w) for p in flat])
    return out.reshape(lead + (h, w))


def resize_labels(labels: np.ndarray, h: int, w: int) -> np.ndarray:
    """Nearest-neighbour resize for integer label maps."""
    labels = np.asarray(labels)
    if labels.shape == (h, w):
        return labels
    h0, w0 = labels.shape
    ri = np.clip(np.floor((np.arange(h) + 0.5) * (h0 / h)), 0, h0 - 1).astype(np.int64)
    ci = np.clip(np.floor((np.arange(w) + 0.5) * (w0 / w)), 0, w0 - 1).astype(np.int64)
    return labels[ri[:, None], ci[None, :]]


# dataset on disk -------------------------------------------------------------


def build_dataset(out_dir, config: SceneConfig, n_train: int, n_test: int,
                  profiles=None) -> str:
    """Write scenes plus pseudo-depth maps and a manifest; returns the
    manifest path.

    Train scenes use indices [0, n_train) and test scenes indices offset by
    100000, so the two splits never share a scene RNG stream.
    """
    if profiles is None:
        profiles = list(default_profiles().values())
    profiles = list(profiles)
    if n_train < 1 or n_test < 0:
        raise ConfigError("need n_train >= 1 and n_test >= 0")
    os.makedirs(out_dir, exist_ok=True)
    lines = []
    jobs = [("train", i, i) for i in range(n_train)]
    jobs += [("test", j, 100_000 + j) for j in range(n_test)]
    for split, num, index in jobs:
        sample = gen_scene(config, index, profiles)
        stem = f"{split}_{num:05d}"
        rgb_name = f"{stem}_rgb.pfm"
        lab_name = f"{stem}_labels.pgm"
        dep_name = f"{stem}_depth.pfm"
        fileio.write_pfm(os.path.join(out_dir, rgb_name),
                         sample.rgb[0].transpose(1, 2, 0))
        fileio.write_pgm16(os.path.join(out_dir, lab_name),
                           sample.labels.astype(np.uint16))
        fileio.write_pfm(os.path.join(out_dir, dep_name), sample.gt_depth[0, 0])
        pd_names = []
        for prof in profiles:
            pd_name = f"{stem}_pd_{prof.name}.pfm"
            fileio.write_pfm(os.path.join(out_dir, pd_name),
                             sample.pd[prof.name][0, 0])
            pd_names.append(pd_name)
        lines.append(" ".join([rgb_name, lab_name, dep_name] + pd_names))
    manifest = os.path.join(out_dir, "manifest.txt")
    with open(manifest, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")
    return manifest


def _profile_tag(pd_path: str) -> str:
    base = os.path.basename(pd_path)
    mark = "_pd_"
    pos = base.find(mark)
    if pos < 0 or not base.endswith(".pfm"):
        raise ConfigError(f"cannot infer profile name from {pd_path!r}")
    return base[pos + len(mark):-4]


def load_manifest(manifest_path):
    """Read a dataset back; returns (train_samples, test_samples).

    Split membership comes from the file name prefix (train_/test_).
    """
    root = os.path.dirname(os.path.abspath(manifest_path))
    train, test = [], []
    with open(manifest_path, "r", encoding="ascii") as f:
        rows = [ln.split() for ln in f.read().splitlines() if ln.strip()]
    for row in rows:
        if len(row) < 3:
            raise ConfigError(f"manifest row too short: {row}")
        rgb = fileio.read_pfm(os.path.join(root, row[0]))
        if rgb.ndim != 3:
            raise ConfigError(f"{row[0]} is not a 3-channel PFM")
        labels = fileio.read_pgm16(os.path.join(root, row[1])).astype(np.int32)
        depth = fileio.read_pfm(os.path.join(root, row[2]))
        sample = SegSample(
            rgb=np.ascontiguousarray(rgb.transpose(2, 0, 1))[None],
            gt_depth=depth[None, None],
            labels=labels,
        )
        for pd_path in row[3:]:
            plane = fileio.read_pfm(os.path.join(root, pd_path))
            if plane.ndim != 2:
                raise ConfigError(f"{pd_path} is not a single-channel PFM")
            sample.pd[_profile_tag(pd_path)] = np.broadcast_to(
                plane, (1, 3) + plane.shape).copy()
        base = os.path.basename(row[0])
        if base.startswith("train_"):
            train.append(sample)
        elif base.startswith("test_"):
            test.append(sample)
        else:
            raise ConfigError(f"cannot infer split of {row[0]!r}")
    return train, test
