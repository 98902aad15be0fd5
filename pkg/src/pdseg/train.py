"""Training loop, augmentation, and evaluation for the fusion segmenter."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from .tensor import ConfigError, NumericError, Tensor, no_grad
from .segnet import FusionSpec, SegModel, seg_loss, softmax_probs
from .optim import AdamW
from .metrics import ConfusionMatrix, Scores
from .data import SegSample, resize_chw, resize_labels
from .pdam import PseudoDepthSet
from . import fileio

__all__ = ["TrainConfig", "TrainResult", "train", "evaluate", "predict_labels",
           "profiles_for", "rebuild_from_checkpoint", "MULTISCALE_SCALES"]

MULTISCALE_SCALES = (0.75, 1.0, 1.25)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a run needs; mirrored one-to-one by the train CLI flags."""

    iterations: int = 2000
    batch_size: int = 1
    lr_backbone: float = 1e-3
    lr_rest: float = 2e-3
    weight_decay: float = 0.05
    lr_decay_step: int = 0          # 0 means the default 2/3 of iterations
    lr_decay_factor: float = 0.1
    seed: int = 0
    fusion_mode: str = "structured"  # rgb_only | gaussian | structured | manual
    pd_source: str = "pdam"          # none | single | addition | pdam
    pd_profile: str = "sharp"        # map used when pd_source == single
    t: tuple = (0,)
    w_rgb: float = 0.95
    w_pd: float = 0.05
    lambda_c: float = 0.5
    lambda_s: float = 0.5
    base_width: int = 32
    crop_size: int = 64
    augment: bool = True
    ce_weight: float = 1.0
    dice_weight: float = 1.0
    eval_interval: int = 500

    def validate(self) -> None:
        if self.iterations < 1 or self.batch_size < 1:
            raise ConfigError("iterations and batch_size must be >= 1")
        if min(self.lr_backbone, self.lr_rest, self.weight_decay) < 0:
            raise ConfigError("rates must be >= 0")
        if not 0 < self.lr_decay_factor <= 1:
            raise ConfigError("lr_decay_factor must lie in (0, 1]")
        if self.crop_size % 8 or self.crop_size < 16:
            raise ConfigError("crop_size must be a multiple of 8 and >= 16")
        if self.eval_interval < 1:
            raise ConfigError("eval_interval must be >= 1")

    def fusion_spec(self) -> FusionSpec:
        return FusionSpec(fusion_mode=self.fusion_mode, pd_source=self.pd_source,
                          t=tuple(int(x) for x in self.t),
                          w_rgb=self.w_rgb, w_pd=self.w_pd)

    @property
    def decay_at(self) -> int:
        return self.lr_decay_step if self.lr_decay_step > 0 else (2 * self.iterations) // 3


def profiles_for(config: TrainConfig, available) -> list:
    """Which pseudo-depth maps a run consumes, in a stable order."""
    spec = config.fusion_spec()
    if not spec.needs_pd:
        return []
    if config.pd_source == "single":
        if config.pd_profile not in available:
            raise ConfigError(
                f"profile {config.pd_profile!r} not in dataset ({sorted(available)})")
        return [config.pd_profile]
    from .data import PSEUDO_PROFILE_NAMES
    names = [n for n in PSEUDO_PROFILE_NAMES if n in available]
    if not names:
        names = sorted(available)
    if not names:
        raise ConfigError("dataset has no pseudo-depth maps")
    return names


@dataclass
class TrainResult:
    model: SegModel
    trace: list                      # rows of (iteration, ce, dice, val_miou)
    skipped_steps: int
    aborted: bool
    final_scores: Scores | None
    num_classes: int
    pd_names: list

    def trace_csv(self) -> str:
        out = ["iteration,ce,dice,val_miou"]
        for it, ce, dice, miou in self.trace:
            out.append(f"{it},{ce:.6f},{dice:.6f},{miou:.6f}")
        return "\n".join(out) + "\n"


def _num_classes_of(samples) -> int:
    seen = 0
    for s in samples:
        lab = s.labels[s.labels != 255]
        if lab.size:
            seen = max(seen, int(lab.max()))
    return seen + 1


def augment_sample(sample: SegSample, pd_names, rng, crop: int):
    """Random scale (snapped to /8), crop or pad, horizontal flip, and RGB
    brightness jitter.  Draws a fixed number of RNG values regardless of
    branch so streams stay aligned."""
    h = sample.labels.shape[0]
    scale = rng.uniform(0.75, 1.25)
    new = max(8, int(round(h * scale / 8)) * 8)
    rgb = resize_chw(sample.rgb, new, new)
    pds = {n: resize_chw(sample.pd[n], new, new) for n in pd_names}
    labels = resize_labels(sample.labels, new, new)
    if new >= crop:
        oy = int(rng.integers(0, new - crop + 1))
        ox = int(rng.integers(0, new - crop + 1))
        rgb = rgb[:, :, oy:oy + crop, ox:ox + crop]
        pds = {n: p[:, :, oy:oy + crop, ox:ox + crop] for n, p in pds.items()}
        labels = labels[oy:oy + crop, ox:ox + crop]
    else:
        oy = int(rng.integers(0, crop - new + 1))
        ox = int(rng.integers(0, crop - new + 1))
        canvas_rgb = np.zeros((1, 3, crop, crop), dtype=np.float32)
        canvas_rgb[:, :, oy:oy + new, ox:ox + new] = rgb
        rgb = canvas_rgb
        padded = {}
        for n, p in pds.items():
            cv = np.zeros((1, 3, crop, crop), dtype=np.float32)
            cv[:, :, oy:oy + new, ox:ox + new] = p
            padded[n] = cv
        pds = padded
        canvas_lab = np.full((crop, crop), 255, dtype=np.int32)
        canvas_lab[oy:oy + new, ox:ox + new] = labels
        labels = canvas_lab
    if rng.random() < 0.5:
        rgb = rgb[:, :, :, ::-1].copy()
        pds = {n: p[:, :, :, ::-1].copy() for n, p in pds.items()}
        labels = labels[:, ::-1].copy()
    shiftv = rng.uniform(-0.1, 0.1)
    rgb = np.clip(rgb + np.float32(shiftv), 0.0, 1.0)
    return np.ascontiguousarray(rgb), pds, np.ascontiguousarray(labels)


def _pd_set_from(pds: dict, pd_names) -> PseudoDepthSet | None:
    if not pd_names:
        return None
    return PseudoDepthSet(maps=[Tensor(np.ascontiguousarray(pds[n])) for n in pd_names],
                          source_tags=list(pd_names))


def _snapshot(store) -> bytes:
    buf = io.BytesIO()
    buf.write(fileio._store_bytes(store.state_arrays()))
    return buf.getvalue()


def _restore(store, blob: bytes) -> None:
    store.load_arrays(dict(fileio._store_from(io.BytesIO(blob))))


def train(train_samples, test_samples, config: TrainConfig) -> TrainResult:
    """Deterministic training run; bitwise-identical outputs per config.

    A non-finite loss or gradient signal aborts the run and restores the
    last evaluated snapshot (NumericError ends the loop; non-finite
    gradients merely skip the step and are counted).
    """
    config.validate()
    if not train_samples:
        raise ConfigError("no training samples")
    rng = np.random.default_rng(config.seed)
    num_classes = max(_num_classes_of(train_samples), _num_classes_of(test_samples), 2)
    available = set(train_samples[0].pd)
    pd_names = profiles_for(config, available)
    spec = config.fusion_spec()
    model = SegModel.create(rng, num_classes, spec, num_maps=len(pd_names),
                            base=config.base_width, lambda_c=config.lambda_c,
                            lambda_s=config.lambda_s)
    store = model.build_store()

    def lr_for(name: str) -> float:
        if name.startswith(("unet.", "enc.")):
            return config.lr_backbone
        return config.lr_rest

    opt = AdamW(store, lr_for, weight_decay=config.weight_decay)
    noise_rng = np.random.default_rng([config.seed, 77])
    trace = []
    aborted = False
    last_good = _snapshot(store)
    ce_acc, dice_acc, acc_n = 0.0, 0.0, 0
    it = 0
    try:
        for it in range(1, config.iterations + 1):
            if it == config.decay_at:
                opt.lr_scale *= config.lr_decay_factor
            store.zero_grads()
            for _ in range(config.batch_size):
                idx = int(rng.integers(0, len(train_samples)))
                sample = train_samples[idx]
                if config.augment:
                    rgb, pds, labels = augment_sample(sample, pd_names, rng,
                                                      config.crop_size)
                else:
                    rgb, pds, labels = sample.rgb, sample.pd, sample.labels
                pd_set = _pd_set_from(pds, pd_names)
                logits = model.forward(Tensor(rgb), pd_set, noise_rng=noise_rng)
                parts = seg_loss(logits, labels, ce_weight=config.ce_weight,
                                 dice_weight=config.dice_weight)
                if not parts.all_ignored:
                    (parts.total * (1.0 / config.batch_size)).backward()
                ce_acc += parts.ce
                dice_acc += parts.dice
                acc_n += 1
            opt.step()
            if it % config.eval_interval == 0 or it == config.iterations:
                scores = evaluate(model, test_samples, pd_names) if test_samples else None
                miou = scores.mean_iou if scores else float("nan")
                trace.append((it, ce_acc / max(acc_n, 1),
                              dice_acc / max(acc_n, 1), miou))
                ce_acc, dice_acc, acc_n = 0.0, 0.0, 0
                last_good = _snapshot(store)
    except NumericError:
        aborted = True
        _restore(store, last_good)
    final = evaluate(model, test_samples, pd_names) if test_samples else None
    return TrainResult(model=model, trace=trace, skipped_steps=opt.skipped_steps,
                       aborted=aborted, final_scores=final,
                       num_classes=num_classes, pd_names=pd_names)


def rebuild_from_checkpoint(path):
    """Reconstruct (model, config, pd_names) from a saved checkpoint."""
    meta, arrays = fileio.load_checkpoint(path)
    raw = dict(meta.get("config") or {})
    if "t" in raw:
        raw["t"] = tuple(raw["t"])
    try:
        config = TrainConfig(**raw)
    except TypeError as e:
        raise ConfigError(f"checkpoint config does not match TrainConfig: {e}")
    pd_names = list(meta.get("pd_names") or [])
    num_classes = int(meta.get("num_classes") or 0)
    if num_classes < 2:
        raise ConfigError("checkpoint metadata lacks a valid num_classes")
    model = SegModel.create(np.random.default_rng(config.seed), num_classes,
                            config.fusion_spec(), num_maps=len(pd_names),
                            base=config.base_width, lambda_c=config.lambda_c,
                            lambda_s=config.lambda_s)
    store = model.build_store()
    store.load_arrays(arrays)
    return model, config, pd_names


def predict_labels(model: SegModel, sample: SegSample, pd_names,
                   multiscale: bool = False, scales=None, use_flip=None,
                   seed: int = 0) -> np.ndarray:
    """Argmax labels; multi-scale averages softmax over scaled and flipped
    passes resized back to native resolution.  ``scales``/``use_flip``
    override the presets (a {1.0}, no-flip override reproduces the
    single-scale path bit for bit)."""
    h, w = sample.labels.shape
    if scales is None:
        scales = MULTISCALE_SCALES if multiscale else (1.0,)
    if use_flip is None:
        use_flip = bool(multiscale)
    flips = (False, True) if use_flip else (False,)
    noise_rng = np.random.default_rng([seed, 55])
    acc = np.zeros((model.seg.num_classes, h, w), dtype=np.float64)
    with no_grad():
        for scale in scales:
            sh = max(8, int(round(h * scale / 8)) * 8)
            sw = max(8, int(round(w * scale / 8)) * 8)
            rgb = resize_chw(sample.rgb, sh, sw)
            pds = {n: resize_chw(sample.pd[n], sh, sw) for n in pd_names}
            for flip in flips:
                if flip:
                    frgb = np.ascontiguousarray(rgb[:, :, :, ::-1])
                    fpds = {n: np.ascontiguousarray(p[:, :, :, ::-1])
                            for n, p in pds.items()}
                else:
                    frgb, fpds = np.ascontiguousarray(rgb), pds
                pd_set = _pd_set_from(fpds, pd_names)
                logits = model.forward(Tensor(frgb), pd_set, noise_rng=noise_rng)
                probs = softmax_probs(logits.data)[0]
                if flip:
                    probs = probs[:, :, ::-1]
                acc += resize_chw(probs.astype(np.float64), h, w)
    return acc.argmax(axis=0).astype(np.int32)


def evaluate(model: SegModel, samples, pd_names, multiscale: bool = False) -> Scores:
    if not samples:
        raise ConfigError("no samples to evaluate")
    cm = ConfusionMatrix(model.seg.num_classes)
    for i, sample in enumerate(samples):
        pred = predict_labels(model, sample, pd_names, multiscale=multiscale, seed=i)
        cm.update(pred, sample.labels)
    return cm.scores()
