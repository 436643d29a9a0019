"""Training examples (patch + 16 corner targets), augmentation and the Adam loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .geometry import MIRROR_ORDER, PatchTransform, expand_rect, make_transform, tight_rect
from .imaging import GrayImage, blur_array, extract_patch
from .neural import AdamConfig, NetConfig, NetParams, adam_step, l2_loss, net_backward, net_forward
from .synth import ChainAnnotation

log = logging.getLogger(__name__)

PATCH_EXPANSION = 0.75
REFERENCE_PATCH = 224  # patch side the blur range is quoted for


@dataclass(frozen=True)
class AugmentConfig:
    translate_px: int = 10
    expand_range: tuple[float, float] = (0.60, 0.90)
    flip_prob: float = 0.5
    blur_sigma_range: tuple[float, float] = (3.0, 30.0)
    seed: int = 0

    def __post_init__(self):
        if self.translate_px < 0:
            raise ValueError("translate_px must be >= 0")
        for lo, hi in (self.expand_range, self.blur_sigma_range):
            if lo > hi or lo < 0:
                raise ValueError("ranges must be ordered and non-negative")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ValueError("flip_prob must lie in [0, 1]")


@dataclass
class TrainExample:
    patch: np.ndarray  # (S, S) float64
    target: np.ndarray  # (16,) central TL,TR,BR,BL then upper, x/y interleaved, patch frame
    transform: PatchTransform
    flipped: bool = False
    blur_sigma: float = 0.0


def quad_pair_targets(t: PatchTransform, central, upper) -> np.ndarray:
    pts = np.concatenate([central.array(), upper.array()])
    return t.points_to_patch(pts).reshape(-1)


def mirror_targets(target: np.ndarray, size: float) -> np.ndarray:
    """Reflect 16-vector targets about the vertical patch axis and restore corner order."""
    pts = np.asarray(target, dtype=float).reshape(2, 4, 2).copy()
    pts[..., 0] = size - pts[..., 0]
    return pts[:, list(MIRROR_ORDER), :].reshape(-1)


def make_example(
    img: GrayImage,
    ann: ChainAnnotation,
    index: int,
    aug: AugmentConfig | None = None,
    out_size: int = 224,
    rng: np.random.Generator | None = None,
) -> TrainExample:
    """Patch centred on instance ``index`` with targets for it and the instance above."""
    if not 0 <= index < len(ann) - 1:
        raise IndexError(f"instance {index} needs an instance above it (chain has {len(ann)})")
    central, upper = ann.quads[index], ann.quads[index + 1]
    rect = tight_rect(central)
    if aug is None:
        crop = expand_rect(rect, PATCH_EXPANSION)
    else:
        if rng is None:
            rng = np.random.default_rng(aug.seed)
        crop = expand_rect(rect, rng.uniform(*aug.expand_range, size=4))
        if aug.translate_px:
            dx, dy = rng.integers(-aug.translate_px, aug.translate_px + 1, size=2)
            crop = crop.translated(float(dx), float(dy))
    t = make_transform(crop, out_size)
    patch = extract_patch(img, t)
    target = quad_pair_targets(t, central, upper)
    flipped, sigma = False, 0.0
    if aug is not None:
        if rng.random() < aug.flip_prob:
            patch = patch[:, ::-1].copy()
            target = mirror_targets(target, out_size)
            flipped = True
        lo, hi = aug.blur_sigma_range
        scale = out_size / REFERENCE_PATCH
        sigma = float(rng.uniform(lo, hi)) * scale
        if sigma > 0:
            patch = blur_array(patch, sigma)
    return TrainExample(patch, target, t, flipped, sigma)


def example_index(samples: Sequence) -> list[tuple[int, int]]:
    """All (sample, instance) pairs that have an instance above them."""
    return [(s, i) for s, smp in enumerate(samples) for i in range(len(_ann(smp)) - 1)]


def _img(smp) -> GrayImage:
    return smp.image if hasattr(smp, "image") else smp[0]


def _ann(smp) -> ChainAnnotation:
    return smp.annotation if hasattr(smp, "annotation") else smp[1]


def build_batch(samples, pairs, out_size, aug=None, seed=0, epoch=0, dtype=np.float32):
    xs = np.empty((len(pairs), 1, out_size, out_size), dtype=dtype)
    ys = np.empty((len(pairs), 16), dtype=dtype)
    for k, (s, i) in enumerate(pairs):
        # one generator per (seed, epoch, sample, instance): order-independent draws
        rng = np.random.default_rng([seed, epoch, s, i]) if aug is not None else None
        ex = make_example(_img(samples[s]), _ann(samples[s]), i, aug, out_size, rng)
        xs[k, 0] = ex.patch
        ys[k] = ex.target
    return xs, ys


def mean_target(samples, out_size) -> np.ndarray:
    pairs = example_index(samples)
    _, ys = build_batch(samples, pairs, out_size, dtype=np.float64)
    return ys.mean(axis=0)


class TrainingDiverged(FloatingPointError):
    def __init__(self, msg, history):
        super().__init__(msg)
        self.history = history


@dataclass
class TrainResult:
    params: NetParams
    history: list[tuple[int, float, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = math.inf


def evaluate_loss(cfg: NetConfig, params: NetParams, xs, ys, batch_size=128) -> float:
    total = 0.0
    for b in range(0, len(xs), batch_size):
        out, _ = net_forward(cfg, params, xs[b : b + batch_size], mode="eval")
        total += float(np.sum((out.astype(np.float64) - ys[b : b + batch_size]) ** 2))
    return total / len(xs)


def train_step(cfg: NetConfig, params: NetParams, xs, ys, adam: AdamConfig) -> float:
    out, cache = net_forward(cfg, params, xs, mode="train")
    loss, dout = l2_loss(out, ys)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite loss {loss}")
    grads, _ = net_backward(cfg, cache, dout)
    adam_step(params, grads, adam)
    return loss


def train(
    cfg: NetConfig,
    params: NetParams,
    train_set: Sequence,
    val_set: Sequence,
    adam: AdamConfig = AdamConfig(),
    batch_size: int = 32,
    max_epochs: int = 50,
    patience: int = 5,
    aug: AugmentConfig | None = AugmentConfig(),
    seed: int = 0,
    init_output_bias: bool = True,
    min_rel_improvement: float = 1e-3,
    progress=None,
) -> TrainResult:
    """Mini-batch Adam on the L2 corner loss with early stopping.

    ``train_set``/``val_set`` hold objects with ``image`` and ``annotation``
    attributes (or ``(image, annotation)`` tuples). Training stops once the
    validation loss has not improved by ``min_rel_improvement`` (relative)
    for ``patience`` epochs; the parameters with the lowest validation loss
    are returned.
    """
    if not train_set or not val_set:
        raise ValueError("train and validation sets must be non-empty")
    params = params.copy()
    result = TrainResult(params.copy())
    if max_epochs <= 0:
        return result
    S = cfg.input_size
    last = f"fc{len(cfg.fc_sizes) - 1}.b"
    if init_output_bias and params.step == 0:
        params.tensors[last] = mean_target(train_set, S).astype(params.dtype)
    pairs = example_index(train_set)
    vx, vy = build_batch(val_set, example_index(val_set), S, dtype=np.float32)
    best_val = evaluate_loss(cfg, params, vx, vy)
    result.params, result.best_val, result.best_epoch = params.copy(), best_val, 0
    ref_val, bad = math.inf, 0
    for epoch in range(1, max_epochs + 1):
        order = np.random.default_rng([seed, epoch]).permutation(len(pairs))
        losses = []
        for b in range(0, len(order), batch_size):
            batch = [pairs[k] for k in order[b : b + batch_size]]
            if len(batch) < 2 and len(order) > 1:
                continue
            xs, ys = build_batch(train_set, batch, S, aug, seed, epoch)
            try:
                losses.append(train_step(cfg, params, xs, ys, adam))
            except FloatingPointError as e:
                raise TrainingDiverged(f"epoch {epoch}: {e}", result.history) from e
        train_loss = float(np.mean(losses))
        val = evaluate_loss(cfg, params, vx, vy)
        if not math.isfinite(val):
            raise TrainingDiverged(f"epoch {epoch}: non-finite validation loss", result.history)
        result.history.append((epoch, train_loss, val))
        log.info("epoch %d train %.3f val %.3f", epoch, train_loss, val)
        if progress is not None:
            progress(epoch, train_loss, val)
        if val < result.best_val:
            result.params, result.best_val, result.best_epoch = params.copy(), val, epoch
        if val < ref_val * (1.0 - min_rel_improvement):
            ref_val, bad = val, 0
        else:
            bad += 1
            if bad >= patience:
                break
    return result


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss"])
        for epoch, tr, va in history:
            w.writerow([epoch, repr(float(tr)), repr(float(va))])
