"""Synthetic chains of repetitive structures with exact ground-truth quads.

A chain is a stack of bright rounded rectangles running bottom to top along
a gently curving path, each one a little smaller than the one below it, on
a dark, noisy, unevenly lit background. Instance 0 is the bottom (seed)
instance.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .geometry import GeometryError, Point2, Quad, centroid, intersection_area
from .imaging import GrayImage


@dataclass(frozen=True)
class ChainSpec:
    count: int = 7
    base_size: float = 24.0  # height of the bottom instance, pixels
    shrink: float = 0.97
    gap: float = 0.3  # spacing between instances, as a fraction of body height
    curve_amplitude: float = 6.0
    curve_period: float = 18.0  # instances per full sine period
    rotation_jitter: float = 3.0  # degrees, uniform +-
    intensity_mean: float = 0.7
    intensity_std: float = 0.05
    noise_std: float = 0.04
    seed: int = 0
    aspect: float = 1.5  # body width / height
    image_width: int = 128
    image_height: int = 256
    margin: float = 8.0

    def validate(self) -> None:
        if self.count < 2:
            raise ValueError("a chain needs count >= 2")
        if not (0.0 < self.shrink <= 1.0):
            raise ValueError("shrink must lie in (0, 1]")
        if min(self.curve_amplitude, self.rotation_jitter, self.intensity_std, self.noise_std, self.gap) < 0:
            raise ValueError("jitters, noise and gap must be >= 0")
        if self.base_size <= 0 or self.aspect <= 0 or self.curve_period <= 0:
            raise ValueError("sizes and period must be positive")


@dataclass(frozen=True)
class ChainAnnotation:
    quads: tuple[Quad, ...]
    labels: tuple[str, ...]

    def __post_init__(self):
        if len(self.quads) != len(self.labels):
            raise ValueError("one label per quad")

    def __len__(self):
        return len(self.quads)

    def to_json(self, image_name: str) -> dict:
        return {
            "image": image_name,
            "quads": [[[p.x, p.y] for p in q.corners] for q in self.quads],
            "labels": list(self.labels),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ChainAnnotation":
        quads = tuple(Quad.from_array(q) for q in doc["quads"])
        labels = tuple(doc.get("labels") or [f"V{i}" for i in range(len(quads))])
        return cls(quads, labels)


PRESETS = {
    "lumbar-like": ChainSpec(count=7, image_height=256),
    "wholespine-like": ChainSpec(count=23, image_height=608),
}

# Per-image parameter ranges used when building datasets; (lo, hi) uniform.
DEFAULT_RANGES = {
    "base_size": (20.0, 28.0),
    "shrink": (0.96, 0.985),
    "gap": (0.25, 0.4),
    "curve_amplitude": (0.0, 10.0),
    "curve_period": (12.0, 30.0),
    "rotation_jitter": (0.0, 4.0),
    "intensity_mean": (0.55, 0.8),
    "noise_std": (0.02, 0.06),
    "aspect": (1.3, 1.7),
}


def _layout(spec: ChainSpec, rng: np.random.Generator) -> list[Quad]:
    heights = spec.base_size * spec.shrink ** np.arange(spec.count)
    widths = spec.aspect * heights
    phase = rng.uniform(0.0, 2.0 * math.pi)
    ys = np.empty(spec.count)
    ys[0] = spec.image_height - spec.margin - 0.5 * heights[0]
    for i in range(1, spec.count):
        step = 0.5 * heights[i - 1] + 0.5 * heights[i] + spec.gap * 0.5 * (heights[i - 1] + heights[i])
        ys[i] = ys[i - 1] - step
    k = 2.0 * math.pi / spec.curve_period
    idx = np.arange(spec.count)
    xs = 0.5 * spec.image_width + spec.curve_amplitude * np.sin(k * idx + phase)
    jitter = rng.uniform(-spec.rotation_jitter, spec.rotation_jitter, spec.count)
    quads = []
    for i in range(spec.count):
        # follow the local slope of the path, plus jitter
        dx = spec.curve_amplitude * k * math.cos(k * i + phase)
        dy = heights[i] * (1.0 + spec.gap)
        theta = math.atan2(dx, dy) + math.radians(jitter[i])
        up = np.array([math.sin(theta), -math.cos(theta)])
        right = np.array([math.cos(theta), math.sin(theta)])
        c = np.array([xs[i], ys[i]])
        hu, hr = 0.5 * heights[i] * up, 0.5 * widths[i] * right
        pts = [c + hu - hr, c + hu + hr, c - hu + hr, c - hu - hr]
        quads.append(Quad(tuple(Point2(*p) for p in pts)))
    return quads


def _check_fit(spec: ChainSpec, quads: list[Quad]) -> None:
    pts = np.concatenate([q.array() for q in quads])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    if lo[0] < 0 or lo[1] < 0 or hi[0] > spec.image_width or hi[1] > spec.image_height:
        raise GeometryError(
            f"chain of {spec.count} does not fit in {spec.image_width}x{spec.image_height} "
            f"(extent x {lo[0]:.1f}..{hi[0]:.1f}, y {lo[1]:.1f}..{hi[1]:.1f})"
        )
    for a, b in zip(quads, quads[1:]):
        if intersection_area(a, b) > 0.0:
            raise GeometryError("neighbouring instances overlap; increase gap or reduce jitter")


def required_height(spec: ChainSpec) -> int:
    """Smallest image height (multiple of 16) that holds the chain with margins."""
    h = spec.base_size * spec.shrink ** np.arange(spec.count)
    span = h.sum() + spec.gap * 0.5 * (h[:-1] + h[1:]).sum()
    # rotation adds a little vertical extent at the top
    span += 0.5 * h[-1] * spec.aspect * math.sin(math.radians(spec.rotation_jitter + 30.0))
    total = span + 2.0 * spec.margin
    return int(16 * math.ceil(total / 16.0))


def _render(spec: ChainSpec, quads: list[Quad], rng: np.random.Generator) -> np.ndarray:
    H, W = spec.image_height, spec.image_width
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    # background: dark level, random linear shading and a broad soft blob
    ang = rng.uniform(0.0, 2.0 * math.pi)
    ramp = (np.cos(ang) * (xx - W / 2) + np.sin(ang) * (yy - H / 2)) / max(H, W)
    blob_c = rng.uniform([0, 0], [W, H])
    blob_r = rng.uniform(0.3, 0.6) * max(H, W)
    blob = np.exp(-((xx - blob_c[0]) ** 2 + (yy - blob_c[1]) ** 2) / (2 * blob_r**2))
    img = 0.12 + 0.06 * ramp + 0.05 * blob
    for q in quads:
        level = float(np.clip(rng.normal(spec.intensity_mean, spec.intensity_std), 0.35, 0.95))
        a = q.array()
        c = a.mean(axis=0)
        right = (a[1] - a[0]) / np.linalg.norm(a[1] - a[0])
        up = (a[0] - a[3]) / np.linalg.norm(a[0] - a[3])
        hw = 0.5 * np.linalg.norm(a[1] - a[0])
        hh = 0.5 * np.linalg.norm(a[0] - a[3])
        rad = 0.2 * min(hw, hh)
        x0, y0 = np.floor(a.min(axis=0)).astype(int) - 2
        x1, y1 = np.ceil(a.max(axis=0)).astype(int) + 2
        x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, W), min(y1, H)
        px = xx[y0:y1, x0:x1] - c[0]
        py = yy[y0:y1, x0:x1] - c[1]
        lu = px * right[0] + py * right[1]
        lv = px * up[0] + py * up[1]
        # signed distance to a rounded rectangle in the instance's own frame
        qx = np.abs(lu) - (hw - rad)
        qy = np.abs(lv) - (hh - rad)
        d = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0)) + np.minimum(np.maximum(qx, qy), 0) - rad
        cover = np.clip(0.5 - d, 0.0, 1.0)
        # mild top-to-bottom shading inside the body
        body = level * (1.0 + 0.08 * lv / hh)
        patch = img[y0:y1, x0:x1]
        img[y0:y1, x0:x1] = patch + cover * (body - patch)
    img = img + rng.normal(0.0, spec.noise_std, img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_chain(spec: ChainSpec) -> tuple[GrayImage, ChainAnnotation]:
    """Render a chain image and its annotation; a pure function of ``spec``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    quads = _layout(spec, rng)
    _check_fit(spec, quads)
    ys = [centroid(q).y for q in quads]
    if any(b >= a for a, b in zip(ys, ys[1:])):
        raise GeometryError("instances are not ordered bottom to top")
    data = _render(spec, quads, rng)
    return GrayImage(data), ChainAnnotation(tuple(quads), tuple(f"V{i}" for i in range(spec.count)))


def sample_spec(base: ChainSpec, ranges: dict, rng: np.random.Generator, seed: int) -> ChainSpec:
    """Draw per-image parameters from ``ranges`` on top of ``base``; the image height is fitted to the chain."""
    vals = {}
    for key in sorted(ranges):
        lo, hi = ranges[key]
        vals[key] = float(rng.uniform(lo, hi))
    spec = replace(base, seed=int(seed), **vals)
    return replace(spec, image_height=max(base.image_height, required_height(spec)))


@dataclass
class Sample:
    name: str
    image: GrayImage
    annotation: ChainAnnotation
    spec: ChainSpec


def split_sizes(n: int, fractions) -> list[int]:
    """Largest-remainder split of ``n`` items by ``fractions``."""
    fr = np.asarray(fractions, dtype=float)
    if np.any(fr < 0) or not math.isclose(fr.sum(), 1.0, abs_tol=1e-9):
        raise ValueError("fractions must be non-negative and sum to 1")
    raw = fr * n
    sizes = np.floor(raw).astype(int)
    order = np.argsort(-(raw - sizes), kind="stable")
    for i in order[: n - sizes.sum()]:
        sizes[i] += 1
    return sizes.tolist()


def generate_dataset(n_images: int, base: ChainSpec, ranges: dict | None = None, seed: int = 0, prefix: str = "chain") -> list[Sample]:
    if n_images < 1:
        raise ValueError("refusing to build an empty dataset")
    ranges = DEFAULT_RANGES if ranges is None else ranges
    out = []
    for i in range(n_images):
        rng = np.random.default_rng([seed, i])
        spec = sample_spec(base, ranges, rng, seed=int(rng.integers(2**31)))
        img, ann = generate_chain(spec)
        out.append(Sample(f"{prefix}_{i:05d}", img, ann, spec))
    return out


def split_dataset(
    n_images: int,
    spec_ranges: dict | None = None,
    fractions=(0.8, 0.1, 0.1),
    seed: int = 0,
    base: ChainSpec | None = None,
) -> tuple[list[Sample], list[Sample], list[Sample]]:
    """Generate ``n_images`` chains and split them into train/val/test."""
    samples = generate_dataset(n_images, base or PRESETS["lumbar-like"], spec_ranges, seed)
    return split_samples(samples, fractions, seed)


def split_samples(samples: list, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    sizes = split_sizes(len(samples), fractions)
    perm = np.random.default_rng([seed, 7919]).permutation(len(samples))
    parts, start = [], 0
    for s in sizes:
        idx = sorted(perm[start : start + s])
        parts.append([samples[i] for i in idx])
        start += s
    return tuple(parts)


def write_annotation(path, ann: ChainAnnotation, image_name: str) -> None:
    Path(path).write_text(json.dumps(ann.to_json(image_name), indent=1) + "\n")


def read_annotation(path) -> tuple[ChainAnnotation, str]:
    doc = json.loads(Path(path).read_text())
    return ChainAnnotation.from_json(doc), doc.get("image", "")


def spec_to_dict(spec: ChainSpec) -> dict:
    return asdict(spec)
