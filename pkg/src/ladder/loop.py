"""The recurrent detection loop.

Each step crops a patch around the current proposal, asks a predictor for
the corners of the instance in the middle of the patch and of the instance
above it, keeps the first as a detection and feeds the second forward as
the next proposal.
"""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Protocol

import numpy as np

from .geometry import (
    GeometryError,
    PatchTransform,
    Quad,
    Rect,
    centroid,
    expand_rect,
    make_transform,
    tight_rect,
)
from .imaging import GrayImage, extract_patch
from .neural import NetConfig, NetParams, predict
from .synth import ChainAnnotation
from .training import PATCH_EXPANSION, quad_pair_targets

# S1 upward to C3: the 23 instances the whole-spine protocol walks through.
VERTEBRAE = (
    ["S1", "L5", "L4", "L3", "L2", "L1"]
    + [f"T{i}" for i in range(12, 0, -1)]
    + [f"C{i}" for i in range(7, 2, -1)]
)
LUMBAR_ITERATIONS = 6
WHOLE_SPINE_ITERATIONS = 23


class Predictor(Protocol):
    def __call__(self, patch: np.ndarray, transform: PatchTransform) -> np.ndarray: ...


class LadderError(RuntimeError):
    def __init__(self, msg: str, state: "LadderState | None" = None, iteration: int | None = None, trace=None):
        super().__init__(msg if iteration is None else f"iteration {iteration}: {msg}")
        self.state = state
        self.iteration = iteration
        self.trace = trace


@dataclass(frozen=True)
class LadderConfig:
    iterations: int = WHOLE_SPINE_ITERATIONS
    expansion: float = PATCH_EXPANSION
    patch_size: int = 224
    stop_hook: Optional[Callable[[np.ndarray, tuple[Quad, Quad]], bool]] = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class StepTrace:
    crop: Rect
    raw: np.ndarray
    detection: Quad | None = None
    proposal: Quad | None = None


@dataclass
class LadderState:
    current_proposal: Quad
    detections: list[Quad] = field(default_factory=list)
    iteration: int = 0
    trace: list[StepTrace] = field(default_factory=list)
    stopped_early: bool = False


def ladder_step(img: GrayImage, proposal: Quad, predictor: Predictor, cfg: LadderConfig):
    """One induction step; returns ``(detection, next_proposal, trace)``."""
    crop = expand_rect(tight_rect(proposal), cfg.expansion)
    t = make_transform(crop, cfg.patch_size)
    patch = extract_patch(img, t)
    raw = np.asarray(predictor(patch, t), dtype=np.float64).reshape(-1)
    trace = StepTrace(crop, raw)
    if raw.shape != (16,) or not np.all(np.isfinite(raw)):
        raise LadderError(f"predictor returned invalid output {raw!r}", trace=trace)
    pts = t.points_to_image(raw.reshape(8, 2))
    try:
        detection = Quad.from_array(pts[:4])
    except GeometryError as e:
        raise LadderError(f"degenerate detection: {e}", trace=trace) from e
    trace.detection = detection
    try:
        nxt = Quad.from_array(pts[4:])
    except GeometryError as e:
        raise LadderError(f"degenerate proposal: {e}", trace=trace) from e
    trace.proposal = nxt
    return detection, nxt, trace


def _outside(img: GrayImage, q: Quad) -> bool:
    r = tight_rect(q)
    return r.x1 <= 0 or r.y1 <= 0 or r.x0 >= img.width or r.y0 >= img.height


def run_ladder(img: GrayImage, seed: Quad, predictor: Predictor, cfg: LadderConfig) -> LadderState:
    """Iterate :func:`ladder_step` from ``seed``.

    Errors are raised as :class:`LadderError` with the partial state (and
    the detections made so far) attached.
    """
    state = LadderState(current_proposal=seed)
    for it in range(cfg.iterations):
        if _outside(img, state.current_proposal):
            raise LadderError("proposal lies entirely outside the image", state, it)
        try:
            det, nxt, tr = ladder_step(img, state.current_proposal, predictor, cfg)
        except LadderError as e:
            if e.trace is not None:
                state.trace.append(e.trace)
                if e.trace.detection is not None:
                    # only the proposal failed; the detection itself stands
                    state.detections.append(e.trace.detection)
                    state.iteration += 1
                    if it == cfg.iterations - 1:
                        return state
            raise LadderError(str(e), state, it, e.trace) from e
        state.detections.append(det)
        state.trace.append(tr)
        state.iteration += 1
        if cfg.stop_hook is not None and cfg.stop_hook(tr.raw, (det, nxt)):
            state.stopped_early = True
            break
        state.current_proposal = nxt
    return state


class NetPredictor:
    """Frozen network used as a ladder predictor (eval mode)."""

    def __init__(self, cfg: NetConfig, params: NetParams):
        self.cfg = cfg
        self.params = params

    @property
    def patch_size(self) -> int:
        return self.cfg.input_size

    def __call__(self, patch: np.ndarray, transform: PatchTransform) -> np.ndarray:
        return predict(self.cfg, self.params, patch[None])[0]


class OraclePredictor:
    """Returns ground-truth corners for whichever annotated instance the patch is centred on."""

    def __init__(self, ann: ChainAnnotation):
        self.ann = ann
        self._cent = np.array([centroid(q) for q in ann.quads])

    def __call__(self, patch: np.ndarray, transform: PatchTransform) -> np.ndarray:
        c = transform.crop.center
        i = int(np.argmin(np.hypot(self._cent[:, 0] - c.x, self._cent[:, 1] - c.y)))
        central = self.ann.quads[i]
        if i + 1 < len(self.ann):
            upper = self.ann.quads[i + 1]
        else:
            # past the top of the chain: repeat the last spacing
            step = self._cent[i] - self._cent[i - 1] if i > 0 else np.array([0.0, -1.5 * tight_rect(central).height])
            upper = central.translated(*step)
        return quad_pair_targets(transform, central, upper)


def ordinal_labels(seed_name: str, n: int) -> list[str]:
    """Names for ``n`` detections starting at ``seed_name`` and walking upward."""
    if seed_name in VERTEBRAE:
        k = VERTEBRAE.index(seed_name)
        names = VERTEBRAE[k : k + n]
        return names + [f"{VERTEBRAE[-1]}+{j}" for j in range(1, n - len(names) + 1)]
    m = re.fullmatch(r"(.*?)(\d+)", seed_name)
    if m:
        stem, start = m.group(1), int(m.group(2))
        return [f"{stem}{start + j}" for j in range(n)]
    return [f"{seed_name}+{j}" if j else seed_name for j in range(n)]


def quad_list(q: Quad) -> list[list[float]]:
    return [[p.x, p.y] for p in q.corners]


def detections_to_json(state: LadderState, seed: Quad, iterations: int, seed_name: str = "V0", image: str = "", error: str | None = None) -> dict:
    doc = {
        "image": image,
        "seed": quad_list(seed),
        "iterations": iterations,
        "detections": [quad_list(q) for q in state.detections],
        "labels": ordinal_labels(seed_name, len(state.detections)),
        "stopped_early": state.stopped_early,
    }
    if error:
        doc["error"] = error
    return doc


def trace_to_json(state: LadderState) -> list[dict]:
    out = []
    for k, tr in enumerate(state.trace):
        out.append({
            "step": k,
            "crop": [tr.crop.x0, tr.crop.y0, tr.crop.x1, tr.crop.y1],
            "raw": [float(v) if math.isfinite(v) else None for v in tr.raw],
            "detection": None if tr.detection is None else quad_list(tr.detection),
            "proposal": None if tr.proposal is None else quad_list(tr.proposal),
        })
    return out


def read_detections(path) -> list[Quad]:
    doc = json.loads(Path(path).read_text())
    return [Quad.from_array(q) for q in doc["detections"]]
