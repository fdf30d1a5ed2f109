"""Budget-aware sliding-window inference.

Planning follows the published procedure: step fraction 0.5 everywhere;
the in-plane (coronal y / sagittal x) axes use at most four centered
placements whose step fraction escalates by 0.1 until the axis coverage
exceeds 80%; test-time mirroring is reduced to half/quarter of the flip
passes once the axial axis reaches 8 / more than 8 steps.  Patch logits
are blended with a Gaussian importance window and all passes are checked
against a per-patient runtime budget (5 minutes by default).
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass

import numpy as np

from .train import softmax
from .volume_io import Volume, VolumeMeta

STEP_INIT = 0.5
STEP_INCREMENT = 0.1
STEP_CAP = 2.0
COVERAGE_THRESHOLD = 0.8
MAX_INPLANE_STEPS = 4
BUDGET_MS = 300_000.0
SIGMA_SCALE = 1.0 / 8.0

AXES = ("z", "y", "x")
_AXIS_INDEX = {"z": 0, "y": 1, "x": 2}
ALL_FLIP_SETS = tuple(
    subset for r in range(4) for subset in itertools.combinations(AXES, r))
HALF_FLIP_SETS = ((), ("x",), ("y",), ("z",))
QUARTER_FLIP_SETS = ((), ("z",))


@dataclass(frozen=True)
class PatchPlan:
    """Tiling schedule: one network pass per origin (before TTA)."""

    patch_dims: tuple[int, int, int]
    origins: tuple[tuple[int, int, int], ...]
    step_fracs: tuple[float, float, float]
    axis_coverage: tuple[float, float, float]
    axial_steps: int

    def to_dict(self):
        return {
            "patch": list(self.patch_dims),
            "origins": [list(o) for o in self.origins],
            "step_fracs": list(self.step_fracs),
            "axis_coverage": list(self.axis_coverage),
            "axial_steps": self.axial_steps,
        }


@dataclass(frozen=True)
class TtaPlan:
    """Mirroring passes; always contains the identity (empty) flip set."""

    flip_sets: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if () not in self.flip_sets:
            raise ValueError("flip sets must include the identity pass")
        if len(set(self.flip_sets)) != len(self.flip_sets):
            raise ValueError("flip sets must be unique")

    def to_dict(self):
        return {"flip_sets": [list(s) for s in self.flip_sets]}


@dataclass(frozen=True)
class RuntimeEstimate:
    total_passes: int
    per_patch_ms: float
    estimate_ms: float
    budget_ms: float
    within_budget: bool


def _ceil_steps(extent, patch, step_frac):
    # guard against float fuzz pushing an exact quotient over the next integer
    return math.ceil((extent - patch) / (step_frac * patch) - 1e-9)


def axis_steps(extent, patch, step_frac):
    """Evenly spaced origins covering [0, extent); used on the axial axis."""
    if patch > extent:
        raise ValueError(f"patch {patch} exceeds extent {extent}")
    if step_frac <= 0:
        raise ValueError("step_frac must be positive")
    if extent == patch:
        return [0]
    n = max(2, _ceil_steps(extent, patch, step_frac) + 1)
    origins = np.round(np.linspace(0, extent - patch, n)).astype(int)
    return sorted(set(int(o) for o in origins))


def centered_axis_steps(extent, patch, step_frac, max_steps=MAX_INPLANE_STEPS):
    """At most ``max_steps`` origins forming a block centered in the axis."""
    if patch > extent:
        raise ValueError(f"patch {patch} exceeds extent {extent}")
    if extent == patch:
        return [0]
    spacing = max(1, round(step_frac * patch))
    k = min(max_steps, max(2, _ceil_steps(extent, patch, step_frac) + 1))
    span = patch + (k - 1) * spacing
    first = max(0, round((extent - span) / 2))
    origins = [min(first + i * spacing, extent - patch) for i in range(k)]
    return sorted(set(origins))


def axis_coverage(origins, patch, extent):
    """Covered fraction of [0, extent) under the union of patch footprints."""
    if not origins:
        raise ValueError("need at least one origin")
    intervals = sorted((max(0, o), min(o + patch, extent)) for o in origins)
    covered = 0
    cur_lo, cur_hi = intervals[0]
    for lo, hi in intervals[1:]:
        if lo > cur_hi:
            covered += cur_hi - cur_lo
            cur_lo, cur_hi = lo, hi
        else:
            cur_hi = max(cur_hi, hi)
    covered += cur_hi - cur_lo
    return covered / extent


def plan_sliding_window(volume_dims, patch_dims, step_init=STEP_INIT,
                        increment=STEP_INCREMENT,
                        coverage_threshold=COVERAGE_THRESHOLD,
                        max_inplane_steps=MAX_INPLANE_STEPS,
                        step_cap=STEP_CAP) -> PatchPlan:
    """Build the tiling plan: plain tiling on z, coverage-escalated centered
    steps on y and x.  Axes smaller than the patch fall back to a single
    placement (the volume is padded at run time)."""
    per_axis = []
    for axis, (extent, patch) in enumerate(zip(volume_dims, patch_dims)):
        if extent <= patch:
            per_axis.append(([0], step_init, 1.0))
            continue
        if axis == 0:
            origins = axis_steps(extent, patch, step_init)
            per_axis.append((origins, step_init, axis_coverage(origins, patch, extent)))
            continue
        s = step_init
        origins = centered_axis_steps(extent, patch, s, max_inplane_steps)
        cov = axis_coverage(origins, patch, extent)
        while cov <= coverage_threshold and s < step_cap - 1e-12:
            s = round(s + increment, 10)
            origins = centered_axis_steps(extent, patch, s, max_inplane_steps)
            cov = axis_coverage(origins, patch, extent)
        per_axis.append((origins, s, cov))

    origin_lists = [a[0] for a in per_axis]
    origins = tuple(itertools.product(*origin_lists))
    return PatchPlan(
        patch_dims=tuple(patch_dims),
        origins=origins,
        step_fracs=tuple(a[1] for a in per_axis),
        axis_coverage=tuple(a[2] for a in per_axis),
        axial_steps=len(origin_lists[0]),
    )


def plan_tta(axial_steps) -> TtaPlan:
    """Mirroring schedule conditioned on the axial step count: all 8 flip
    sets below 8 steps, 4 at exactly 8, 2 above 8."""
    if axial_steps < 1:
        raise ValueError("axial_steps must be >= 1")
    if axial_steps < 8:
        return TtaPlan(ALL_FLIP_SETS)
    if axial_steps == 8:
        return TtaPlan(HALF_FLIP_SETS)
    return TtaPlan(QUARTER_FLIP_SETS)


def gaussian_importance(patch_dims, sigma_scale=SIGMA_SCALE):
    """Separable Gaussian blending window with unit peak at the patch center,
    sigma = sigma_scale * extent per axis; strictly positive everywhere."""
    axes = []
    for n in patch_dims:
        center = (n - 1) / 2.0
        sigma = sigma_scale * n
        d = np.arange(n) - center
        axes.append(np.exp(-(d * d) / (2.0 * sigma * sigma)))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def apply_flip(arr, axes):
    """Mirror the listed spatial axes; involutive.  Accepts (z, y, x) volumes
    or (C, z, y, x) stacks (leading axes are left alone)."""
    if not axes:
        return arr.copy()
    offset = arr.ndim - 3
    flip_axes = [offset + _AXIS_INDEX[a] for a in axes]
    return np.ascontiguousarray(np.flip(arr, axis=flip_axes))


def estimate_runtime(patch_plan: PatchPlan, tta_plan: TtaPlan, per_patch_ms,
                     budget_ms=BUDGET_MS) -> RuntimeEstimate:
    """Total forward passes times per-patch cost, checked against the budget
    (inclusive)."""
    if per_patch_ms <= 0:
        raise ValueError("per_patch_ms must be positive")
    total = len(patch_plan.origins) * len(tta_plan.flip_sets)
    estimate = total * per_patch_ms
    return RuntimeEstimate(total, per_patch_ms, estimate, budget_ms,
                           estimate <= budget_ms)


def plan_to_dict(patch_plan, tta_plan, estimate=None):
    """JSON-ready summary of the full inference schedule."""
    out = patch_plan.to_dict()
    out.update(tta_plan.to_dict())
    out["estimate_ms"] = estimate.estimate_ms if estimate else None
    out["within_budget"] = estimate.within_budget if estimate else None
    return out


def plan_to_json(patch_plan, tta_plan, estimate=None):
    return json.dumps(plan_to_dict(patch_plan, tta_plan, estimate), indent=2)


def run_inference(net, inputs, patch_plan: PatchPlan, tta_plan: TtaPlan,
                  sigma_scale=SIGMA_SCALE, fg_class=1, progress=None):
    """Predict a full volume: per origin and flip set, forward the mirrored
    patch, un-mirror the full-resolution logits, and blend with Gaussian
    weights.  Returns (binary mask Volume, foreground probability Volume).

    Volumes smaller than the patch on an axis are zero-padded symmetrically
    and cropped back.  Voxels no patch covered are background.
    """
    channels = inputs.channels
    dims = inputs.meta.dims
    patch = patch_plan.patch_dims
    pad = [(0, 0)]
    for extent, p in zip(dims, patch):
        before = max(0, (p - extent) // 2)
        after = max(0, p - extent - before)
        pad.append((before, after))
    padded = np.pad(channels, pad) if any(b or a for b, a in pad) else channels
    pdims = padded.shape[1:]

    n_classes = net.config.out_classes
    logit_sum = np.zeros((n_classes,) + pdims, dtype=np.float64)
    weight_sum = np.zeros(pdims, dtype=np.float64)
    window = gaussian_importance(patch, sigma_scale)

    passes = 0
    for origin in patch_plan.origins:
        sl = tuple(slice(o, o + p) for o, p in zip(origin, patch))
        patch_x = padded[(slice(None),) + sl]
        for flip_set in tta_plan.flip_sets:
            logits = net.forward(apply_flip(patch_x, flip_set), train=False)[0]
            logits = apply_flip(logits, flip_set)
            logit_sum[(slice(None),) + sl] += logits * window
            weight_sum[sl] += window
            passes += 1
            if progress is not None:
                progress(passes)

    covered = weight_sum > 0
    mean_logits = np.zeros_like(logit_sum)
    np.divide(logit_sum, weight_sum[None], out=mean_logits,
              where=covered[None])
    mask = (np.argmax(mean_logits, axis=0) == fg_class) & covered
    prob = softmax(mean_logits, axis=0)[fg_class]
    prob[~covered] = 0.0

    crop = tuple(slice(b, b + extent) for (b, _a), extent in zip(pad[1:], dims))
    mask = np.ascontiguousarray(mask[crop].astype(np.float32))
    prob = np.ascontiguousarray(prob[crop].astype(np.float32))
    spacing = inputs.meta.spacing
    mask_vol = Volume(VolumeMeta(dims, spacing, "LABEL"), mask)
    prob_vol = Volume(VolumeMeta(dims, spacing, "DERIVED", "probability"), prob)
    return mask_vol, prob_vol
