"""Intensity normalization: CT percentile clip + z-score, PET min-max to [0, 1].

Statistics are fitted per volume (no dataset pass), so inference is
self-contained.  Both parameter sets serialize to JSON for reproducibility.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .volume_io import Volume

CT_PERCENTILE_LOW = 0.05
CT_PERCENTILE_HIGH = 99.5
_STD_GUARD = 1e-8


@dataclass(frozen=True)
class CtNormParams:
    """Clip bounds and post-clip z-score statistics for one CT volume."""

    p_low: float
    p_high: float
    clip_low: float
    clip_high: float
    mean: float
    std: float

    def __post_init__(self):
        if not self.p_low < self.p_high:
            raise ValueError("p_low must be < p_high")
        if self.clip_low > self.clip_high:
            raise ValueError("clip_low must be <= clip_high")
        if self.std < 0:
            raise ValueError("std must be >= 0")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


@dataclass(frozen=True)
class PetNormParams:
    """Min-max range of one PET volume; degenerate when the range collapses."""

    min: float
    max: float
    degenerate: bool = False

    def __post_init__(self):
        if self.min > self.max:
            raise ValueError("min must be <= max")

    def to_json(self):
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text):
        return cls(**json.loads(text))


def percentile(values, q):
    """Linear-interpolation percentile on sorted order statistics.

    With sorted values v_0..v_{n-1} and rank r = q/100*(n-1), returns
    v_floor(r) + frac(r)*(v_floor(r)+1 - v_floor(r)).
    """
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size == 0:
        raise ValueError("percentile of empty input")
    if not 0.0 <= q <= 100.0:
        raise ValueError(f"percentile q must be in [0, 100], got {q}")
    v = np.sort(values)
    r = q / 100.0 * (v.size - 1)
    lo = int(np.floor(r))
    hi = min(lo + 1, v.size - 1)
    return float(v[lo] + (r - lo) * (v[hi] - v[lo]))


def fit_ct_norm(ct: Volume, p_low=CT_PERCENTILE_LOW, p_high=CT_PERCENTILE_HIGH) -> CtNormParams:
    """Fit clip bounds at the given percentiles and z-score stats after clipping."""
    if ct.meta.modality != "CT":
        raise ValueError(f"fit_ct_norm expects a CT volume, got {ct.meta.modality}")
    vox = ct.voxels.astype(np.float64).ravel()
    clip_low = percentile(vox, p_low)
    clip_high = percentile(vox, p_high)
    clipped = np.clip(vox, clip_low, clip_high)
    mean = float(clipped.mean())
    std = float(clipped.std())
    if std < _STD_GUARD:
        std = 1.0
    return CtNormParams(p_low, p_high, clip_low, clip_high, mean, std)


def normalize_ct(ct: Volume, params: CtNormParams) -> Volume:
    """Clip to the fitted bounds, then z-score."""
    out = (np.clip(ct.voxels, params.clip_low, params.clip_high) - params.mean) / params.std
    return ct.derived(out.astype(np.float32))


def normalize_pet(pet: Volume):
    """Min-max normalize PET to [0, 1]; constant volumes map to all zeros."""
    if pet.meta.modality != "PET":
        raise ValueError(f"normalize_pet expects a PET volume, got {pet.meta.modality}")
    lo = float(pet.voxels.min())
    hi = float(pet.voxels.max())
    if hi == lo:
        params = PetNormParams(lo, hi, degenerate=True)
        return pet.derived(np.zeros(pet.meta.dims, dtype=np.float32)), params
    params = PetNormParams(lo, hi)
    out = (pet.voxels - np.float32(lo)) / np.float32(hi - lo)
    np.clip(out, 0.0, 1.0, out=out)
    return pet.derived(out), params
