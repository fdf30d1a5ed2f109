"""Periodic sine transform of normalized PET and multi-channel assembly.

Each configured constant a produces one channel sin(a*x) from the 0-1
normalized PET volume; the channels are stacked with raw CT and PET into
the network input.  The transform is intentionally non-injective: rising
radial uptake profiles produce one concentric ring per zero crossing of
sin(a*x) below the core intensity, which is what the ring analytics here
quantify.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .volume_io import Volume, VolumeMeta

DEFAULT_CONSTANTS = (20.0, 30.0)
RANGE_TOL = 1e-6


@dataclass(frozen=True)
class SineNormConfig:
    """Frequency constants of the sine channels (one output channel each)."""

    constants_a: tuple[float, ...] = DEFAULT_CONSTANTS

    def __post_init__(self):
        object.__setattr__(self, "constants_a", tuple(float(a) for a in self.constants_a))
        if len(self.constants_a) < 1:
            raise ValueError("at least one sine constant is required")
        if any(a <= 0 for a in self.constants_a):
            raise ValueError(f"sine constants must be positive, got {self.constants_a}")

    @property
    def hidden_channels(self):
        return len(self.constants_a)


@dataclass
class MultiChannelVolume:
    """Channel stack (C, z, y, x) on a shared grid, with unique channel names."""

    meta: VolumeMeta
    channels: np.ndarray
    channel_names: list[str]

    def __post_init__(self):
        self.channels = np.ascontiguousarray(self.channels)
        if self.channels.ndim != 4:
            raise ValueError("channels must be a (C, z, y, x) array")
        if self.channels.shape[1:] != self.meta.dims:
            raise ValueError(
                f"channel dims {self.channels.shape[1:]} do not match meta dims {self.meta.dims}")
        if len(self.channel_names) != self.channels.shape[0]:
            raise ValueError("one name per channel required")
        if len(set(self.channel_names)) != len(self.channel_names):
            raise ValueError(f"channel names must be unique, got {self.channel_names}")

    @property
    def n_channels(self):
        return self.channels.shape[0]


def channel_name(a):
    return f"sin{a:g}"


def _checked_unit_range(x, tol=RANGE_TOL):
    lo = float(x.min())
    hi = float(x.max())
    if lo < -tol or hi > 1.0 + tol:
        raise ValueError(
            f"sine transform input must lie in [0, 1] (got [{lo:.6g}, {hi:.6g}]); "
            "was the PET volume min-max normalized?")
    return np.clip(x, 0.0, 1.0)


def sine_channels(x, constants):
    """sin(a*x) per constant on a bare array; returns (C,) + x.shape.

    The phase product is taken in float64 regardless of input dtype: at
    a=30 a float32 product already carries ~1e-6 absolute phase error,
    which would dominate the transform's error budget.
    """
    a = np.asarray(constants, dtype=np.float64).reshape((-1,) + (1,) * np.ndim(x))
    out = np.sin(a * np.asarray(x, dtype=np.float64))
    return out.astype(np.asarray(x).dtype, copy=False)


def sine_channel_grads(x, constants):
    """d/dx of :func:`sine_channels`: a*cos(a*x) per constant."""
    a = np.asarray(constants, dtype=np.float64).reshape((-1,) + (1,) * np.ndim(x))
    out = a * np.cos(a * np.asarray(x, dtype=np.float64))
    return out.astype(np.asarray(x).dtype, copy=False)


def sine_transform(pet_norm: Volume, cfg: SineNormConfig = SineNormConfig()) -> MultiChannelVolume:
    """Apply the sine channels to a normalized PET volume (inputs in [0, 1])."""
    x = _checked_unit_range(pet_norm.voxels)
    channels = sine_channels(x, cfg.constants_a)
    meta = VolumeMeta(pet_norm.meta.dims, pet_norm.meta.spacing, "DERIVED", "unitless")
    return MultiChannelVolume(meta, channels, [channel_name(a) for a in cfg.constants_a])


def sine_gradient(pet_norm: Volume, cfg: SineNormConfig = SineNormConfig()) -> MultiChannelVolume:
    """Per-channel derivative a*cos(a*x) of the transform w.r.t. its input."""
    x = _checked_unit_range(pet_norm.voxels)
    channels = sine_channel_grads(x, cfg.constants_a)
    meta = VolumeMeta(pet_norm.meta.dims, pet_norm.meta.spacing, "DERIVED", "unitless")
    names = [channel_name(a) + "_grad" for a in cfg.constants_a]
    return MultiChannelVolume(meta, channels, names)


def assemble_input(ct_norm: Volume, pet_norm: Volume,
                   sine: MultiChannelVolume) -> MultiChannelVolume:
    """Stack [CT, PET, sin channels...] into the network input."""
    dims = ct_norm.meta.dims
    if pet_norm.meta.dims != dims or sine.meta.dims != dims:
        raise ValueError(
            f"channel dims mismatch: ct {dims}, pet {pet_norm.meta.dims}, "
            f"sine {sine.meta.dims}")
    channels = np.concatenate(
        [ct_norm.voxels[None], pet_norm.voxels[None], sine.channels], axis=0)
    names = ["ct", "pet"] + list(sine.channel_names)
    meta = VolumeMeta(dims, ct_norm.meta.spacing, "DERIVED", "unitless")
    return MultiChannelVolume(meta, channels.astype(np.float32), names)


def ring_zero_crossings(a):
    """Intensity levels k*pi/a (k >= 1) in (0, 1) where sin(a*x) crosses zero.

    On a monotone radial uptake profile each level shows up as one
    concentric ring around the uptake core.
    """
    if a <= 0:
        raise ValueError("constant a must be positive")
    crossings = []
    k = 1
    while k * math.pi / a < 1.0:
        crossings.append(k * math.pi / a)
        k += 1
    return crossings
