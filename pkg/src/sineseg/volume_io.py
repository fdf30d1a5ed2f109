"""Volume I/O and the synthetic phantom generator.

On-disk canonical format is raw little-endian float32 (z-major) plus a
JSON sidecar with dims/spacing/modality/intensity_units.  A small NIfTI-1
read subset covers interoperability with common medical imaging tools.
Axis convention everywhere: (z, y, x) with z the axial (superior-inferior)
axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

MODALITIES = ("CT", "PET", "LABEL", "DERIVED")


class VolumeIOError(Exception):
    """Malformed volume file, sidecar, or size mismatch."""


class NiftiFormatError(VolumeIOError):
    """File is not a readable NIfTI-1 single 3D image."""


class PhantomPlacementError(Exception):
    """Lesion placement infeasible for the requested geometry."""


@dataclass(frozen=True)
class VolumeMeta:
    """Grid geometry and semantics of a scalar volume."""

    dims: tuple[int, int, int]          # voxels per axis, (z, y, x)
    spacing: tuple[float, float, float]  # mm per voxel, (z, y, x)
    modality: str                        # one of MODALITIES
    intensity_units: str = ""

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        if len(self.dims) != 3 or any(d < 1 for d in self.dims):
            raise ValueError(f"dims must be three extents >= 1, got {self.dims}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive floats, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}, expected one of {MODALITIES}")

    def to_dict(self):
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "modality": self.modality,
            "intensity_units": self.intensity_units,
        }


@dataclass
class Volume:
    """Dense float32 scalar grid with metadata; voxels are (z, y, x) row-major."""

    meta: VolumeMeta
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.shape != self.meta.dims:
            raise ValueError(
                f"voxel shape {self.voxels.shape} does not match dims {self.meta.dims}")
        if not np.all(np.isfinite(self.voxels)):
            raise ValueError("volume contains NaN or infinite voxels")
        if self.meta.modality == "LABEL" and not np.isin(self.voxels, (0.0, 1.0)).all():
            raise ValueError("LABEL volume must contain only 0/1 voxels")

    def derived(self, voxels, modality="DERIVED", intensity_units="unitless"):
        """New volume on the same grid with different voxel content."""
        meta = VolumeMeta(self.meta.dims, self.meta.spacing, modality, intensity_units)
        return Volume(meta, voxels)


def read_raw_volume(data_path, meta_path) -> Volume:
    """Load a raw little-endian float32 volume and its JSON sidecar."""
    try:
        with open(meta_path) as f:
            meta_dict = json.load(f)
        meta = VolumeMeta(
            dims=tuple(meta_dict["dims"]),
            spacing=tuple(meta_dict["spacing"]),
            modality=meta_dict["modality"],
            intensity_units=meta_dict.get("intensity_units", ""),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise VolumeIOError(f"malformed volume sidecar {meta_path}: {exc}") from exc
    data = np.fromfile(data_path, dtype="<f4")
    n_expected = int(np.prod(meta.dims))
    if data.size != n_expected:
        raise VolumeIOError(
            f"{data_path}: {data.size} voxels on disk, dims {meta.dims} need {n_expected}")
    return Volume(meta, data.astype(np.float32).reshape(meta.dims))


def write_raw_volume(volume: Volume, data_path, meta_path) -> None:
    """Write a volume as raw little-endian float32 + JSON sidecar (bit-exact round-trip)."""
    volume.voxels.astype("<f4").tofile(data_path)
    with open(meta_path, "w") as f:
        json.dump(volume.meta.to_dict(), f, indent=2)
        f.write("\n")


def volume_paths(directory, name):
    """(data, sidecar) path pair for a named volume in a directory."""
    directory = Path(directory)
    return directory / f"{name}.f32", directory / f"{name}.json"


def save_volume(volume, directory, name):
    data_path, meta_path = volume_paths(directory, name)
    write_raw_volume(volume, data_path, meta_path)
    return data_path


def load_volume(directory, name):
    data_path, meta_path = volume_paths(directory, name)
    return read_raw_volume(data_path, meta_path)


# NIfTI-1 constants: field offsets within the fixed 348-byte header.
_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32}
_NIFTI_MAGICS = (b"n+1\x00", b"ni1\x00")


def read_nifti_subset(path, modality="DERIVED") -> Volume:
    """Read a single 3D NIfTI-1 image (uint8/int16/float32, uncompressed).

    Voxels are converted to float32 via scl_slope*value + scl_inter when
    scl_slope is nonzero; spacing comes from pixdim.  The (x, y, z) disk
    order is exposed as (z, y, x) without reordering memory.
    """
    with open(path, "rb") as f:
        header = f.read(348)
        if len(header) < 348:
            raise NiftiFormatError(f"{path}: file shorter than the 348-byte NIfTI-1 header")
        sizeof_hdr = struct.unpack("<i", header[:4])[0]
        order = "<"
        if sizeof_hdr != 348:
            if struct.unpack(">i", header[:4])[0] == 348:
                order = ">"
            else:
                raise NiftiFormatError(f"{path}: sizeof_hdr is not 348 in either byte order")
        if header[344:348] not in _NIFTI_MAGICS:
            raise NiftiFormatError(f"{path}: bad magic {header[344:348]!r}")
        dim = struct.unpack(order + "8h", header[40:56])
        if dim[0] != 3:
            raise NiftiFormatError(f"{path}: expected a 3D image, dim[0]={dim[0]}")
        datatype = struct.unpack(order + "h", header[70:72])[0]
        if datatype not in _NIFTI_DTYPES:
            raise NiftiFormatError(f"{path}: unsupported datatype code {datatype}")
        pixdim = struct.unpack(order + "8f", header[76:108])
        vox_offset = struct.unpack(order + "f", header[108:112])[0]
        scl_slope = struct.unpack(order + "f", header[112:116])[0]
        scl_inter = struct.unpack(order + "f", header[116:120])[0]

        nx, ny, nz = dim[1], dim[2], dim[3]
        f.seek(int(vox_offset))
        raw = np.fromfile(f, dtype=np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(order),
                          count=nx * ny * nz)
    if raw.size != nx * ny * nz:
        raise NiftiFormatError(f"{path}: truncated data section")
    values = raw.astype(np.float32)
    if scl_slope != 0.0:
        values = np.float32(scl_slope) * values + np.float32(scl_inter)
    meta = VolumeMeta(
        dims=(nz, ny, nx),
        spacing=(float(pixdim[3]), float(pixdim[2]), float(pixdim[1])),
        modality=modality,
    )
    return Volume(meta, values.reshape(nz, ny, nx))


@dataclass(frozen=True)
class PhantomSpec:
    """Deterministic synthetic CT/PET/label triple standing in for real scans."""

    seed: int
    dims: tuple[int, int, int] = (64, 64, 64)
    n_lesions: int = 2
    lesion_radius_range: tuple[float, float] = (5.0, 9.0)
    background_uptake: float = 0.5
    lesion_uptake_range: tuple[float, float] = (4.0, 8.0)

    def __post_init__(self):
        if self.lesion_radius_range[0] > self.lesion_radius_range[1]:
            raise ValueError("lesion_radius_range must be (low, high)")
        if self.lesion_uptake_range[0] <= self.background_uptake:
            raise ValueError("lesion uptake must exceed background uptake")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be >= 0")


_PLACEMENT_RETRIES = 200


def synth_phantom(spec: PhantomSpec):
    """Generate co-registered (ct, pet, labels) volumes from a PhantomSpec.

    Lesions are non-overlapping spheres fully inside the grid: high uniform
    uptake on PET, a density offset on CT, label 1.  The PET background is
    Gaussian noise around background_uptake clamped at zero; the CT
    background is a smooth low-frequency field.
    """
    rng = np.random.default_rng(spec.seed)
    dims = tuple(int(d) for d in spec.dims)
    zz, yy, xx = np.meshgrid(*(np.arange(d) for d in dims), indexing="ij")

    spheres = []
    for _ in range(spec.n_lesions):
        r = float(rng.uniform(*spec.lesion_radius_range))
        margin = int(np.ceil(r))
        if any(d - 1 - margin < margin for d in dims):
            raise PhantomPlacementError(
                f"radius {r:.1f} cannot fit inside dims {dims}")
        for _attempt in range(_PLACEMENT_RETRIES):
            center = tuple(int(rng.integers(margin, d - margin)) for d in dims)
            if all(sum((a - b) ** 2 for a, b in zip(center, c)) > (r + cr + 1) ** 2
                   for c, cr in spheres):
                spheres.append((center, r))
                break
        else:
            raise PhantomPlacementError(
                f"no non-overlapping spot for lesion {len(spheres)} after "
                f"{_PLACEMENT_RETRIES} retries")

    labels = np.zeros(dims, dtype=np.float32)
    for (cz, cy, cx), r in spheres:
        inside = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        labels[inside] = 1.0

    pet = rng.normal(spec.background_uptake, 0.1 * spec.background_uptake,
                     size=dims).astype(np.float32)
    np.clip(pet, 0.0, None, out=pet)
    for (cz, cy, cx), r in spheres:
        inside = (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        pet[inside] = rng.uniform(*spec.lesion_uptake_range, size=int(inside.sum()))

    smooth = gaussian_filter(rng.standard_normal(dims), sigma=6.0)
    smooth = (smooth - smooth.mean()) / max(float(smooth.std()), 1e-12)
    ct = (40.0 + 60.0 * smooth).astype(np.float32)
    ct[labels > 0] += 80.0

    spacing = (1.0, 1.0, 1.0)
    ct_vol = Volume(VolumeMeta(dims, spacing, "CT", "HU"), ct)
    pet_vol = Volume(VolumeMeta(dims, spacing, "PET", "SUV"), pet)
    label_vol = Volume(VolumeMeta(dims, spacing, "LABEL"), labels)
    return ct_vol, pet_vol, label_vol
