"""NIfTI-1 input/output for label and probability volumes.

Header parsing and (de)compression are delegated to nibabel; this module adds
the label-schema mapping, geometry extraction and validation.
"""
from __future__ import annotations

import os
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import nibabel as nib
import numpy as np

from .core import (
    DEFAULT_SCHEMA,
    LABEL_DTYPE,
    PROB_DTYPE,
    LabelProbVolume,
    LabelSchema,
    LabelVolume,
    RegionProbVolume,
    SingleRegionProb,
    VolumeGeometry,
    as_region,
    check_same_geometry,
)
from .errors import ConfigError, MissingInputError, NiftiFormatError, OutputError, SchemaError

CLAMP_WARN_EXCESS = 1e-3

_SUPPORTED_DTYPES = {
    np.dtype(t).newbyteorder("=")
    for t in (np.uint8, np.int8, np.uint16, np.int16, np.uint32, np.int32, np.uint64, np.int64, np.float32, np.float64)
}


@dataclass(frozen=True)
class NiftiHeaderSummary:
    datatype: int
    dims: tuple[int, ...]
    spacing: tuple[float, float, float]
    affine: np.ndarray
    scl_slope: float | None
    scl_inter: float | None


def _load(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.is_file():
        raise MissingInputError(f"{path}: file not found")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises a mix of ImageFileError, HeaderDataError, OSError
        raise NiftiFormatError(f"{path}: not a readable NIfTI-1 file ({exc})") from exc
    if type(img) is not nib.Nifti1Image:
        raise NiftiFormatError(f"{path}: expected NIfTI-1, got {type(img).__name__}")
    return img


def header_summary(img: nib.Nifti1Image, path="<image>") -> NiftiHeaderSummary:
    hdr = img.header
    dtype = hdr.get_data_dtype()
    if dtype.newbyteorder("=") not in _SUPPORTED_DTYPES:
        raise NiftiFormatError(f"{path}: unsupported NIfTI datatype {hdr['datatype']} ({dtype})")
    shape = tuple(int(d) for d in img.shape)
    zooms = tuple(float(z) for z in hdr.get_zooms()[:3])
    if len(zooms) < 3 or any(not np.isfinite(z) or z <= 0 for z in zooms):
        raise NiftiFormatError(f"{path}: pixdim spacing must be positive, got {zooms}")
    # sform first, then qform, then spacing only
    affine, code = hdr.get_sform(coded=True)
    if not code:
        affine, code = hdr.get_qform(coded=True)
    if not code:
        affine = np.diag(zooms + (1.0,))
    slope, inter = hdr.get_slope_inter()
    return NiftiHeaderSummary(int(hdr["datatype"]), shape, zooms, np.asarray(affine, dtype=np.float64), slope, inter)


def _geometry(summary: NiftiHeaderSummary, path) -> VolumeGeometry:
    try:
        return VolumeGeometry(summary.dims[:3], summary.spacing, summary.affine)
    except ConfigError as exc:
        raise NiftiFormatError(f"{path}: invalid geometry ({exc})") from exc


def _squeeze_to_3d(data: np.ndarray, path) -> np.ndarray:
    while data.ndim > 3 and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != 3:
        raise NiftiFormatError(f"{path}: expected a 3D volume, got shape {data.shape}")
    return data


def read_label_volume(path, schema: LabelSchema = DEFAULT_SCHEMA) -> LabelVolume:
    img = _load(path)
    summary = header_summary(img, path)
    # nibabel moves scaling from the header onto the data proxy at load time
    slope = getattr(img.dataobj, "slope", summary.scl_slope)
    inter = getattr(img.dataobj, "inter", summary.scl_inter)
    if slope is not None and not (np.isnan(slope) or slope == 1.0):
        raise NiftiFormatError(f"{path}: label files must have identity scaling (scl_slope={slope})")
    if inter is not None and not (np.isnan(inter) or inter == 0.0):
        raise NiftiFormatError(f"{path}: label files must have identity scaling (scl_inter={inter})")
    raw = _squeeze_to_3d(np.asanyarray(img.dataobj), path)
    if raw.dtype.kind == "f":
        if not np.all(np.isfinite(raw)) or not np.all(raw == np.round(raw)):
            raise NiftiFormatError(f"{path}: label volume contains non-integer values")
    lo, hi = (raw.min(), raw.max()) if raw.size else (0, 0)
    lut = schema.lookup_table()
    if lo < 0 or hi > 255:
        bad = lo if lo < 0 else hi
        raise SchemaError(f"{path}: label code {int(bad)} is not in the label schema {sorted(schema.file_to_canonical)}")
    mapped = lut[raw.astype(np.int64)]
    if mapped.size and mapped.max() == 255:
        bad = np.unique(raw[mapped == 255]).astype(np.int64)
        raise SchemaError(
            f"{path}: label code(s) {bad.tolist()} not in the label schema {sorted(schema.file_to_canonical)}"
        )
    return LabelVolume(_geometry(summary, path), mapped.astype(LABEL_DTYPE))


def _read_float_channels(path) -> tuple[np.ndarray, VolumeGeometry]:
    img = _load(path)
    summary = header_summary(img, path)
    data = np.asarray(img.get_fdata(dtype=np.float64))
    return data, _geometry(summary, path)


def _clamp(arr: np.ndarray, what) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NiftiFormatError(f"{what}: probability volume contains non-finite values")
    if arr.size:
        excess = max(-arr.min(), arr.max() - 1.0)
        if excess > CLAMP_WARN_EXCESS:
            warnings.warn(f"{what}: probabilities exceed [0, 1] by {excess:.4g}; clamping", stacklevel=3)
    return np.clip(arr, 0.0, 1.0)


def read_prob_volume(path_or_paths) -> RegionProbVolume | LabelProbVolume:
    """Read 3 region or 4 label-softmax channels.

    Accepts a single 4D file (channels on the last axis) or a list of 3D
    single-channel files in channel order.
    """
    if isinstance(path_or_paths, (str, os.PathLike)):
        data, geometry = _read_float_channels(path_or_paths)
        if data.ndim == 5 and data.shape[3] == 1:
            data = data[:, :, :, 0, :]
        if data.ndim != 4:
            raise NiftiFormatError(f"{path_or_paths}: expected a 4D multi-channel volume, got shape {data.shape}")
        channels = np.moveaxis(data, -1, 0)
        what = str(path_or_paths)
    else:
        paths = list(path_or_paths)
        if not paths:
            raise ConfigError("no probability channel files given")
        chans, geoms = [], []
        for p in paths:
            data, geometry = _read_float_channels(p)
            chans.append(_squeeze_to_3d(data, p))
            geoms.append(geometry)
        check_same_geometry(*geoms, what="probability channel files")
        geometry = geoms[0]
        channels = np.stack(chans)
        what = ", ".join(str(p) for p in paths)
    n = channels.shape[0]
    if n not in (3, 4):
        raise NiftiFormatError(f"{what}: expected 3 or 4 channels, got {n}")
    channels = _clamp(channels, what).astype(PROB_DTYPE)
    if n == 3:
        return RegionProbVolume(geometry, channels)
    try:
        return LabelProbVolume(geometry, channels)
    except ConfigError as exc:
        raise NiftiFormatError(f"{what}: {exc}") from exc


def read_channel_volume(path, region) -> SingleRegionProb:
    data, geometry = _read_float_channels(path)
    data = _squeeze_to_3d(data, path)
    return SingleRegionProb(geometry, as_region(region), _clamp(data, str(path)).astype(PROB_DTYPE))


def _atomic_save(img: nib.Nifti1Image, path) -> None:
    path = Path(path)
    suffix = ".nii.gz" if path.name.endswith(".nii.gz") else path.suffix or ".nii"
    tmp = None
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=suffix, dir=path.parent)
        os.close(fd)
        nib.save(img, tmp)
        os.replace(tmp, path)
    except OSError as exc:
        if tmp and os.path.exists(tmp):
            os.unlink(tmp)
        raise OutputError(f"{path}: cannot write NIfTI file ({exc})") from exc


def _image(data: np.ndarray, geometry: VolumeGeometry, dtype) -> nib.Nifti1Image:
    img = nib.Nifti1Image(data, geometry.affine)
    hdr = img.header
    hdr.set_data_dtype(dtype)
    hdr.set_sform(geometry.affine, code=1)
    try:
        hdr.set_qform(geometry.affine, code=1)
    except Exception:
        hdr.set_qform(None, code=0)
    zooms = tuple(geometry.spacing) + tuple(hdr.get_zooms()[3:])
    hdr.set_zooms(zooms)
    hdr.set_slope_inter(1.0, 0.0)
    return img


def write_label_volume(labels: LabelVolume, path, schema: LabelSchema = DEFAULT_SCHEMA) -> None:
    payload = schema.inverse_table()[labels.voxels]
    _atomic_save(_image(np.ascontiguousarray(payload, dtype=LABEL_DTYPE), labels.geometry, LABEL_DTYPE), path)


def write_prob_volume(probs: RegionProbVolume | LabelProbVolume, path) -> None:
    data = np.ascontiguousarray(np.moveaxis(probs.channels, 0, -1), dtype=PROB_DTYPE)
    _atomic_save(_image(data, probs.geometry, PROB_DTYPE), path)


def write_channel_volume(prob: SingleRegionProb, path) -> None:
    _atomic_save(_image(np.ascontiguousarray(prob.values, dtype=PROB_DTYPE), prob.geometry, PROB_DTYPE), path)
