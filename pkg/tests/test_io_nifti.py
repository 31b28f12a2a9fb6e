import warnings

import nibabel as nib
import numpy as np
import pytest

from conftest import random_labels
from tumorpipe.core import (
    LabelProbVolume,
    LabelSchema,
    LabelVolume,
    RegionProbVolume,
    SingleRegionProb,
    VolumeGeometry,
)
from tumorpipe.errors import (
    GeometryMismatchError,
    MissingInputError,
    NiftiFormatError,
    SchemaError,
)
from tumorpipe.io_nifti import (
    read_channel_volume,
    read_label_volume,
    read_prob_volume,
    write_channel_volume,
    write_label_volume,
    write_prob_volume,
)


def _raw(path, data, affine=None, dtype=None):
    img = nib.Nifti1Image(data, np.eye(4) if affine is None else affine)
    if dtype is not None:
        img.header.set_data_dtype(dtype)
    nib.save(img, str(path))
    return path


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_label_round_trip_is_bit_exact(tmp_path, rng, suffix):
    affine = np.array([[0, -1.2, 0, 10], [0.8, 0, 0, -3], [0, 0, 2.5, 7], [0, 0, 0, 1]], float)
    geom = VolumeGeometry((9, 8, 7), (0.8, 1.2, 2.5), affine)
    lv = LabelVolume(geom, random_labels(rng, (9, 8, 7)))
    path = tmp_path / f"a{suffix}"
    write_label_volume(lv, path)
    back = read_label_volume(path)
    assert np.array_equal(back.voxels, lv.voxels) and back.voxels.dtype == np.uint8
    assert np.allclose(back.geometry.affine, affine, atol=1e-6)
    assert np.allclose(back.geometry.spacing, (0.8, 1.2, 2.5), atol=1e-6)


def test_gzip_and_plain_read_identically(tmp_path, rng):
    lv = LabelVolume.from_array(random_labels(rng, (6, 6, 6)), spacing=(1, 1, 3))
    write_label_volume(lv, tmp_path / "x.nii")
    write_label_volume(lv, tmp_path / "x.nii.gz")
    assert read_label_volume(tmp_path / "x.nii") == read_label_volume(tmp_path / "x.nii.gz")


def test_unknown_label_code_names_the_code(tmp_path):
    data = np.zeros((3, 3, 3), np.uint8)
    data[1, 1, 1] = 4
    path = _raw(tmp_path / "bad.nii.gz", data)
    with pytest.raises(SchemaError, match=r"\[4\]"):
        read_label_volume(path)


def test_custom_schema_round_trip(tmp_path, rng):
    schema = LabelSchema.from_names({"background": 0, "NCR": 1, "ED": 2, "ET": 4})
    lv = LabelVolume.from_array(random_labels(rng, (5, 5, 5)))
    write_label_volume(lv, tmp_path / "s.nii.gz", schema)
    on_disk = np.asarray(nib.load(str(tmp_path / "s.nii.gz")).dataobj)
    assert set(np.unique(on_disk)) <= {0, 1, 2, 4}
    assert read_label_volume(tmp_path / "s.nii.gz", schema) == lv


def test_non_integer_labels_rejected(tmp_path):
    path = _raw(tmp_path / "f.nii.gz", np.full((2, 2, 2), 1.5, np.float32))
    with pytest.raises(NiftiFormatError):
        read_label_volume(path)


def test_label_scaling_rejected(tmp_path):
    path = _raw(tmp_path / "s.nii", np.ones((2, 2, 2), np.int16))
    raw = bytearray(path.read_bytes())
    raw[112:116] = np.float32(2.0).tobytes()  # scl_slope
    path.write_bytes(bytes(raw))
    with pytest.raises(NiftiFormatError):
        read_label_volume(tmp_path / "s.nii")


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(MissingInputError):
        read_label_volume(tmp_path / "nope.nii.gz")
    (tmp_path / "junk.nii").write_bytes(b"not a nifti header")
    with pytest.raises(NiftiFormatError):
        read_label_volume(tmp_path / "junk.nii")


def test_unsupported_datatype_rejected(tmp_path):
    path = _raw(tmp_path / "c.nii", np.ones((2, 2, 2), np.complex64))
    with pytest.raises(NiftiFormatError):
        read_label_volume(path)


def test_sform_preferred_over_qform(tmp_path):
    img = nib.Nifti1Image(np.zeros((2, 2, 2), np.uint8), None)
    q = np.diag([1.0, 1.0, 1.0, 1.0])
    s = np.diag([1.0, 1.0, 1.0, 1.0])
    s[:3, 3] = [5, 6, 7]
    img.header.set_qform(q, code=1)
    img.header.set_sform(s, code=1)
    nib.save(img, str(tmp_path / "a.nii"))
    assert np.allclose(read_label_volume(tmp_path / "a.nii").geometry.affine, s)
    img.header.set_sform(s, code=0)
    nib.save(img, str(tmp_path / "b.nii"))
    assert np.allclose(read_label_volume(tmp_path / "b.nii").geometry.affine, q)


def test_three_channel_file_gives_region_probs(tmp_path):
    path = _raw(tmp_path / "p.nii.gz", np.full((4, 4, 4, 3), 0.5, np.float32))
    p = read_prob_volume(path)
    assert isinstance(p, RegionProbVolume) and np.all(p.channels == 0.5)


def test_four_channel_softmax_gives_label_probs(tmp_path, rng):
    logits = rng.normal(size=(4, 4, 4, 4))
    soft = np.exp(logits) / np.exp(logits).sum(-1, keepdims=True)
    p = read_prob_volume(_raw(tmp_path / "s.nii.gz", soft.astype(np.float32)))
    assert isinstance(p, LabelProbVolume)
    assert np.allclose(p.channels.sum(0), 1, atol=1e-4)


def test_prob_round_trip(tmp_path, rng):
    geom = VolumeGeometry((5, 4, 3), (1, 2, 3))
    p = RegionProbVolume(geom, rng.random((3, 5, 4, 3)).astype(np.float32))
    write_prob_volume(p, tmp_path / "p.nii.gz")
    back = read_prob_volume(tmp_path / "p.nii.gz")
    assert np.array_equal(back.channels, p.channels)
    s = SingleRegionProb(geom, "ET", p.channels[0])
    write_channel_volume(s, tmp_path / "et.nii.gz")
    assert np.array_equal(read_channel_volume(tmp_path / "et.nii.gz", "ET").values, s.values)


def test_out_of_range_probs_warn_and_clamp(tmp_path):
    data = np.full((2, 2, 2, 3), 0.5, np.float32)
    data[0, 0, 0, 0] = 1.2
    with pytest.warns(UserWarning, match="clamping"):
        p = read_prob_volume(_raw(tmp_path / "o.nii.gz", data))
    assert p.channels.max() == 1.0
    data[0, 0, 0, 0] = 1.0005
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        read_prob_volume(_raw(tmp_path / "o2.nii.gz", data))


def test_channel_files_with_different_dims(tmp_path):
    a = _raw(tmp_path / "a.nii.gz", np.zeros((3, 3, 3), np.float32))
    b = _raw(tmp_path / "b.nii.gz", np.zeros((3, 3, 4), np.float32))
    with pytest.raises(GeometryMismatchError):
        read_prob_volume([a, a, b])
    assert isinstance(read_prob_volume([a, a, a]), RegionProbVolume)


def test_wrong_channel_count(tmp_path):
    with pytest.raises(NiftiFormatError):
        read_prob_volume(_raw(tmp_path / "two.nii.gz", np.zeros((2, 2, 2, 2), np.float32)))


def test_write_leaves_no_temp_files(tmp_path, rng):
    lv = LabelVolume.from_array(random_labels(rng, (4, 4, 4)))
    write_label_volume(lv, tmp_path / "out" / "a.nii.gz")
    assert [p.name for p in (tmp_path / "out").iterdir()] == ["a.nii.gz"]
