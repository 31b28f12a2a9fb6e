import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import flood_fill_components, island, partition_of
from tumorpipe.core import BinaryMask, LabelVolume, region_mask
from tumorpipe.errors import ConfigError
from tumorpipe.postprocess import (
    ED_WT_RULE,
    ET_WT_RULE,
    PRESETS,
    PostprocessConfig,
    RatioRule,
    connected_components,
    dilate,
    filter_small_components,
    postprocess,
    ratio_relabel,
)

label_arrays = arrays(np.uint8, st.tuples(*[st.integers(1, 8)] * 3), elements=st.sampled_from([0, 0, 0, 1, 2, 3]))


def lv(a):
    return LabelVolume.from_array(a)


def test_presets_hold_the_published_constants():
    assert PRESETS["ped"].min_component_size == 130
    assert PRESETS["men"].min_component_size == 110
    assert PRESETS["met"].min_component_size == 15
    ped_rules = {(r.numerator, r.denominator): r for r in PRESETS["ped"].rules}
    assert ped_rules[("ET", "WT")].threshold == 0.04
    assert ped_rules[("ED", "WT")].threshold == 1.00
    assert PRESETS["men"].rules == () and PRESETS["met"].rules == ()
    assert all(p.connectivity == 26 for p in PRESETS.values())


def test_connected_components_invariants(rng):
    mask = BinaryMask.from_array(rng.random((10, 10, 10)) < 0.3)
    cc = connected_components(mask, 18)
    assert cc.sizes.sum() == mask.count()
    assert set(np.unique(cc.ids)) == set(range(cc.n + 1))
    assert partition_of(np.asarray(cc.ids)) == set(flood_fill_components(mask.voxels, 18))
    assert connected_components(BinaryMask.from_array(np.zeros((3, 3, 3), bool))).n == 0


@pytest.mark.parametrize("min_size, size, kept", [(130, 129, False), (130, 130, True), (110, 109, False),
                                                  (110, 110, True), (15, 14, False), (15, 15, True)])
def test_size_threshold_is_strict(min_size, size, kept):
    a = island((20, 20, 20), (5, 2, 2), size, value=2)
    out = filter_small_components(lv(a), min_size)
    assert (out.voxels > 0).any() == kept


def test_min_size_zero_is_identity(rng):
    a = lv(rng.integers(0, 4, (6, 6, 6)).astype(np.uint8))
    assert filter_small_components(a, 0) == a


def test_only_large_component_survives():
    a = island((30, 30, 30), (2, 2, 2), 10, value=3)
    b = np.zeros_like(a)
    b[15:25, 10:20, 5:10] = 2  # 500 voxels
    out = filter_small_components(lv(a + b), 15)
    assert np.array_equal(out.voxels, b)


def test_size_filter_uses_whole_tumor_foreground():
    # a 6-voxel ET cap on a big ED blob survives: the island is the whole tumor
    a = np.zeros((20, 20, 20), np.uint8)
    a[5:15, 5:15, 5:10] = 2
    a[5:7, 5:8, 10] = 3
    assert filter_small_components(lv(a), 100) == lv(a)


def test_per_region_small_et_becomes_ncr():
    a = np.zeros((20, 20, 20), np.uint8)
    a[2:12, 2:12, 2:8] = 2
    a[3:9, 3:9, 3:7] = 1  # 144-voxel NCR core
    a[4:6, 4:6, 4:6] = 3  # 8-voxel ET island inside it
    out = filter_small_components(lv(a), 10, per_region=True).voxels
    assert (out[4:6, 4:6, 4:6] == 1).all()
    assert np.array_equal(out > 0, a > 0)


def test_per_region_small_tc_becomes_ed():
    a = np.zeros((20, 20, 20), np.uint8)
    a[2:12, 2:12, 2:8] = 2
    a[3:5, 3:5, 3:5] = 1
    out = filter_small_components(lv(a), 10, per_region=True).voxels
    assert (out[3:5, 3:5, 3:5] == 2).all()


def _ratio_case(n_et, n_wt=100):
    a = np.zeros(n_wt, np.uint8)
    a[:] = 2
    a[:n_et] = 3
    a[n_et:n_et + 10] = 1
    return lv(a.reshape(n_wt, 1, 1))


def test_et_rule_fires_below_threshold():
    v = _ratio_case(3)
    out = ratio_relabel(v, [ET_WT_RULE])
    assert not region_mask(out, "ET").voxels.any()
    assert region_mask(out, "TC") == region_mask(v, "TC")
    assert region_mask(out, "WT") == region_mask(v, "WT")


def test_et_rule_silent_at_or_above_threshold():
    assert ratio_relabel(_ratio_case(5), [ET_WT_RULE]) == _ratio_case(5)
    assert ratio_relabel(_ratio_case(4), [ET_WT_RULE]) == _ratio_case(4)  # 0.04 is not below 0.04


def test_empty_denominator_skips_rules():
    v = lv(np.zeros((4, 4, 4), np.uint8))
    assert ratio_relabel(v, [ET_WT_RULE, ED_WT_RULE]) == v


def test_ed_rule_at_one_converts_ed_unless_pure_edema():
    v = _ratio_case(10)
    out = ratio_relabel(v, [ED_WT_RULE]).voxels
    assert not (out == 2).any()
    pure = lv(np.full((3, 3, 3), 2, np.uint8))
    assert ratio_relabel(pure, [ED_WT_RULE]) == pure


def test_rule_validation():
    with pytest.raises(ConfigError):
        RatioRule("WT", "ET", 0.1, 3, 1)
    with pytest.raises(ConfigError):
        RatioRule("ET", "WT", 1.5, 3, 1)
    with pytest.raises(ConfigError):
        RatioRule("ET", "WT", 0.1, 3, 3)
    with pytest.raises(ConfigError):
        RatioRule("XX", "WT", 0.1, 3, 1)


def test_config_from_mapping_layers_over_preset():
    cfg = PostprocessConfig.from_mapping({"preset": "ped", "min_component_size": 50})
    assert cfg.min_component_size == 50 and len(cfg.rules) == 2
    with pytest.raises(ConfigError):
        PostprocessConfig.from_mapping({"min_size": 3})
    with pytest.raises(ConfigError):
        PostprocessConfig(connectivity=8)
    assert PostprocessConfig.from_mapping(cfg.to_dict()) == cfg


def test_postprocess_filters_before_relabeling():
    # the small ET-rich island would keep ET/WT above 0.04 if it survived the size filter
    a = np.zeros((40, 40, 40), np.uint8)
    a[5:15, 5:15, 5:15] = 2  # 1000 voxels
    a[5:7, 5:7, 5:7] = 3  # 8 ET voxels inside the big lesion
    a[30:33, 30:33, 30:34] = 3  # 36-voxel ET island
    cfg = PostprocessConfig(min_component_size=50, rules=(ET_WT_RULE,))
    out = postprocess(lv(a), cfg).voxels
    assert not (out == 3).any()
    assert not out[30:, 30:, 30:].any()


def test_dilate_wrapper(rng):
    m = BinaryMask.from_array(rng.random((6, 6, 6)) < 0.1)
    assert dilate(m, 0) == m
    with pytest.raises(ConfigError):
        dilate(m, -1)


@settings(max_examples=60, deadline=None)
@given(label_arrays, st.integers(0, 20), st.sampled_from([6, 18, 26]), st.booleans())
def test_filter_only_removes_and_is_idempotent(a, min_size, conn, per_region):
    v = lv(a)
    out = filter_small_components(v, min_size, conn, per_region)
    assert not ((out.voxels > 0) & (a == 0)).any()
    assert filter_small_components(out, min_size, conn, per_region) == out
    for r in ("ET", "TC", "WT"):
        assert not (region_mask(out, r).voxels & ~region_mask(v, r).voxels).any()


@settings(max_examples=60, deadline=None)
@given(label_arrays, st.floats(0, 1))
def test_et_rule_keeps_tc_and_wt(a, threshold):
    v = lv(a)
    out = ratio_relabel(v, [RatioRule("ET", "WT", threshold, 3, 1)])
    assert np.count_nonzero(out.voxels) == np.count_nonzero(a)
    assert region_mask(out, "TC") == region_mask(v, "TC")
    assert region_mask(out, "WT") == region_mask(v, "WT")
