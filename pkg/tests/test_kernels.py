import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import brute_dilate, flood_fill_components, partition_of
from tumorpipe import kernels


@pytest.mark.parametrize("connectivity", [6, 18, 26])
def test_components_match_flood_fill(backend, connectivity, rng):
    for _ in range(10):
        mask = rng.random((9, 10, 11)) < 0.3
        ids, n = backend.label_components(mask, connectivity)
        assert n == int(ids.max())
        assert partition_of(ids) == set(flood_fill_components(mask, connectivity))


def test_component_ids_follow_first_appearance(backend, rng):
    mask = rng.random((10, 10, 10)) < 0.25
    ids, n = backend.label_components(mask, 6)
    flat = ids.ravel()
    first = [flat[flat > 0][0]]
    for v in flat[flat > 0]:
        if v not in first:
            first.append(v)
    assert first == list(range(1, n + 1))


def test_backends_agree(rng):
    if "cython" not in kernels.BACKENDS:
        pytest.skip("compiled kernels not built")
    py, cy = kernels.BACKENDS["python"], kernels.BACKENDS["cython"]
    for conn in (6, 18, 26):
        mask = rng.random((20, 17, 13)) < 0.4
        a, na = py.label_components(mask, conn)
        b, nb = cy.label_components(mask, conn)
        assert na == nb and np.array_equal(a, b)
    for r in range(4):
        mask = rng.random((15, 16, 9)) < 0.05
        assert np.array_equal(py.dilate_cube(mask, r), cy.dilate_cube(mask, r))


def test_empty_mask_has_no_components(backend):
    ids, n = backend.label_components(np.zeros((4, 4, 4), bool), 26)
    assert n == 0 and not ids.any()


def test_diagonal_neighbors_depend_on_connectivity(backend):
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 0] = True  # edge neighbors
    assert backend.label_components(m, 6)[1] == 2
    assert backend.label_components(m, 18)[1] == 1
    m = np.zeros((3, 3, 3), bool)
    m[0, 0, 0] = m[1, 1, 1] = True  # corner neighbors
    assert backend.label_components(m, 18)[1] == 2
    assert backend.label_components(m, 26)[1] == 1


def test_dilate_radius_zero_is_identity(backend, rng):
    m = rng.random((6, 7, 8)) < 0.2
    assert np.array_equal(backend.dilate_cube(m, 0), m)


def test_dilate_single_voxel_gives_clipped_block(backend):
    m = np.zeros((5, 5, 5), bool)
    m[0, 2, 4] = True
    out = backend.dilate_cube(m, 1)
    expected = np.zeros_like(m)
    expected[0:2, 1:4, 3:5] = True
    assert np.array_equal(out, expected)


@pytest.mark.parametrize("radius", [1, 2])
def test_dilate_matches_brute_force(backend, radius, rng):
    for _ in range(3):
        m = rng.random((8, 9, 7)) < 0.04
        assert np.array_equal(backend.dilate_cube(m, radius), brute_dilate(m, radius))


def test_dilate_does_not_modify_input(backend):
    m = np.zeros((5, 5, 5), bool)
    m[2, 2, 2] = True
    before = m.copy()
    backend.dilate_cube(m, 2)
    assert np.array_equal(m, before)


masks = arrays(bool, st.tuples(*[st.integers(1, 7)] * 3), elements=st.booleans())


@settings(max_examples=60, deadline=None)
@given(masks, st.sampled_from([6, 18, 26]))
def test_components_property(mask, connectivity):
    ids, n = kernels.label_components(mask, connectivity)
    assert np.array_equal(ids > 0, mask)
    assert set(np.unique(ids[ids > 0])) == set(range(1, n + 1))
    assert partition_of(ids) == set(flood_fill_components(mask, connectivity))


@settings(max_examples=60, deadline=None)
@given(masks, st.integers(0, 3))
def test_dilation_property(mask, radius):
    out = kernels.dilate_cube(mask, radius)
    assert np.array_equal(out, brute_dilate(mask, radius))
    # monotone and extensive
    assert not (mask & ~out).any()
