import itertools
from collections import deque

import numpy as np
import pytest

from tumorpipe import kernels

# --------------------------------------------------------------------------- #
# independent oracles


def neighbor_offsets(connectivity):
    offs = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        k = sum(abs(x) for x in d)
        if k == 0:
            continue
        if connectivity == 6 and k > 1 or connectivity == 18 and k > 2:
            continue
        offs.append(d)
    return offs


def flood_fill_components(mask, connectivity):
    """Breadth-first flood fill; returns a list of frozensets of voxel tuples."""
    mask = np.asarray(mask, dtype=bool)
    seen = np.zeros_like(mask)
    offs = neighbor_offsets(connectivity)
    comps = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        comp, queue = [], deque([start])
        while queue:
            v = queue.popleft()
            comp.append(v)
            for d in offs:
                n = tuple(a + b for a, b in zip(v, d))
                if all(0 <= n[i] < mask.shape[i] for i in range(3)) and mask[n] and not seen[n]:
                    seen[n] = True
                    queue.append(n)
        comps.append(frozenset(comp))
    return comps


def partition_of(ids):
    return {frozenset(zip(*np.nonzero(ids == i))) for i in range(1, int(ids.max()) + 1)} if ids.max() else set()


def brute_dilate(mask, radius):
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    pts = np.argwhere(mask)
    for idx in np.ndindex(mask.shape):
        if len(pts) and np.abs(pts - np.array(idx)).max(axis=1).min() <= radius:
            out[idx] = True
    return out


def brute_hd95(p, g, spacing=(1.0, 1.0, 1.0), penalty=374.0):
    """All-pairs distances, pooled directed sets, linear-interpolated 95th percentile."""
    P = np.argwhere(p) * np.asarray(spacing)
    G = np.argwhere(g) * np.asarray(spacing)
    if len(P) == 0 and len(G) == 0:
        return 0.0
    if len(P) == 0 or len(G) == 0:
        return penalty
    d = np.sqrt(((P[:, None, :] - G[None, :, :]) ** 2).sum(-1))
    pooled = np.concatenate([d.min(axis=1), d.min(axis=0)])
    return float(np.percentile(pooled, 95))


def count_dice(p, g):
    p, g = np.asarray(p, bool), np.asarray(g, bool)
    a, b = int(p.sum()), int(g.sum())
    if a + b == 0:
        return 1.0
    return 2 * int((p & g).sum()) / (a + b)


# --------------------------------------------------------------------------- #
# fixtures


@pytest.fixture(params=sorted(kernels.BACKENDS))
def backend(request):
    return kernels.BACKENDS[request.param]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_labels(rng, shape=(12, 12, 12), fill=0.5):
    vox = rng.integers(1, 4, size=shape).astype(np.uint8)
    vox[rng.random(shape) > fill] = 0
    return vox


def box(shape, lo, hi, value=1, dtype=np.uint8):
    a = np.zeros(shape, dtype=dtype)
    a[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = value
    return a


def island(shape, corner, n_voxels, value=1):
    """A 6-connected island of exactly ``n_voxels`` voxels laid out row by row."""
    a = np.zeros(shape, dtype=np.uint8)
    side = int(np.ceil(np.sqrt(n_voxels)))
    for i in range(n_voxels):
        a[corner[0], corner[1] + i // side, corner[2] + i % side] = value
    return a


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
