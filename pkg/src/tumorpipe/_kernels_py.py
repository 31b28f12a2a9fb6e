"""numpy/scipy implementations of the compiled kernels, used when the extension is unavailable."""
import numpy as np
from scipy import ndimage

_RANK = {6: 1, 18: 2, 26: 3}


def label_components(mask, connectivity=26):
    if connectivity not in _RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, _RANK[connectivity])
    labels, n = ndimage.label(np.asarray(mask, dtype=bool), structure=structure, output=np.int32)
    if n > 1:
        # force ids into order of first appearance in a C-order scan
        flat = labels.ravel()
        fg = np.flatnonzero(flat)
        _, first = np.unique(flat[fg], return_index=True)
        order = np.argsort(fg[first], kind="stable")
        if np.any(order != np.arange(n)):
            remap = np.zeros(n + 1, dtype=np.int32)
            remap[order + 1] = np.arange(1, n + 1, dtype=np.int32)
            labels = remap[labels]
    return labels, int(n)


def dilate_cube(mask, radius):
    if radius < 0:
        raise ValueError("radius must be non-negative")
    arr = np.asarray(mask, dtype=bool)
    if radius == 0 or arr.size == 0:
        return arr.copy()
    out = ndimage.maximum_filter(arr.view(np.uint8), size=2 * radius + 1, mode="constant", cval=0)
    return out.view(bool)
