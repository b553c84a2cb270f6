import os

import numpy as np
from PIL import Image
from scipy import ndimage

RASTER_SIZE = 224


def minmax_rescale(values):
    """
    Rescales an array to [0, 1] over all its entries.

    A degenerate range (max == min, including all-zero input) maps to a
    uniform 0.5 raster so the output never contains NaN.
    """
    values = np.asarray(values, dtype=np.float64)
    lo = values.min()
    hi = values.max()
    if not hi > lo:
        return np.full(values.shape, 0.5)
    return np.clip((values - lo) / (hi - lo), 0.0, 1.0)


def block_mean(x, n_out, axis=-1):
    """
    Decimates `x` along `axis` to `n_out` samples by averaging contiguous blocks.

    Block k covers [floor(k*n/n_out), floor((k+1)*n/n_out)). The boxcar average
    is the anti-alias filter.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[axis]
    if n < n_out:
        raise ValueError(f"cannot decimate {n} samples to {n_out}")
    edges = (np.arange(n_out + 1) * n) // n_out
    sums = np.add.reduceat(x, edges[:-1], axis=axis)
    shape = [1] * x.ndim
    shape[axis] = n_out
    return sums / np.diff(edges).reshape(shape)


def resize_bilinear(matrix, shape=(RASTER_SIZE, RASTER_SIZE)):
    """Bilinear resampling with corner-aligned grids (first/last rows and columns map onto each other)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    rows = np.linspace(0.0, matrix.shape[0] - 1, shape[0])
    cols = np.linspace(0.0, matrix.shape[1] - 1, shape[1])
    grid_r, grid_c = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(matrix, [grid_r, grid_c], order=1, mode="nearest")


def upsample_nearest(matrix, shape=(RASTER_SIZE, RASTER_SIZE)):
    """Nearest-neighbour upsampling; each source cell becomes a uniform block."""
    matrix = np.asarray(matrix, dtype=np.float64)
    row_idx = (np.arange(shape[0]) * matrix.shape[0]) // shape[0]
    col_idx = (np.arange(shape[1]) * matrix.shape[1]) // shape[1]
    return matrix[np.ix_(row_idx, col_idx)]


def write_png(pixels, path):
    """Writes a [0,1] raster as an 8-bit grayscale PNG."""
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    data = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")
    return path


def read_png(path):
    """Reads an 8-bit grayscale PNG back into a [0,1] float raster."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.float64) / 255.0
