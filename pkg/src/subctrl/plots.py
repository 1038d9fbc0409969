"""Portable graymap (PGM) heatmaps of nodal vectors."""

from __future__ import annotations

import os

import numpy as np

from .grid import GridDomain


def to_gray(image: np.ndarray) -> np.ndarray:
    """Scale finite values linearly onto 0..255; a constant image maps to 128.

    NaN entries (masked-out nodes) become 0.
    """
    image = np.asarray(image, dtype=float)
    out = np.zeros(image.shape, dtype=np.uint8)
    ok = np.isfinite(image)
    if not ok.any():
        return out
    lo, hi = image[ok].min(), image[ok].max()
    if hi - lo <= 1e-12 * max(abs(hi), abs(lo), 1e-300):
        out[ok] = 128
    else:
        out[ok] = np.rint(255 * (image[ok] - lo) / (hi - lo)).astype(np.uint8)
    return out


def write_pgm(path, image) -> None:
    """Write a 2-D array as binary PGM (P5). Row 0 is the top of the image."""
    gray = to_gray(np.atleast_2d(image))
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path} is not a binary PGM file")
    w, h = int(parts[1]), int(parts[2])
    return np.frombuffer(parts[4][: w * h], dtype=np.uint8).reshape(h, w)


def full_grid(G: GridDomain, v) -> np.ndarray:
    """Scatter active-node values onto the full node array; inactive = NaN."""
    out = np.full(G.shape, np.nan)
    out.ravel()[G.active_flat] = np.asarray(v, dtype=float)
    return out


def heatmap_slices(G: GridDomain, v) -> dict:
    """2-D images of a nodal vector keyed by suffix.

    For d = 2 the single image has x1 along columns and x2 increasing
    upward. For d = 3 the three axis-aligned mid-slices are returned.
    """
    arr = full_grid(G, v)
    if G.dimension == 1:
        return {"": arr[None, :]}
    if G.dimension == 2:
        return {"": arr.T[::-1]}
    out = {}
    for k in range(G.dimension):
        index = [slice(None)] * G.dimension
        index[k] = G.shape[k] // 2
        sl = arr[tuple(index)]
        while sl.ndim > 2:
            sl = sl[..., sl.shape[-1] // 2]
        out[f"_x{k + 1}mid"] = sl.T[::-1]
    return out


def write_heatmaps(outdir, stem: str, G: GridDomain, v) -> list:
    """Write the heatmap(s) of ``v`` and return the file names."""
    names = []
    for suffix, image in heatmap_slices(G, v).items():
        name = f"{stem}{suffix}.pgm"
        write_pgm(os.path.join(outdir, name), image)
        names.append(name)
    return names


def write_series(path, header, rows) -> None:
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(x)) if not isinstance(x, int) else str(x) for x in row))
            fh.write("\n")
