"""File outputs: PGM rasters, posterior summaries and run manifests."""
from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np

from .mesh import TriMesh

__all__ = ["rasterize", "rasterize_function", "write_pgm", "read_pgm", "write_posterior_summary",
           "read_posterior_summary", "git_blob_hash", "write_manifest"]

PGM_MAX = 255


def _pixel_centres(resolution: int):
    c = -1.0 + (np.arange(resolution) + 0.5) * (2.0 / resolution)
    X1, X2 = np.meshgrid(c, c[::-1])
    pts = np.column_stack([X1.ravel(), X2.ravel()])
    inside = X1.ravel() ** 2 + X2.ravel() ** 2 < 1.0
    return pts, inside


def rasterize(mesh: TriMesh, coeffs, resolution: int = 256) -> np.ndarray:
    """``resolution^2`` image of a P1 function; NaN outside the unit disk, row 0 at the top."""
    pts, inside = _pixel_centres(resolution)
    img = np.full(resolution * resolution, np.nan)
    img[inside] = mesh.evaluate(coeffs, pts[inside], extend=True)
    return img.reshape(resolution, resolution)


def rasterize_function(func, resolution: int = 256) -> np.ndarray:
    pts, inside = _pixel_centres(resolution)
    img = np.full(resolution * resolution, np.nan)
    img[inside] = func(pts[inside])
    return img.reshape(resolution, resolution)


def write_pgm(path, image, comment: str = "") -> tuple[float, float]:
    """Linear grayscale P2 over ``[min, max]`` of the finite pixels; NaN pixels map to 0.

    The range is recorded in a ``# range vmin vmax`` header comment.
    """
    img = np.asarray(image, dtype=float)
    finite = np.isfinite(img)
    if not finite.any():
        raise ValueError("image has no finite pixels")
    vmin, vmax = float(img[finite].min()), float(img[finite].max())
    span = vmax - vmin
    scaled = np.zeros(img.shape, dtype=int)
    if span > 0:
        scaled[finite] = np.rint((img[finite] - vmin) / span * PGM_MAX).astype(int)
    h, w = img.shape
    with open(path, "w") as fh:
        fh.write("P2\n")
        fh.write(f"# range {vmin:.17g} {vmax:.17g}\n")
        if comment:
            for line in comment.splitlines():
                fh.write(f"# {line}\n")
        fh.write(f"{w} {h}\n{PGM_MAX}\n")
        for row in scaled:
            fh.write(" ".join(map(str, row)) + "\n")
    return vmin, vmax


def read_pgm(path):
    """Return ``(pixels, (vmin, vmax))`` from a file written by :func:`write_pgm`."""
    rng = None
    tokens = []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 3 and parts[0] == "range":
                    rng = (float(parts[1]), float(parts[2]))
                continue
            tokens.extend(line.split())
    if not tokens or tokens[0] != "P2":
        raise ValueError("not a P2 PGM file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pix = np.array(tokens[4:], dtype=int)
    if pix.size != w * h or pix.max(initial=0) > maxval:
        raise ValueError("PGM payload does not match its header")
    return pix.reshape(h, w), rng


def write_posterior_summary(path, post, nu: float, ell: float, seed) -> None:
    meta = post.meta
    with open(path, "w") as fh:
        fh.write(f"# epsilon {meta['epsilon']:.17g}\n")
        fh.write(f"# sigma {meta['sigma']:.17g}\n")
        fh.write(f"# nu {nu:.17g}\n# ell {ell:.17g}\n")
        fh.write(f"# m {meta['m']}\n# n {meta['n']}\n# seed {seed}\n")
        for v in post.mean:
            fh.write(f"{v:.17g}\n")


def read_posterior_summary(path):
    header, vals = {}, []
    with open(path) as fh:
        for line in fh:
            if line.startswith("#"):
                k, v = line[1:].split()
                header[k] = v
            elif line.strip():
                vals.append(float(line))
    return header, np.array(vals)


def git_blob_hash(data: bytes) -> str:
    """Content hash computed the way ``git hash-object`` does."""
    h = hashlib.sha1()
    h.update(b"blob %d\0" % len(data))
    h.update(data)
    return h.hexdigest()


def write_manifest(outdir, config_text: str, inputs=(), outputs=()) -> Path:
    """Config echo plus content hashes of inputs and outputs, in sorted order."""
    outdir = Path(outdir)
    lines = ["# config"] + [f"  {ln}" for ln in config_text.strip().splitlines()]
    lines.append(f"config_hash {git_blob_hash(config_text.encode())}")
    for label, group in (("input", inputs), ("output", outputs)):
        for p in sorted(map(Path, group), key=lambda q: q.name):
            lines.append(f"{label} {p.name} {git_blob_hash(p.read_bytes())}")
    path = outdir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
