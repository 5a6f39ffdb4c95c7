"""Bit-exact image file formats: binary PPM (P6) for color, PFM for floats,
and a fixed turbo colormap for visualizing scalar maps.

PFM follows the standard layout: "Pf\\n<width> <height>\\n<scale>\\n" with
scanlines stored bottom-to-top; this package always writes scale -1.0
(little-endian float32). PPM is maxval-255 P6. The turbo table is a frozen
256x3 uint8 quantization so colormapped outputs are stable across
environments.
"""

from __future__ import annotations

import base64
from pathlib import Path

import numpy as np

from .errors import BadMagicError, TruncatedFileError

__all__ = [
    "TURBO_TABLE",
    "read_pfm",
    "read_ppm",
    "turbo_colormap",
    "write_pfm",
    "write_ppm",
]

_TURBO_B64 = (
    "MBI7MhVDMxhKNBtRNR5YNiFfNyRmOCdtOSpzOi15Oy+APDKGPTWLPjiRPzuXPz6cQECiQUOnQUas"
    "QkmxQku1Q066RFG/RFTDRFbHRVnLRVzPRV7TRmHWRmTaRmbdRmngRmvjR27mR3HpR3PrR3buR3jw"
    "R3vyRn30RoD2RoL4RoX6Rof7RYr8RYz9RI/+Q5H+QpT/QZb/QJn/Ppv+PZ7+O6D9OqP8OKX7N6j6"
    "Nav4M633Ma/1L7L0LrTyLLfwKrnuKLzrJ77pJcDnI8PkIsXiIMffH8ndHsvaHM3YG9DVGtLSGtTQ"
    "GdXNGNfKGNnIGNvFGN3CGN7AGOC9GeK7GeO5GuS2HOa0HeeyH+mvIOqsIuuqJeynJ+6kKu+hLPCe"
    "L/GbMvKYNfOUOPSRPPWOP/aKQ/eHRviESviATvl9Uvp6Vfp2WftzXfxvYfxsZf1paf1mbf5icf5f"
    "df5cef5Zff9WgP9ThP9RiP9Oi/9Lj/9Jkv9Hlv5Emf5CnP5An/0/of09pPw8p/w6qfs5rPs4r/o3"
    "sfk2tPg2t/c1ufY1vPU0vvQ0wfM0w/E0xvA0yO80y+00zew00Oo00uk11Oc11+U12eQ22+I23eA3"
    "39834d0349s45dk459c56dU569M57NE67s8678068cs68sk69Mc69cU69sM698E6+L45+bw5+ro5"
    "+7g4+7Y3/LM2/LE2/a41/aw0/qkz/qcy/qQx/qEw/p4v/pst/pks/pYr/pMq/pAp/Y0n/Yom/Icl"
    "/IQj+4Ei+34h+nsf+Xge+XUd+HIc928a9mwZ9WkY9GYX82MV8mAU8V0T8FsS71gR7VUQ7FMP61AO"
    "6k4N6EsM50kM5UcL5EUK4kMK4UEJ3z8I3T0I3DsH2jkH2DcG1jUG1DMF0jEF0C8Fzi0EzCsEyioE"
    "yCgDxSYDwyUDwSMCviECvCACuR4Ctx0CtBsBshoBrxgBrBcBqRYBpxQBpBMBoRIBnhABmw8BmA4B"
    "lQ0BkgsBjgoBiwkCiAgChQcCgQYCfgUCegQD"
)
TURBO_TABLE = np.frombuffer(base64.b64decode(_TURBO_B64), dtype=np.uint8).reshape(256, 3)


def write_ppm(image, path: str | Path) -> None:
    """Write an (H, W, 3) image as binary P6. Float input in [0, 1] is
    quantized by round(x * 255); uint8 input is written as-is."""
    arr = np.asarray(image)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(arr.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file back as (H, W, 3) uint8."""
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise BadMagicError(f"{path}: not a P6 PPM (starts with {data[:2]!r})")
    # Header is three whitespace-separated tokens after the magic; '#' starts a comment.
    pos = 2
    tokens = []
    while len(tokens) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: header ended early")
        tokens.append(data[start:pos])
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = (int(t) for t in tokens)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    need = w * h * 3
    payload = data[pos : pos + need]
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(values: np.ndarray, path: str | Path) -> None:
    """Write an (H, W) float map as grayscale PFM, scale -1.0 (little-endian),
    scanlines bottom-to-top per the format convention."""
    arr = np.asarray(values, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError(f"expected (H, W) map, got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(arr[::-1, :].tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a grayscale PFM back as (H, W) float64 (float32 values preserved)."""
    with open(path, "rb") as f:
        magic = f.readline().rstrip()
        if magic != b"Pf":
            raise BadMagicError(f"{path}: expected grayscale PFM magic b'Pf', got {magic!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise TruncatedFileError(f"{path}: bad dimension line {dims!r}")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        payload = f.read()
    need = w * h * 4
    if len(payload) < need:
        raise TruncatedFileError(f"{path}: payload is {len(payload)} bytes, expected {need}")
    endian = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload[:need], dtype=endian).reshape(h, w)
    return arr[::-1, :].astype(np.float64)


def turbo_colormap(values: np.ndarray, vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Map a scalar field to (H, W, 3) uint8 via the frozen turbo table.

    NaN pixels map to black. With vmin == vmax the whole map takes the
    table's low end.
    """
    arr = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(arr)
    if vmin is None:
        vmin = float(arr[finite].min()) if finite.any() else 0.0
    if vmax is None:
        vmax = float(arr[finite].max()) if finite.any() else 1.0
    span = vmax - vmin
    norm = np.zeros_like(arr) if span <= 0 else (arr - vmin) / span
    idx = np.clip(np.round(np.where(finite, norm, 0.0) * 255.0), 0, 255).astype(np.int64)
    out = TURBO_TABLE[idx]
    out[~finite] = 0
    return out
