"""2-D real grids and the image operations built on them.

Grids are plain ``numpy`` arrays of shape ``(H, W)``; several functions also
accept a leading batch axis ``(B, H, W)``.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

MCT1_MAGIC = b"MCT1"

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class InvalidKernelError(ValueError):
    pass


class InvalidParameterError(ValueError):
    pass


def sigmoid_map(logits):
    """Elementwise logistic function, stable for large |l|."""
    l = np.asarray(logits, dtype=np.float64)
    out = np.empty_like(l)
    pos = l >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-l[pos]))
    e = np.exp(l[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def conv2d_same(img, kernel) -> np.ndarray:
    """Same-size 2-D convolution with reflect padding.

    The kernel is flipped (true convolution), so an impulse reproduces the
    kernel around it.  ``img`` may carry leading batch axes.
    """
    img = np.asarray(img, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if kernel.ndim != 2:
        raise InvalidKernelError("kernel must be 2-D")
    kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise InvalidKernelError(f"kernel dimensions must be odd, got {kernel.shape}")
    rh, rw = kh // 2, kw // 2
    pad = [(0, 0)] * (img.ndim - 2) + [(rh, rh), (rw, rw)]
    padded = np.pad(img, pad, mode="reflect")
    windows = sliding_window_view(padded, (kh, kw), axis=(-2, -1))
    return np.einsum("...ij,ij->...", windows, kernel[::-1, ::-1])


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Normalized isotropic Gaussian on a ``(2r+1, 2r+1)`` support."""
    if not sigma > 0:
        raise InvalidParameterError(f"sigma must be positive, got {sigma}")
    if radius < 0:
        raise InvalidParameterError(f"radius must be non-negative, got {radius}")
    r = int(radius)
    ax = np.arange(-r, r + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def gaussian_blur(img, sigma: float, truncate: float = 3.0) -> np.ndarray:
    return conv2d_same(img, gaussian_kernel(sigma, int(np.ceil(truncate * sigma))))


def box_mean(img, window: int) -> np.ndarray:
    if window < 1 or window % 2 == 0:
        raise InvalidKernelError(f"window must be a positive odd integer, got {window}")
    return conv2d_same(img, np.full((window, window), 1.0 / window**2))


def edge_map(x) -> np.ndarray:
    """Sobel gradient magnitude scaled by its per-image maximum into [0, 1]."""
    x = np.asarray(x, dtype=np.float64)
    gx = conv2d_same(x, SOBEL_X)
    gy = conv2d_same(x, SOBEL_Y)
    mag = np.hypot(gx, gy)
    peak = mag.max(axis=(-2, -1), keepdims=True)
    return mag / (peak + 1e-8)


# -- file formats -----------------------------------------------------------

def write_mct1(path, arr) -> None:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MCT1_MAGIC)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes(order="C"))


def read_mct1(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != MCT1_MAGIC:
        raise ValueError(f"{path}: not an MCT1 file")
    (ndim,) = struct.unpack_from("<I", data, 4)
    dims = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(dims)) if dims else 1
    if len(data) != offset + 4 * count:
        raise ValueError(f"{path}: truncated MCT1 payload")
    return np.frombuffer(data, dtype="<f4", offset=offset, count=count).reshape(dims).astype(np.float32)


def write_pgm_mask(path, mask) -> None:
    m = np.asarray(mask)
    if m.ndim != 2:
        raise ValueError("PGM masks must be 2-D")
    body = np.where(m > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode("ascii"))
        fh.write(body.tobytes())


def _pgm_tokens(data: bytes):
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary (P5) PGM; returns raw integer values and maxval."""
    data = Path(path).read_bytes()
    tokens, offset = _pgm_tokens(data)
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return arr.astype(np.int64), maxval


def read_pgm_mask(path) -> np.ndarray:
    arr, _ = read_pgm(path)
    return (arr > 0).astype(np.uint8)


def read_patch(path) -> np.ndarray:
    """Load an image patch as float64 in [-1, 1] from MCT1 or PGM."""
    p = Path(path)
    if p.suffix.lower() == ".pgm":
        arr, maxval = read_pgm(p)
        return arr.astype(np.float64) / maxval * 2.0 - 1.0
    return np.clip(read_mct1(p).astype(np.float64), -1.0, 1.0)
