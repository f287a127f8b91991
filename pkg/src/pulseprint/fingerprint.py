"""Fingerprint edge-image extraction from fingertip video frames.

Per frame: CLAHE contrast enhancement, then Canny edges. Per beat: edge maps
over the beat's frame span are averaged pixel-wise, center-cropped square,
area-average downsampled to 64x64 and scaled to [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import InputError
from .ppg import FrameStack

FP_SIZE = 64

CLAHE_CLIP = 2.0
CLAHE_TILES = 8
CANNY_SIGMA = 1.4
CANNY_HI_PERCENTILE = 99.0
CANNY_HI_FACTOR = 0.7
CANNY_LO_FACTOR = 0.4


def to_grayscale(rgb_frame: np.ndarray) -> np.ndarray:
    """Luminance = round(0.299 R + 0.587 G + 0.114 B), uint8."""
    rgb = np.asarray(rgb_frame)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise InputError("expected an (H, W, 3) frame")
    lum = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.round(lum).astype(np.uint8)


def clahe(img: np.ndarray, clip: float = CLAHE_CLIP, tiles: int = CLAHE_TILES) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization, 8-bit in/out.

    Per-tile histograms are clipped at clip * (tile pixels / 256) with the
    excess redistributed uniformly; per-pixel output bilinearly interpolates
    the four neighboring tile mappings. Constant images pass through.
    """
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    if h < tiles or w < tiles:
        raise InputError("image smaller than the tile grid")
    if img.min() == img.max():
        return img.copy()

    ys = np.linspace(0, h, tiles + 1).astype(int)
    xs = np.linspace(0, w, tiles + 1).astype(int)
    luts = np.empty((tiles, tiles, 256), dtype=np.float64)
    for i in range(tiles):
        for j in range(tiles):
            tile = img[ys[i] : ys[i + 1], xs[j] : xs[j + 1]]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            occupied = int((hist > 0).sum())
            if occupied <= 1:
                luts[i, j] = np.arange(256)  # flat tile: identity mapping
                continue
            # clip at clip x the mean occupied-bin height, redistribute
            limit = max(1.0, clip * tile.size / occupied)
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / 256.0
            cdf = np.cumsum(hist) / hist.sum()
            cdf_min = cdf[int(tile.min())]
            luts[i, j] = np.round(
                255.0 * np.clip(cdf - cdf_min, 0.0, None) / (1.0 - cdf_min)
            )

    cy = (ys[:-1] + ys[1:]) / 2.0
    cx = (xs[:-1] + xs[1:]) / 2.0
    yy = np.arange(h, dtype=np.float64)
    xx = np.arange(w, dtype=np.float64)
    i1 = np.clip(np.searchsorted(cy, yy), 0, tiles - 1)
    i0 = np.maximum(i1 - 1, 0)
    j1 = np.clip(np.searchsorted(cx, xx), 0, tiles - 1)
    j0 = np.maximum(j1 - 1, 0)
    wy = np.where(i1 > i0, (yy - cy[i0]) / np.maximum(cy[i1] - cy[i0], 1e-12), 0.0)
    wx = np.where(j1 > j0, (xx - cx[j0]) / np.maximum(cx[j1] - cx[j0], 1e-12), 0.0)
    wy = np.clip(wy, 0.0, 1.0)[:, None]
    wx = np.clip(wx, 0.0, 1.0)[None, :]

    v = img
    i0g, i1g = i0[:, None], i1[:, None]
    j0g, j1g = j0[None, :], j1[None, :]
    out = (
        (1 - wy) * (1 - wx) * luts[i0g, j0g, v]
        + (1 - wy) * wx * luts[i0g, j1g, v]
        + wy * (1 - wx) * luts[i1g, j0g, v]
        + wy * wx * luts[i1g, j1g, v]
    )
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def _gaussian_kernel5(sigma: float) -> np.ndarray:
    m = np.arange(5) - 2.0
    k = np.exp(-(m * m) / (2.0 * sigma * sigma))
    return k / k.sum()


def _conv2_sep(img: np.ndarray, k: np.ndarray) -> np.ndarray:
    pad = len(k) // 2
    ext = np.pad(img, pad, mode="edge")
    h, w = img.shape
    tmp = np.zeros((h + 2 * pad, w), dtype=np.float64)
    for i, kv in enumerate(k):
        tmp += kv * ext[:, i : i + w]
    out = np.zeros((h, w), dtype=np.float64)
    for i, kv in enumerate(k):
        out += kv * tmp[i : i + h, :]
    return out


def canny(img: np.ndarray, lo: float | None = None, hi: float | None = None,
          sigma: float = CANNY_SIGMA) -> np.ndarray:
    """Canny edges: Gaussian 5x5 smooth, Sobel, NMS, hysteresis. Output in {0, 1}.

    Thresholds default to hi = 0.7 * (99th percentile gradient magnitude),
    lo = 0.4 * hi, adapting to exposure.
    """
    x = np.asarray(img, dtype=np.float64)
    sm = _conv2_sep(x, _gaussian_kernel5(sigma))

    p = np.pad(sm, 1, mode="edge")
    gx = (
        p[:-2, 2:] + 2 * p[1:-1, 2:] + p[2:, 2:]
        - p[:-2, :-2] - 2 * p[1:-1, :-2] - p[2:, :-2]
    )
    gy = (
        p[2:, :-2] + 2 * p[2:, 1:-1] + p[2:, 2:]
        - p[:-2, :-2] - 2 * p[:-2, 1:-1] - p[:-2, 2:]
    )
    mag = np.hypot(gx, gy)

    if hi is None:
        hi = CANNY_HI_FACTOR * np.percentile(mag, CANNY_HI_PERCENTILE)
        # 8-bit inputs: genuine edges have O(1) gradients, anything below
        # this floor is smoothing residue on a flat image
        if hi < 1e-6:
            return np.zeros_like(mag)
    if lo is None:
        lo = CANNY_LO_FACTOR * hi
    if not 0 <= lo < hi:
        raise InputError("canny thresholds require 0 <= lo < hi")

    # non-maximum suppression over 4 quantized directions
    ang = np.mod(np.degrees(np.arctan2(gy, gx)), 180.0)
    mp = np.pad(mag, 1, mode="constant")
    c = mp[1:-1, 1:-1]
    neigh = {
        0: (mp[1:-1, 2:], mp[1:-1, :-2]),
        1: (mp[:-2, 2:], mp[2:, :-2]),
        2: (mp[:-2, 1:-1], mp[2:, 1:-1]),
        3: (mp[:-2, :-2], mp[2:, 2:]),
    }
    sector = np.zeros(ang.shape, dtype=int)
    sector[(ang >= 22.5) & (ang < 67.5)] = 1
    sector[(ang >= 67.5) & (ang < 112.5)] = 2
    sector[(ang >= 112.5) & (ang < 157.5)] = 3
    keep = np.zeros(mag.shape, dtype=bool)
    for s, (a, b) in neigh.items():
        m = sector == s
        keep |= m & (c >= a) & (c >= b)
    nms = np.where(keep, mag, 0.0)

    strong = nms >= hi
    weak = (nms >= lo) & ~strong
    edges = strong.copy()
    while True:
        ep = np.pad(edges, 1, mode="constant")
        grow = (
            ep[:-2, :-2] | ep[:-2, 1:-1] | ep[:-2, 2:]
            | ep[1:-1, :-2] | ep[1:-1, 2:]
            | ep[2:, :-2] | ep[2:, 1:-1] | ep[2:, 2:]
        )
        new = edges | (weak & grow)
        if np.array_equal(new, edges):
            break
        edges = new
    return edges.astype(np.float64)


def frame_edge_map(img: np.ndarray, lo=None, hi=None,
                   clip: float = CLAHE_CLIP, tiles: int = CLAHE_TILES) -> np.ndarray:
    """CLAHE then Canny for one frame."""
    return canny(clahe(img, clip=clip, tiles=tiles), lo=lo, hi=hi)


def area_downsample(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Anti-aliased downsample by exact area averaging (partition of unity)."""

    def along(x, m):
        n = x.shape[0]
        c = np.concatenate([np.zeros((1,) + x.shape[1:]), np.cumsum(x, axis=0)])
        pos = np.linspace(0.0, n, m + 1)
        idx = np.minimum(pos.astype(int), n)
        frac = pos - idx
        vals = c[idx] + np.where(idx < n, frac, 0.0)[(...,) + (None,) * (x.ndim - 1)] * (
            x[np.minimum(idx, n - 1)]
        )
        return (vals[1:] - vals[:-1]) * (m / n)

    img = np.asarray(img, dtype=np.float64)
    tmp = along(img, out_h)
    return along(tmp.T, out_w).T


def center_crop_square(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    s = min(h, w)
    top = (h - s) // 2
    left = (w - s) // 2
    return img[top : top + s, left : left + s]


def beat_synchronized_fingerprint(stack: FrameStack, beat_span, edges=None,
                                  size: int = FP_SIZE) -> np.ndarray:
    """Fingerprint image for one beat: mean edge map over the beat's frames.

    edges may carry precomputed per-frame edge maps (F, H, W) to avoid
    repeating CLAHE/Canny across beats.
    """
    a, b = beat_span
    f = stack.frames.shape[0]
    if not (0 <= a < b <= f):
        raise InputError("beat span outside the frame stack")
    if edges is None:
        acc = np.zeros(stack.frames.shape[1:], dtype=np.float64)
        for t in range(a, b):
            acc += frame_edge_map(stack.frames[t])
        mean_map = acc / (b - a)
    else:
        mean_map = edges[a:b].mean(axis=0, dtype=np.float64)
    fp = area_downsample(center_crop_square(mean_map), size, size)
    peak = fp.max()
    if peak > 0:
        fp = fp / peak
    return fp


def flatten(fp: np.ndarray) -> np.ndarray:
    """Row-major pixel sequence: (r, c) -> index size*r + c."""
    fp = np.asarray(fp)
    return fp.reshape(-1)


def unflatten(seq: np.ndarray, size: int = FP_SIZE) -> np.ndarray:
    return np.asarray(seq).reshape(size, size)


# --- PGM (P5, binary, maxval 255) ------------------------------------------

def write_pgm(path, img: np.ndarray):
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.find(b"\n", pos) + 1
            continue
        end = pos
        while end < len(blob) and not blob[end : end + 1].isspace():
            end += 1
        fields.append(blob[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise InputError(f"{path}: unsupported maxval {maxval}")
    pos += 1
    data = np.frombuffer(blob[pos : pos + w * h], dtype=np.uint8)
    if data.size != w * h:
        raise InputError(f"{path}: truncated pixel payload")
    return data.reshape(h, w).copy()
