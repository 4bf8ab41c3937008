"""Sliding-window neighbourhood matrices and whole-image RLRMF denoising."""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import FeatureImage
from .rlrmf import EmConfig, EmTrace, fit_batch, trace_of

log = logging.getLogger(__name__)

DEFAULT_WINDOW = 7
DEFAULT_RANK = 2


@dataclass(frozen=True)
class PatchMatrix:
    """d x s^2 neighbourhood matrix; columns run row-major over the window."""

    data: np.ndarray
    origin: tuple
    window: int

    @property
    def center_index(self) -> int:
        return (self.window * self.window - 1) // 2

    @property
    def center(self) -> np.ndarray:
        return self.data[:, self.center_index]


def _check_window(s):
    if s < 1 or s % 2 == 0:
        raise ValueError(f"window size must be a positive odd integer, got {s}")


def mirror_pad(x: np.ndarray, half: int) -> np.ndarray:
    """Reflect about the border pixel (the border itself is not repeated)."""
    if half == 0:
        return x
    h, w = x.shape[:2]
    if half >= h or half >= w:
        raise ValueError(f"image {h}x{w} too small for a mirror margin of {half}")
    pad = [(half, half), (half, half)] + [(0, 0)] * (x.ndim - 2)
    return np.pad(x, pad, mode="reflect")


def extract_patch(img: FeatureImage, i: int, j: int, s: int) -> PatchMatrix:
    _check_window(s)
    if not (0 <= i < img.height and 0 <= j < img.width):
        raise IndexError(f"pixel ({i}, {j}) outside {img.height}x{img.width} image")
    half = s // 2
    padded = mirror_pad(img.data, half)
    block = padded[i:i + s, j:j + s, :]
    return PatchMatrix(block.reshape(s * s, -1).T.copy(), (i, j), s)


def patch_stack(img: FeatureImage, s: int, rows=None) -> np.ndarray:
    """All patch matrices of the given rows as a (n_pixels, d, s^2) array."""
    _check_window(s)
    half = s // 2
    padded = mirror_pad(img.data, half)
    win = sliding_window_view(padded, (s, s), axis=(0, 1))  # (H, W, D, s, s)
    if rows is not None:
        win = win[rows]
    d = img.depth
    return win.reshape(-1, d, s * s)


@dataclass
class DenoiseResult:
    image: FeatureImage
    fallback_count: int
    iterations: np.ndarray


def _pixel_seeds(seed, flat_index):
    return [(seed, int(k)) for k in flat_index]


def denoise_image(img: FeatureImage, window: int = DEFAULT_WINDOW, cfg: EmConfig = EmConfig(),
                  chunk: int = 1024, threads: int = 1) -> DenoiseResult:
    """Replace every pixel by the centre column of its patch's robust rank-r fit.

    Pixels are independent; each fit seeds its RNG from ``(cfg.seed, pixel
    index)``. A pixel whose fit fails keeps its input value and is counted
    in ``fallback_count``.
    """
    _check_window(window)
    if window == 1 or not cfg.rank < min(img.depth, window * window):
        raise ValueError(f"rank {cfg.rank} must be below min(D={img.depth}, s^2={window * window})")
    h, w, d = img.data.shape
    center = (window * window - 1) // 2
    half = window // 2
    padded = mirror_pad(img.data, half)
    win = sliding_window_view(padded, (window, window), axis=(0, 1)).reshape(h * w, d, window * window)

    out = np.empty((h * w, d))
    iters = np.zeros(h * w, dtype=np.int64)
    failed = np.zeros(h * w, dtype=bool)

    def work(start):
        stop = min(start + chunk, h * w)
        S = win[start:stop]
        res = fit_batch(S, cfg, seeds=_pixel_seeds(cfg.seed, range(start, stop)))
        rec = np.einsum("bdr,br->bd", res.U, res.V[:, center, :])
        bad = res.failed | ~np.all(np.isfinite(rec), axis=1)
        rec[bad] = S[bad, :, center]
        out[start:stop] = rec
        iters[start:stop] = res.iterations
        failed[start:stop] = bad

    starts = range(0, h * w, chunk)
    if threads == 1:
        for st in starts:
            work(st)
    else:
        with ThreadPoolExecutor(max_workers=threads or None) as ex:
            list(ex.map(work, starts))

    n_fail = int(failed.sum())
    if n_fail:
        log.warning("denoise: %d of %d pixels fell back to the input value", n_fail, h * w)
    return DenoiseResult(FeatureImage(out.reshape(h, w, d)), n_fail, iters.reshape(h, w))


def pixel_trace(img: FeatureImage, i: int, j: int, window: int = DEFAULT_WINDOW, cfg: EmConfig = EmConfig()) -> EmTrace:
    """EM trace of the fit that ``denoise_image`` runs for pixel (i, j), same seed."""
    p = extract_patch(img, i, j, window)
    res = fit_batch(p.data[None], cfg, seeds=_pixel_seeds(cfg.seed, [i * img.width + j]), record_trace=True)
    return trace_of(res, 0)
