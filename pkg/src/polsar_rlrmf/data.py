"""PolSAR data model: coherency pixels, feature rasters, label maps and a
synthetic scene generator.

Feature rasters are stored as ``(H, W, D)`` float64 arrays (pixel-major,
band-interleaved). Label maps use 0 for "no ground truth" and 1..C for
classes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FEATURE_DIM = 9


@dataclass(frozen=True)
class CoherencyPixel:
    """One 3x3 Hermitian coherency matrix, off-diagonals stored once."""

    t11: float
    t22: float
    t33: float
    t12: complex = 0j
    t13: complex = 0j
    t23: complex = 0j

    def __post_init__(self):
        if min(self.t11, self.t22, self.t33) < 0:
            raise ValueError("coherency diagonal must be non-negative")

    def matrix(self) -> np.ndarray:
        t = np.zeros((3, 3), dtype=complex)
        t[0, 0], t[1, 1], t[2, 2] = self.t11, self.t22, self.t33
        t[0, 1], t[0, 2], t[1, 2] = self.t12, self.t13, self.t23
        t[1, 0], t[2, 0], t[2, 1] = np.conj(self.t12), np.conj(self.t13), np.conj(self.t23)
        return t

    @classmethod
    def from_matrix(cls, t) -> "CoherencyPixel":
        t = np.asarray(t)
        return cls(float(t[0, 0].real), float(t[1, 1].real), float(t[2, 2].real),
                   complex(t[0, 1]), complex(t[0, 2]), complex(t[1, 2]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class FeatureImage:
    """H x W raster of D-dimensional real features."""

    data: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.data)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ValueError(f"feature image must be H x W x D with all dims >= 1, got {a.shape}")
        object.__setattr__(self, "data", _frozen(a))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def depth(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        return isinstance(other, FeatureImage) and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True)
class LabelMap:
    """H x W integer labels in {0..C}; 0 marks pixels without ground truth."""

    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        a = np.asarray(self.labels)
        if a.ndim != 2 or min(a.shape) < 1:
            raise ValueError(f"label map must be H x W, got shape {a.shape}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if a.size and (a.min() < 0 or a.max() > self.num_classes):
            raise ValueError(f"labels must lie in 0..{self.num_classes}")
        a = np.array(a, dtype=np.int64, copy=True)
        a.setflags(write=False)
        object.__setattr__(self, "labels", a)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    def __eq__(self, other):
        return (isinstance(other, LabelMap) and self.num_classes == other.num_classes
                and np.array_equal(self.labels, other.labels))

    __hash__ = None


def vectorize_coherency(p: CoherencyPixel) -> np.ndarray:
    """Return [T11, T22, T33, Re T12, Im T12, Re T13, Im T13, Re T23, Im T23]."""
    return np.array([p.t11, p.t22, p.t33,
                     p.t12.real, p.t12.imag,
                     p.t13.real, p.t13.imag,
                     p.t23.real, p.t23.imag], dtype=np.float64)


def devectorize_coherency(x) -> CoherencyPixel:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (FEATURE_DIM,):
        raise ValueError("expected a 9-vector")
    return CoherencyPixel(x[0], x[1], x[2],
                          complex(x[3], x[4]), complex(x[5], x[6]), complex(x[7], x[8]))


def vectorize_coherency_image(t: np.ndarray) -> FeatureImage:
    """Vectorize an (H, W, 3, 3) complex coherency stack into a 9-band image."""
    t = np.asarray(t)
    out = np.stack([t[..., 0, 0].real, t[..., 1, 1].real, t[..., 2, 2].real,
                    t[..., 0, 1].real, t[..., 0, 1].imag,
                    t[..., 0, 2].real, t[..., 0, 2].imag,
                    t[..., 1, 2].real, t[..., 1, 2].imag], axis=-1)
    return FeatureImage(out)


def normalize_bands(img: FeatureImage):
    """Affinely map each band onto [0, 1].

    Returns the normalized image and the per-band ``(min, max)`` list used,
    which :func:`denormalize_bands` inverts. Constant bands map to zero.
    """
    x = img.data
    lo = x.min(axis=(0, 1))
    hi = x.max(axis=(0, 1))
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (x - lo) / safe, 0.0)
    return FeatureImage(out), [(float(a), float(b)) for a, b in zip(lo, hi)]


def denormalize_bands(img: FeatureImage, ranges) -> FeatureImage:
    lo = np.array([r[0] for r in ranges])
    hi = np.array([r[1] for r in ranges])
    return FeatureImage(img.data * (hi - lo) + lo)


def pauli_edge_features(p: CoherencyPixel) -> np.ndarray:
    """Amplitudes of the three Pauli channel powers, used as MRF edge features."""
    d = np.array([p.t11, p.t22, p.t33], dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("coherency diagonal must be non-negative")
    return np.sqrt(d)


def pauli_image(img: FeatureImage) -> FeatureImage:
    """Pauli edge features of a 9-band raster (first three bands are T11, T22, T33).

    Noise can push denoised or normalized powers slightly negative; those are
    clipped to zero before the square root.
    """
    if img.depth < 3:
        raise ValueError("need at least the three diagonal bands")
    return FeatureImage(np.sqrt(np.clip(img.data[..., :3], 0.0, None)))


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic piecewise-constant PolSAR-like scene.

    ``separation`` is the minimum Euclidean distance enforced between class
    signatures; ``signature_scale`` bounds their largest entry.
    """

    height: int = 128
    width: int = 128
    num_classes: int = 6
    r_true: int = 2
    mog: tuple = ((0.9, 0.01), (0.1, 0.3))
    granularity: float = 25.0
    seed: int = 0
    separation: float = 0.08
    signature_scale: float = 0.8

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise ValueError("image size must be positive")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if not 1 <= self.r_true <= FEATURE_DIM:
            raise ValueError("r_true must lie in 1..9")
        weights = np.array([w for w, _ in self.mog], dtype=float)
        sigmas = np.array([s for _, s in self.mog], dtype=float)
        if len(weights) == 0 or np.any(weights <= 0) or abs(weights.sum() - 1) > 1e-9:
            raise ValueError("MoG weights must be positive and sum to 1")
        if np.any(sigmas <= 0):
            raise ValueError("MoG sigmas must be positive")
        if self.granularity <= 0:
            raise ValueError("granularity must be positive")

    @property
    def noise_variance(self) -> float:
        return float(sum(w * s * s for w, s in self.mog))


@dataclass(frozen=True)
class SynthScene:
    clean: FeatureImage
    noisy: FeatureImage
    truth: LabelMap
    basis: np.ndarray = field(repr=False)
    signatures: np.ndarray = field(repr=False)


def _voronoi_regions(rng, h, w, granularity):
    n_seeds = max(1, int(round(h * w / granularity**2)))
    pts = np.column_stack([rng.uniform(0, h, n_seeds), rng.uniform(0, w, n_seeds)])
    rows, cols = np.mgrid[0:h, 0:w]
    d2 = (rows[..., None] + 0.5 - pts[:, 0]) ** 2 + (cols[..., None] + 0.5 - pts[:, 1]) ** 2
    return np.argmin(d2, axis=-1), n_seeds


def _draw_signatures(rng, cfg, basis):
    # Rejection-sample coefficients until every pair is at least `separation` apart.
    best, best_gap = None, -1.0
    for _ in range(200):
        coef = rng.uniform(0.0, 1.0, size=(cfg.num_classes, cfg.r_true))
        sig = coef @ basis.T
        sig *= cfg.signature_scale / max(sig.max(), 1e-12)
        if cfg.num_classes == 1:
            return sig
        diff = sig[:, None, :] - sig[None, :, :]
        dist = np.sqrt((diff**2).sum(-1))
        gap = dist[np.triu_indices(cfg.num_classes, 1)].min()
        if gap >= cfg.separation:
            return sig
        if gap > best_gap:
            best, best_gap = sig, gap
    return best


def synth_generate(cfg: SynthConfig) -> SynthScene:
    """Generate (clean, noisy, truth) for a Voronoi scene.

    Class signatures are non-negative combinations of an ``r_true``-column
    non-negative basis, so every patch of the clean image has rank at most
    ``r_true``. Noise is i.i.d. per entry from the configured zero-mean MoG.
    """
    rng = np.random.default_rng(cfg.seed)
    h, w, c = cfg.height, cfg.width, cfg.num_classes

    basis = rng.uniform(0.0, 1.0, size=(FEATURE_DIM, cfg.r_true))
    signatures = _draw_signatures(rng, cfg, basis)

    region, n_seeds = _voronoi_regions(rng, h, w, cfg.granularity)
    region_class = rng.integers(0, c, size=n_seeds)
    # every class gets at least one region when there are enough regions
    if n_seeds >= c:
        region_class[rng.permutation(n_seeds)[:c]] = np.arange(c)
    labels = region_class[region] + 1

    clean = signatures[labels - 1]

    weights = np.array([p for p, _ in cfg.mog])
    sigmas = np.array([s for _, s in cfg.mog])
    comp = rng.choice(len(weights), size=clean.shape, p=weights)
    noise = rng.standard_normal(clean.shape) * sigmas[comp]
    noisy = clean + noise

    return SynthScene(FeatureImage(clean), FeatureImage(noisy), LabelMap(labels, c),
                      basis, signatures)
