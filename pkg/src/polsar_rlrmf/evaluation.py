"""Accuracy scores, a pixel-wise logistic-regression baseline and the ablation harness."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from . import cnn, mrf
from .data import FeatureImage, LabelMap, normalize_bands, pauli_image
from .patches import DEFAULT_WINDOW, denoise_image
from .rlrmf import EmConfig

VARIANTS = ("raw-simple", "raw-cnn", "raw-cnn-mrf", "rlrmf-simple", "rlrmf-cnn", "rlrmf-cnn-mrf")


@dataclass(frozen=True)
class Scores:
    confusion: np.ndarray  # rows: truth, columns: prediction
    class_accuracy: np.ndarray  # NaN for classes absent from the truth
    overall: float

    @property
    def total(self) -> int:
        return int(self.confusion.sum())


def score(pred: LabelMap, truth: LabelMap) -> Scores:
    """Confusion matrix, per-class and overall accuracy; truth 0 is ignored."""
    if pred.labels.shape != truth.labels.shape:
        raise ValueError(f"prediction {pred.labels.shape} and truth {truth.labels.shape} differ in shape")
    if pred.num_classes != truth.num_classes:
        raise ValueError("prediction and truth disagree on the number of classes")
    c = truth.num_classes
    mask = truth.labels > 0
    t, p = truth.labels[mask] - 1, pred.labels[mask]
    if np.any(p == 0):
        raise ValueError("prediction leaves labeled pixels unclassified")
    conf = np.zeros((c, c), dtype=np.int64)
    np.add.at(conf, (t, p - 1), 1)
    rows = conf.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        ca = np.where(rows > 0, np.diag(conf) / rows, np.nan)
    total = conf.sum()
    oa = float(np.trace(conf) / total) if total else float("nan")
    return Scores(conf, ca, oa)


# ---------------------------------------------------------------------------
# multinomial logistic regression on single-pixel features


@dataclass
class LogisticModel:
    weights: np.ndarray  # (D + 1, C), last row is the bias
    mean: np.ndarray
    scale: np.ndarray

    def _design(self, x):
        z = (np.asarray(x, dtype=np.float64) - self.mean) / self.scale
        return np.hstack([z, np.ones((z.shape[0], 1))])

    def predict_proba(self, x) -> np.ndarray:
        return cnn.softmax(self._design(x) @ self.weights)

    def predict(self, x) -> np.ndarray:
        return self.predict_proba(x).argmax(axis=1) + 1


def fit_logistic(x, y, num_classes: int, l2: float = 1e-3, max_iter: int = 500) -> LogisticModel:
    """Mean cross-entropy plus l2/2 * ||W||^2 (bias excluded), minimized with L-BFGS."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale == 0] = 1.0
    model = LogisticModel(np.zeros((x.shape[1] + 1, num_classes)), mean, scale)
    a = model._design(x)
    onehot = np.eye(num_classes)[y - 1]
    n = len(y)
    penal = np.ones((x.shape[1] + 1, 1))
    penal[-1] = 0.0

    def objective(flat):
        w = flat.reshape(model.weights.shape)
        logits = a @ w
        logits -= logits.max(axis=1, keepdims=True)
        logz = np.log(np.exp(logits).sum(axis=1))
        ce = (logz - (logits * onehot).sum(axis=1)).mean()
        probs = np.exp(logits - logz[:, None])
        grad = a.T @ (probs - onehot) / n + l2 * penal * w
        return ce + 0.5 * l2 * float((penal * w ** 2).sum()), grad.ravel()

    res = minimize(objective, model.weights.ravel(), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "gtol": 1e-10, "ftol": 1e-14})
    model.weights = res.x.reshape(model.weights.shape)
    return model


# ---------------------------------------------------------------------------
# ablation harness


def stratified_sample(truth: LabelMap, fraction: float, seed: int, min_per_class: int = 2) -> np.ndarray:
    """Flat pixel indices of a per-class random subset of the labeled pixels."""
    if not 0 < fraction <= 1:
        raise ValueError("label fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    flat = truth.labels.ravel()
    picked = []
    for c in range(1, truth.num_classes + 1):
        idx = np.flatnonzero(flat == c)
        k = int(round(fraction * idx.size))
        if idx.size < min_per_class or k < min_per_class:
            raise ValueError(f"class {c}: only {min(idx.size, k)} labels at fraction {fraction}, need {min_per_class}")
        picked.append(rng.choice(idx, k, replace=False))
    return np.sort(np.concatenate(picked))


@dataclass
class AblationReport:
    rows: dict = field(default_factory=dict)  # variant -> Scores
    labels: dict = field(default_factory=dict)  # variant -> LabelMap
    train_pixels: int = 0

    def oa(self, variant: str) -> float:
        return self.rows[variant].overall

    def to_csv(self) -> str:
        buf = io.StringIO()
        out = csv.writer(buf, lineterminator="\n")
        c = len(next(iter(self.rows.values())).class_accuracy) if self.rows else 0
        out.writerow(["variant", "oa"] + [f"ca_{k}" for k in range(1, c + 1)])
        for name, s in self.rows.items():
            out.writerow([name, f"{100 * s.overall:.4f}"] + [f"{100 * v:.4f}" for v in s.class_accuracy])
        return buf.getvalue()

    def to_text(self) -> str:
        if not self.rows:
            return ""
        c = len(next(iter(self.rows.values())).class_accuracy)
        head = f"{'variant':<16}{'OA':>8}" + "".join(f"{'C' + str(k):>8}" for k in range(1, c + 1))
        lines = [head, "-" * len(head)]
        for name, s in self.rows.items():
            lines.append(f"{name:<16}{100 * s.overall:>8.2f}" + "".join(f"{100 * v:>8.2f}" for v in s.class_accuracy))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class AblationConfig:
    label_fraction: float = 0.02
    seed: int = 0
    train: cnn.TrainConfig = cnn.TrainConfig()
    p_in: int = 12
    alpha: float = 5.0
    bp_iters: int = 50
    damping: float = 0.5
    window: int = DEFAULT_WINDOW
    em: EmConfig = EmConfig()


def _held_out(truth: LabelMap, train_idx: np.ndarray) -> LabelMap:
    lab = truth.labels.copy().ravel()
    lab[train_idx] = 0
    return LabelMap(lab.reshape(truth.labels.shape), truth.num_classes)


def run_variant_features(features: FeatureImage, truth: LabelMap, train_idx, cfg: AblationConfig, want):
    """Results for one feature source: {"simple": LabelMap, "cnn": LabelMap, "cnn-mrf": LabelMap}."""
    h, w = truth.labels.shape
    c = truth.num_classes
    y = truth.labels.ravel()[train_idx]
    out = {}
    if "simple" in want:
        flat = features.data.reshape(h * w, -1)
        model = fit_logistic(flat[train_idx], y, c)
        out["simple"] = LabelMap(model.predict(flat).reshape(h, w), c)
    if "cnn" in want or "cnn-mrf" in want:
        rows, cols = np.divmod(train_idx, w)
        x = cnn.training_patches(features, cfg.p_in, rows, cols)
        net, _ = cnn.train(x, y, cnn.CnnSpec(cfg.p_in, features.depth, c), cfg.train)
        probs = cnn.predict_map(net, features)
        out["cnn"] = LabelMap(probs.argmax(axis=-1) + 1, c)
        if "cnn-mrf" in want:
            model = mrf.build_model(probs, pauli_image(features), cfg.alpha)
            out["cnn-mrf"], _ = mrf.min_sum_bp(model, cfg.bp_iters, cfg.damping)
    return out


def ablation_run(raw: FeatureImage, truth: LabelMap, cfg: AblationConfig = AblationConfig(),
                 variants=VARIANTS, denoised: FeatureImage | None = None) -> AblationReport:
    """Train and score each variant on one shared stratified label subset.

    ``raw`` is normalized to [0, 1] per band here. ``denoised`` may be passed in
    (already normalized) to avoid recomputing the low-rank features.
    """
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise ValueError(f"unknown variants {sorted(unknown)}")
    train_idx = stratified_sample(truth, cfg.label_fraction, cfg.seed)
    test_truth = _held_out(truth, train_idx)
    report = AblationReport(train_pixels=len(train_idx))
    raw_n, _ = normalize_bands(raw)
    results = {}
    for source in ("raw", "rlrmf"):
        want = [v.split("-", 1)[1] for v in variants if v.startswith(source + "-")]
        if not want:
            continue
        if source == "raw":
            feats = raw_n
        else:
            feats = denoised if denoised is not None else denoise_image(raw_n, cfg.window, cfg.em).image
        for kind, lab in run_variant_features(feats, truth, train_idx, cfg, want).items():
            results[f"{source}-{kind}"] = lab
    for v in VARIANTS:
        if v in variants:
            report.rows[v] = score(results[v], test_truth)
            report.labels[v] = results[v]
    return report
