"""Small convolutional classifier written directly in numpy.

Architecture (default widths)::

    conv 3x3 (20) -> BN -> ReLU -> maxpool 2x2
    conv 2x2 (50) -> BN -> ReLU -> maxpool 2x2
    fc (500) -> BN -> ReLU -> fc (C) -> softmax

Layers followed by batch norm carry no bias (the BN shift plays that role).
Inputs are channel-last patches ``(N, p, p, D)``; internally NCHW.
"""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .data import FeatureImage
from .formats import BadMagicError, FormatError, TruncatedError

BN_EPS = 1e-5
BN_MOMENTUM = 0.9
PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class CnnSpec:
    p_in: int = 12
    depth: int = 9
    num_classes: int = 2
    conv1: int = 20
    conv2: int = 50
    fc1: int = 500

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.depth < 1:
            raise ValueError("depth must be positive")
        s1 = self.p_in - 2
        if s1 < 2 or s1 % 2:
            raise ValueError(f"p_in={self.p_in}: first conv output {s1} must be even and >= 2")
        s2 = s1 // 2 - 1
        if s2 < 2 or s2 % 2:
            raise ValueError(f"p_in={self.p_in}: second conv output {s2} must be even and >= 2")

    @property
    def flat_size(self) -> int:
        side = ((self.p_in - 2) // 2 - 1) // 2
        return self.conv2 * side * side


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.001
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 50
    max_epochs: int = 60
    patience: int = 10
    val_fraction: float = 0.2
    augment: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("learning rate, decay and momentum must be non-negative (momentum < 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch size, epochs and patience must be positive")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must lie in (0, 1)")


# parameter groups in checkpoint order; "weights" get the L2 penalty
PARAM_NAMES = ("conv1_w", "bn1_g", "bn1_b", "conv2_w", "bn2_g", "bn2_b",
               "fc1_w", "bn3_g", "bn3_b", "fc2_w", "fc2_b")
DECAYED = ("conv1_w", "conv2_w", "fc1_w", "fc2_w")
BUFFER_NAMES = ("bn1_mean", "bn1_var", "bn2_mean", "bn2_var", "bn3_mean", "bn3_var")


def _param_shapes(spec: CnnSpec):
    return {
        "conv1_w": (spec.conv1, spec.depth, 3, 3),
        "bn1_g": (spec.conv1,), "bn1_b": (spec.conv1,),
        "conv2_w": (spec.conv2, spec.conv1, 2, 2),
        "bn2_g": (spec.conv2,), "bn2_b": (spec.conv2,),
        "fc1_w": (spec.flat_size, spec.fc1),
        "bn3_g": (spec.fc1,), "bn3_b": (spec.fc1,),
        "fc2_w": (spec.fc1, spec.num_classes), "fc2_b": (spec.num_classes,),
    }


def _buffer_shapes(spec: CnnSpec):
    return {"bn1_mean": (spec.conv1,), "bn1_var": (spec.conv1,),
            "bn2_mean": (spec.conv2,), "bn2_var": (spec.conv2,),
            "bn3_mean": (spec.fc1,), "bn3_var": (spec.fc1,)}


# ---------------------------------------------------------------------------
# layer primitives


def _conv_forward(x, w):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # n, c, ho, wo, kh, kw
    ho, wo = win.shape[2], win.shape[3]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    out = cols @ w.reshape(f, -1).T
    return out.reshape(n, ho, wo, f).transpose(0, 3, 1, 2), cols


def _conv_backward(dout, x_shape, w, cols):
    n, c, h, wd = x_shape
    f, _, kh, kw = w.shape
    ho, wo = dout.shape[2], dout.shape[3]
    d2 = dout.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
    dw = (d2.T @ cols).reshape(w.shape)
    dcols = (d2 @ w.reshape(f, -1)).reshape(n, ho, wo, c, kh, kw)
    dx = np.zeros(x_shape)
    for a in range(kh):
        for b in range(kw):
            dx[:, :, a:a + ho, b:b + wo] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
    return dx, dw


def _pool_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(blocks, idx[..., None], dout[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def _bn_forward(x, g, b, mean_buf, var_buf, train, axes):
    shape = [1] * x.ndim
    shape[1] = -1
    if train:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = mean_buf, var_buf
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mu.reshape(shape)) * inv.reshape(shape)
    out = g.reshape(shape) * xhat + b.reshape(shape)
    return out, (xhat, inv, shape, axes), mu, var


def _bn_backward(dout, cache, g):
    xhat, inv, shape, axes = cache
    m = dout.size // dout.shape[1]
    dg = (dout * xhat).sum(axis=axes)
    db = dout.sum(axis=axes)
    dxhat = dout * g.reshape(shape)
    dx = (inv.reshape(shape) / m) * (m * dxhat - dxhat.sum(axis=axes).reshape(shape)
                                     - xhat * (dxhat * xhat).sum(axis=axes).reshape(shape))
    return dx, dg, db


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


class Net:
    """Parameters, BN running statistics and forward/backward passes."""

    def __init__(self, spec: CnnSpec, seed: int = 0):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.params = {}
        for name, shape in _param_shapes(spec).items():
            if name.endswith("_w"):
                fan_in = int(np.prod(shape[1:])) if name.startswith("conv") else shape[0]
                lim = np.sqrt(6.0 / fan_in)
                self.params[name] = rng.uniform(-lim, lim, size=shape)
            elif name.endswith("_g"):
                self.params[name] = np.ones(shape)
            else:
                self.params[name] = np.zeros(shape)
        self.buffers = {name: (np.ones(s) if name.endswith("var") else np.zeros(s))
                        for name, s in _buffer_shapes(spec).items()}
        self._cache = None

    def copy(self) -> "Net":
        other = Net.__new__(Net)
        other.spec = self.spec
        other.params = {k: v.copy() for k, v in self.params.items()}
        other.buffers = {k: v.copy() for k, v in self.buffers.items()}
        other._cache = None
        return other

    def _check_input(self, x):
        s = self.spec
        if x.ndim != 4 or x.shape[1:] != (s.p_in, s.p_in, s.depth):
            raise ValueError(f"expected patches of shape (N, {s.p_in}, {s.p_in}, {s.depth}), got {x.shape}")

    def logits(self, x, train=False):
        """Forward pass on channel-last patches; caches activations when training."""
        x = np.asarray(x, dtype=np.float64)
        self._check_input(x)
        p, bf = self.params, self.buffers
        x = x.transpose(0, 3, 1, 2)
        c1, cols1 = _conv_forward(x, p["conv1_w"])
        b1, bn1, m1, v1 = _bn_forward(c1, p["bn1_g"], p["bn1_b"], bf["bn1_mean"], bf["bn1_var"], train, (0, 2, 3))
        r1 = np.maximum(b1, 0.0)
        q1, i1 = _pool_forward(r1)
        c2, cols2 = _conv_forward(q1, p["conv2_w"])
        b2, bn2, m2, v2 = _bn_forward(c2, p["bn2_g"], p["bn2_b"], bf["bn2_mean"], bf["bn2_var"], train, (0, 2, 3))
        r2 = np.maximum(b2, 0.0)
        q2, i2 = _pool_forward(r2)
        flat = q2.reshape(q2.shape[0], -1)
        f1 = flat @ p["fc1_w"]
        b3, bn3, m3, v3 = _bn_forward(f1, p["bn3_g"], p["bn3_b"], bf["bn3_mean"], bf["bn3_var"], train, (0,))
        r3 = np.maximum(b3, 0.0)
        out = r3 @ p["fc2_w"] + p["fc2_b"]
        if train:
            self._cache = dict(x_shape=x.shape, cols1=cols1, c1_shape=c1.shape, bn1=bn1, b1=b1, i1=i1,
                               r1_shape=r1.shape, q1_shape=q1.shape, cols2=cols2, bn2=bn2, b2=b2, i2=i2,
                               r2_shape=r2.shape, q2_shape=q2.shape, flat=flat, bn3=bn3, b3=b3, r3=r3)
            self._batch_stats = dict(bn1=(m1, v1), bn2=(m2, v2), bn3=(m3, v3))
        return out

    def backward(self, dlogits):
        """Gradients of the data term w.r.t. every parameter group."""
        c, p = self._cache, self.params
        g = {}
        g["fc2_w"] = c["r3"].T @ dlogits
        g["fc2_b"] = dlogits.sum(axis=0)
        d = (dlogits @ p["fc2_w"].T) * (c["b3"] > 0)
        d, g["bn3_g"], g["bn3_b"] = _bn_backward(d, c["bn3"], p["bn3_g"])
        g["fc1_w"] = c["flat"].T @ d
        d = (d @ p["fc1_w"].T).reshape(c["q2_shape"])
        d = _pool_backward(d, c["i2"], c["r2_shape"]) * (c["b2"] > 0)
        d, g["bn2_g"], g["bn2_b"] = _bn_backward(d, c["bn2"], p["bn2_g"])
        d, g["conv2_w"] = _conv_backward(d, c["q1_shape"], p["conv2_w"], c["cols2"])
        d = _pool_backward(d, c["i1"], c["r1_shape"]) * (c["b1"] > 0)
        d, g["bn1_g"], g["bn1_b"] = _bn_backward(d, c["bn1"], p["bn1_g"])
        _, g["conv1_w"] = _conv_backward(d, c["x_shape"], p["conv1_w"], c["cols1"])
        return g

    def update_running_stats(self):
        for k in ("bn1", "bn2", "bn3"):
            mu, var = self._batch_stats[k]
            self.buffers[f"{k}_mean"] = BN_MOMENTUM * self.buffers[f"{k}_mean"] + (1 - BN_MOMENTUM) * mu
            self.buffers[f"{k}_var"] = BN_MOMENTUM * self.buffers[f"{k}_var"] + (1 - BN_MOMENTUM) * var

    def forward(self, x) -> np.ndarray:
        """Class probabilities in inference mode (BN uses running statistics)."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        probs = softmax(self.logits(x[None] if single else x, train=False))
        return probs[0] if single else probs


def forward(net: Net, patch) -> np.ndarray:
    return net.forward(patch)


def decay_term(net: Net, weight_decay: float) -> float:
    return 0.5 * weight_decay * sum(float((net.params[k] ** 2).sum()) for k in DECAYED)


def loss(probs, labels, net: Net | None = None, weight_decay: float = 0.0005) -> float:
    """Summed cross-entropy over the batch plus the L2 weight-decay term.

    ``labels`` are 1-based class indices. Probabilities are floored at 1e-12
    before the log.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 1 or labels.max() > probs.shape[1]:
        raise ValueError(f"labels must lie in 1..{probs.shape[1]}")
    picked = probs[np.arange(len(labels)), labels - 1]
    ce = -np.log(np.maximum(picked, PROB_FLOOR)).sum()
    return float(ce + (decay_term(net, weight_decay) if net is not None else 0.0))


def loss_and_grad(net: Net, x, labels, weight_decay: float):
    """Training-mode loss and full gradient for one batch."""
    labels = np.asarray(labels)
    logits = net.logits(x, train=True)
    probs = softmax(logits)
    value = loss(probs, labels, net, weight_decay)
    d = probs.copy()
    d[np.arange(len(labels)), labels - 1] -= 1.0
    grads = net.backward(d)
    for k in DECAYED:
        grads[k] = grads[k] + weight_decay * net.params[k]
    return value, grads


# ---------------------------------------------------------------------------
# augmentation, patches, training


def augment(patch, label):
    """The eight dihedral transforms of a square patch, all with the same label."""
    patch = np.asarray(patch)
    if patch.ndim < 2 or patch.shape[0] != patch.shape[1]:
        raise ValueError("patch must be square")
    rots = [np.rot90(patch, k, axes=(0, 1)) for k in range(4)]
    flips = [np.flip(r, axis=1) for r in rots]
    return [(np.ascontiguousarray(t), label) for t in rots + flips]


def augment_batch(x, y):
    xs = [np.rot90(x, k, axes=(1, 2)) for k in range(4)]
    xs += [np.flip(r, axis=2) for r in xs]
    return np.concatenate(xs, axis=0), np.tile(y, 8)


def training_patches(img: FeatureImage, p: int, rows, cols) -> np.ndarray:
    """Windows centred on each pixel for training: odd side p + 1 when p is even.

    Rotating or flipping an even window moves its labeled pixel off the
    (p//2, p//2) slot; an odd window keeps it centred, and ``train`` crops the
    transformed window back to the p x p convention of :func:`pixel_patches`.
    """
    return pixel_patches(img, p + 1 if p % 2 == 0 else p, rows, cols)


def pixel_patches(img: FeatureImage, p: int, rows, cols) -> np.ndarray:
    """p x p windows around the given pixels; rows i - p//2 .. i + (p-1)//2 (mirror padded)."""
    from .patches import mirror_pad

    lo, hi = p // 2, (p - 1) // 2
    padded = mirror_pad(img.data, lo)
    if hi < lo:
        padded = padded[:-(lo - hi), :-(lo - hi)]
    win = sliding_window_view(padded, (p, p), axis=(0, 1))  # H, W, D, p, p
    return win[np.asarray(rows), np.asarray(cols)].transpose(0, 2, 3, 1)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_accuracy: list = field(default_factory=list)
    best_epoch: int = 0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_accuracy"])
        for e, l, a in zip(self.epochs, self.train_loss, self.val_accuracy):
            w.writerow([e, repr(float(l)), repr(float(a))])
        return buf.getvalue()


def _split(y, frac, rng, num_classes):
    order = rng.permutation(len(y))
    n_val = max(1, int(round(frac * len(y))))
    val, tr = order[:n_val], order[n_val:]
    # move one sample of any class missing from the training part back into it
    for c in range(1, num_classes + 1):
        if not np.any(y[tr] == c):
            k = np.flatnonzero(y[val] == c)[0]
            tr = np.append(tr, val[k])
            val = np.delete(val, k)
    return tr, val


def _predict_proba(net: Net, x, batch=500):
    return np.concatenate([net.forward(x[i:i + batch]) for i in range(0, len(x), batch)])


def accuracy(net: Net, x, y, batch=500) -> float:
    if len(y) == 0:
        return 0.0
    return float(np.mean(_predict_proba(net, x, batch).argmax(axis=1) + 1 == y))


def train(x, y, spec: CnnSpec, cfg: TrainConfig = TrainConfig()):
    """SGD with momentum on the summed batch loss, early-stopped on validation accuracy.

    ``x`` holds p_in x p_in patches, or the centred odd windows of
    :func:`training_patches` (recommended when augmenting). Returns the
    best-validation snapshot and the per-epoch log.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    side = spec.p_in + 1 if spec.p_in % 2 == 0 else spec.p_in
    if x.ndim != 4 or x.shape[1] != x.shape[2] or x.shape[1] not in (spec.p_in, side) or x.shape[3] != spec.depth:
        raise ValueError(f"training patches must be (N, s, s, {spec.depth}) with s = {spec.p_in} or {side}")
    present = set(np.unique(y).tolist())
    missing = [c for c in range(1, spec.num_classes + 1) if c not in present]
    if missing:
        raise ValueError(f"classes {missing} have no training samples")
    if not present <= set(range(1, spec.num_classes + 1)):
        raise ValueError("labels outside 1..C")

    rng = np.random.default_rng(cfg.seed)
    net = Net(spec, seed=int(rng.integers(1 << 31)))
    tr, val = _split(y, cfg.val_fraction, rng, spec.num_classes)
    xt, yt = x[tr], y[tr]
    if cfg.augment:
        xt, yt = augment_batch(xt, yt)
    p = spec.p_in
    # centred odd windows: transforms keep the labeled pixel fixed, then crop to p x p
    xt, xv, yv = xt[:, :p, :p], x[val][:, :p, :p], y[val]

    vel = {k: np.zeros_like(v) for k, v in net.params.items()}
    log = TrainLog()
    best, best_acc, best_loss, stale = net.copy(), -1.0, np.inf, 0
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(len(yt))
        total = 0.0
        for s in range(0, len(order), cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            if len(idx) < 2:
                continue
            value, grads = loss_and_grad(net, xt[idx], yt[idx], cfg.weight_decay)
            net.update_running_stats()
            for k in net.params:
                vel[k] = cfg.momentum * vel[k] - cfg.learning_rate * grads[k]
                net.params[k] = net.params[k] + vel[k]
            total += value
        probs = _predict_proba(net, xv)
        acc = float(np.mean(probs.argmax(axis=1) + 1 == yv))
        val_loss = loss(probs, yv) / len(yv)
        log.epochs.append(epoch)
        log.train_loss.append(total / len(yt))
        log.val_accuracy.append(acc)
        # small validation sets tie often; among equal accuracies keep the lowest validation loss
        if acc > best_acc or (acc == best_acc and val_loss < best_loss):
            best, best_loss = net.copy(), val_loss
            log.best_epoch = epoch
        if acc > best_acc:
            best_acc, stale = acc, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    return best, log


def predict_map(net: Net, img: FeatureImage, chunk: int = 2048) -> np.ndarray:
    """Per-pixel class probabilities, shape (H, W, C)."""
    if img.depth != net.spec.depth:
        raise ValueError(f"image has {img.depth} bands, network expects {net.spec.depth}")
    h, w = img.height, img.width
    rows, cols = np.divmod(np.arange(h * w), w)
    out = np.empty((h * w, net.spec.num_classes))
    for s in range(0, h * w, chunk):
        out[s:s + chunk] = net.forward(pixel_patches(img, net.spec.p_in, rows[s:s + chunk], cols[s:s + chunk]))
    return out.reshape(h, w, -1)


# ---------------------------------------------------------------------------
# checkpoint: b"PCN1" | u32 p_in, depth, C, conv1, conv2, fc1 | u32 count | float32 blob

PCN_MAGIC = b"PCN1"
_PCN_HEADER = struct.Struct("<4s7I")


def save_checkpoint(net: Net, path) -> None:
    s = net.spec
    blob = np.concatenate([net.params[k].ravel() for k in PARAM_NAMES]
                          + [net.buffers[k].ravel() for k in BUFFER_NAMES]).astype("<f4")
    header = _PCN_HEADER.pack(PCN_MAGIC, s.p_in, s.depth, s.num_classes, s.conv1, s.conv2, s.fc1, blob.size)
    Path(path).write_bytes(header + blob.tobytes())


def load_checkpoint(path) -> Net:
    buf = Path(path).read_bytes()
    if buf[:4] != PCN_MAGIC:
        raise BadMagicError(f"{path}: bad magic, expected {PCN_MAGIC!r}")
    if len(buf) < _PCN_HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, p_in, depth, c, n1, n2, n3, count = _PCN_HEADER.unpack_from(buf)
    spec = CnnSpec(p_in, depth, c, n1, n2, n3)
    shapes = list(_param_shapes(spec).items()) + list(_buffer_shapes(spec).items())
    expected = sum(int(np.prod(sh)) for _, sh in shapes)
    if count != expected:
        raise FormatError(f"{path}: blob holds {count} values, architecture needs {expected}")
    if len(buf) != _PCN_HEADER.size + 4 * count:
        raise TruncatedError(f"{path}: blob size mismatch")
    blob = np.frombuffer(buf, dtype="<f4", offset=_PCN_HEADER.size).astype(np.float64)
    net = Net(spec)
    pos = 0
    for name, sh in shapes:
        n = int(np.prod(sh))
        target = net.params if name in net.params else net.buffers
        target[name] = blob[pos:pos + n].reshape(sh).copy()
        pos += n
    return net
