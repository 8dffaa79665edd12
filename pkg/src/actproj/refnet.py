"""Four-block reference CNN with frozen weights, activation taps and manual backprop.

Layout is NCHW throughout. Each block is conv3x3 (pad 1, no bias) -> BN -> ReLU,
tapped after the ReLU, followed by a 2x2 max-pool on all but the last block.
A global average pool and a 10-way linear layer produce the logits.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .numerics import ShapeError, ValidationError, read_atsr, read_manifest, write_atsr, write_manifest

log = logging.getLogger(__name__)

CHANNELS = (8, 16, 32, 64)
POOLED = (True, True, True, False)
IN_CHANNELS = 3
IMAGE_SIZE = 32
N_CLASSES = 10
BN_EPS = 1e-5


class StateError(RuntimeError):
    pass


class TrainingDiagnostic(RuntimeError):
    pass


# ---------------------------------------------------------------- primitives

def conv3x3_forward(x, w):
    n, c, h, wd = x.shape
    out = w.shape[0]
    if w.shape[1] != c:
        raise ShapeError(f"conv expects {w.shape[1]} input channels, got {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(2, 3))  # n, c, h, w, 3, 3
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, c * 9)
    y = cols @ w.reshape(out, c * 9).T
    return y.reshape(n, h, wd, out).transpose(0, 3, 1, 2), cols


def conv3x3_backward(dy, w, cols, x_shape, need_weight_grad=False):
    n, c, h, wd = x_shape
    out = w.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 1).reshape(n * h * wd, out)
    dcols = (dy_mat @ w.reshape(out, c * 9)).reshape(n, h, wd, c, 3, 3)
    dxp = np.zeros((n, c, h + 2, wd + 2), dtype=dy.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, :, i:i + h, j:j + wd] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, 1:-1, 1:-1]
    dw = (dy_mat.T @ cols).reshape(w.shape) if need_weight_grad else None
    return dx, dw


def maxpool2_forward(x):
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial extents, got {h}x{w}")
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, arg


def maxpool2_backward(dy, arg, x_shape):
    n, c, h, w = x_shape
    blocks = np.zeros((n, c, h // 2, w // 2, 4), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    return blocks.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(x_shape)


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------- network

@dataclass
class TapSet:
    taps: list
    logits: np.ndarray


@dataclass
class ForwardContext:
    caches: list = field(default_factory=list)
    head: tuple | None = None


class RefNet:
    """Frozen reference network. Parameters live in ``params`` keyed by name."""

    channels = CHANNELS
    pooled = POOLED

    def __init__(self, params, meta=None):
        self.params = {k: np.array(v) for k, v in params.items()}
        for v in self.params.values():
            v.flags.writeable = False
        self.meta = dict(meta or {})
        self._validate()

    @property
    def n_layers(self):
        return len(self.channels)

    @property
    def dtype(self):
        return self.params["fc.weight"].dtype

    def _validate(self):
        cin = IN_CHANNELS
        for l, cout in enumerate(self.channels):
            shape = self.params[f"conv{l}.weight"].shape
            if shape != (cout, cin, 3, 3):
                raise ShapeError(f"conv{l}.weight has shape {shape}, expected {(cout, cin, 3, 3)}")
            for name in ("gamma", "beta", "mean", "var"):
                if self.params[f"bn{l}.{name}"].shape != (cout,):
                    raise ShapeError(f"bn{l}.{name} must have {cout} entries")
            cin = cout
        if self.params["fc.weight"].shape != (N_CLASSES, cin):
            raise ShapeError("classifier weight shape mismatch")

    def astype(self, dtype):
        return RefNet({k: v.astype(dtype) for k, v in self.params.items()}, self.meta)

    def checksum(self):
        return {k: float(np.sum(v.astype(np.float64))) for k, v in self.params.items()}

    def tap_shape(self, l, n=1):
        side = IMAGE_SIZE >> sum(self.pooled[:l])
        return (n, self.channels[l], side, side)

    def bn_affine(self, l):
        p = self.params
        dt = self.dtype
        scale = p[f"bn{l}.gamma"] / np.sqrt(p[f"bn{l}.var"] + dt.type(BN_EPS))
        shift = p[f"bn{l}.beta"] - p[f"bn{l}.mean"] * scale
        return scale.astype(dt), shift.astype(dt)

    # each stage returns its output and the cache its backward needs

    def block_forward(self, l, h):
        w = self.params[f"conv{l}.weight"]
        y, cols = conv3x3_forward(h, w)
        scale, shift = self.bn_affine(l)
        pre = y * scale[None, :, None, None] + shift[None, :, None, None]
        z = np.maximum(pre, 0)
        return z, (cols, h.shape, pre > 0)

    def block_backward(self, l, dz, cache):
        cols, h_shape, active = cache
        scale, _ = self.bn_affine(l)
        dy = dz * active * scale[None, :, None, None]
        dh, _ = conv3x3_backward(dy, self.params[f"conv{l}.weight"], cols, h_shape)
        return dh

    def pool_forward(self, l, z):
        if not self.pooled[l]:
            return z, None
        y, arg = maxpool2_forward(z)
        return y, (arg, z.shape)

    def pool_backward(self, l, dy, cache):
        if cache is None:
            return dy
        arg, shape = cache
        return maxpool2_backward(dy, arg, shape)

    def head_forward(self, h):
        g = h.mean(axis=(2, 3))
        logits = g @ self.params["fc.weight"].T + self.params["fc.bias"]
        return logits, h.shape

    def head_backward(self, dlogits, shape):
        n, c, hh, ww = shape
        dg = dlogits @ self.params["fc.weight"]
        return np.broadcast_to((dg / (hh * ww))[:, :, None, None], shape).astype(dlogits.dtype)

    def predict(self, images, batch_size=256):
        out = []
        for s in range(0, len(images), batch_size):
            out.append(forward(self, images[s:s + batch_size]).logits.argmax(axis=1))
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)

    def accuracy(self, data, batch_size=256):
        if len(data.labels) == 0:
            return 0.0
        return float(np.mean(self.predict(data.images, batch_size) == data.labels))


def _check_input(net, images):
    images = np.asarray(images)
    if images.ndim != 4 or images.shape[1:] != (IN_CHANNELS, IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"expected images of shape (n, 3, 32, 32), got {images.shape}")
    if images.shape[0] == 0:
        raise ShapeError("empty batch")
    return images.astype(net.dtype, copy=False)


def forward(net, images, ctx=None):
    """Frozen forward pass. Pass a :class:`ForwardContext` to enable backprop."""
    h = _check_input(net, images)
    taps = []
    for l in range(net.n_layers):
        z, bcache = net.block_forward(l, h)
        taps.append(z)
        h, pcache = net.pool_forward(l, z)
        if ctx is not None:
            ctx.caches.append((bcache, pcache))
    logits, hshape = net.head_forward(h)
    if ctx is not None:
        ctx.head = hshape
    return TapSet(taps, logits)


def backward_through_frozen(net, ctx, upstream_grad, tap_grads=None, from_layer=None):
    """Gradients of a loss w.r.t. every post-ReLU tap.

    ``upstream_grad`` is dL/dlogits (may be None); ``tap_grads`` optionally adds
    direct loss terms at taps. ``from_layer`` stops the sweep below that tap.
    Parameters receive no gradient.
    """
    if ctx is None or ctx.head is None or len(ctx.caches) != net.n_layers:
        raise StateError("backward_through_frozen needs a recorded forward context")
    stop = 0 if from_layer is None else from_layer
    grads = [None] * net.n_layers
    if upstream_grad is None:
        dh = np.zeros(ctx.head, dtype=net.dtype)
    else:
        dh = net.head_backward(np.asarray(upstream_grad, dtype=net.dtype), ctx.head)
    for l in reversed(range(stop, net.n_layers)):
        bcache, pcache = ctx.caches[l]
        dz = net.pool_backward(l, dh, pcache)
        if tap_grads is not None and tap_grads[l] is not None:
            dz = dz + tap_grads[l]
        grads[l] = dz
        if l > stop:
            dh = net.block_backward(l, dz, bcache)
    return grads


# ---------------------------------------------------------------- data

@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.split)


@dataclass
class DataSplits:
    train: Dataset
    calibration: Dataset
    eval: Dataset


_SPLIT_STREAM = {"train": 0, "calibration": 1, "eval": 2}


def _gabor(yy, xx, theta, wavelength, phase, cy, cx, sigma):
    t = lambda v: np.asarray(v)[:, None, None]
    proj = xx * np.cos(t(theta)) + yy * np.sin(t(theta))
    env = np.exp(-((yy - t(cy)) ** 2 + (xx - t(cx)) ** 2) / (2 * t(sigma) ** 2))
    return np.cos(2 * np.pi * proj / t(wavelength) + t(phase)) * env


def generate_synthetic_dataset(seed, n_per_class, split="train", noise=0.1):
    """Oriented Gabor textures, one (orientation, wavelength) pair per class.

    Classes 0-4 use a 6 px wavelength and 5-9 a 4.5 px one, with orientations
    spaced by pi/5 and jittered. Each image also carries a weaker distractor
    patch of random orientation and wavelength. Phase, position and tint are
    random per image, so pixel-space class means are nearly uninformative.
    """
    if n_per_class < 1:
        raise ValidationError("n_per_class must be at least 1")
    if split not in _SPLIT_STREAM:
        raise ValidationError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, _SPLIT_STREAM[split]])
    n = N_CLASSES * n_per_class
    labels = np.repeat(np.arange(N_CLASSES), n_per_class)[rng.permutation(n)]

    theta = (labels % 5) * (np.pi / 5) + rng.normal(0, 0.14, n)
    wavelength = np.where(labels < 5, 6.0, 4.5) * rng.uniform(0.9, 1.1, n)
    phase = rng.uniform(0, 2 * np.pi, n)
    cy, cx = rng.uniform(8, 24, (2, n))
    sigma = rng.uniform(5, 10, n)
    amp = rng.uniform(0.13, 0.32, n)
    tint = rng.uniform(0.6, 1.0, (n, IN_CHANNELS))

    yy, xx = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    yy, xx = yy[None], xx[None]
    gray = amp[:, None, None] * _gabor(yy, xx, theta, wavelength, phase, cy, cx, sigma)
    d_theta = rng.uniform(0, np.pi, n)
    d_wave = rng.uniform(3.5, 9.0, n)
    d_phase = rng.uniform(0, 2 * np.pi, n)
    d_cy, d_cx = rng.uniform(4, 28, (2, n))
    d_sigma = rng.uniform(3, 6, n)
    gray += 0.6 * amp[:, None, None] * _gabor(yy, xx, d_theta, d_wave, d_phase, d_cy, d_cx, d_sigma)

    img = 0.5 + gray[:, None] * tint[:, :, None, None]
    img = img + rng.normal(0, noise, img.shape)
    images = np.clip(img, 0.0, 1.0).astype(np.float32)
    return Dataset(images, labels.astype(np.int64), split)


def make_splits(seed, n_train_per_class=500, n_calibration=512, n_eval_per_class=200):
    calib_per_class = -(-n_calibration // N_CLASSES)
    calib = generate_synthetic_dataset(seed, calib_per_class, "calibration")
    calib = calib.subset(np.arange(n_calibration))
    return DataSplits(
        train=generate_synthetic_dataset(seed, n_train_per_class, "train"),
        calibration=calib,
        eval=generate_synthetic_dataset(seed, n_eval_per_class, "eval"),
    )


def load_cifar10_batch(path, split="train"):
    """Read one CIFAR-10 binary batch (1 label byte + 3072 pixel bytes per record)."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % 3073:
        raise ValidationError(f"{path}: size is not a multiple of the 3073-byte record")
    rec = raw.reshape(-1, 3073)
    labels = rec[:, 0].astype(np.int64)
    if labels.max(initial=0) >= N_CLASSES:
        raise ValidationError(f"{path}: label out of range")
    images = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split)


def load_cifar10_splits(directory, n_calibration=512, seed=0):
    directory = Path(directory)
    train_files = sorted(directory.glob("data_batch_*.bin"))
    if not train_files:
        raise ValidationError(f"no data_batch_*.bin files in {directory}")
    parts = [load_cifar10_batch(f) for f in train_files]
    images = np.concatenate([p.images for p in parts])
    labels = np.concatenate([p.labels for p in parts])
    perm = np.random.default_rng(seed).permutation(len(labels))
    cal, tr = perm[:n_calibration], perm[n_calibration:]
    test = load_cifar10_batch(directory / "test_batch.bin", "eval")
    return DataSplits(
        train=Dataset(images[tr], labels[tr], "train"),
        calibration=Dataset(images[cal], labels[cal], "calibration"),
        eval=test,
    )


# ---------------------------------------------------------------- training

def init_params(seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = {}
    cin = IN_CHANNELS
    for l, cout in enumerate(CHANNELS):
        std = np.sqrt(2.0 / (cin * 9))
        params[f"conv{l}.weight"] = rng.normal(0, std, (cout, cin, 3, 3))
        params[f"bn{l}.gamma"] = np.ones(cout)
        params[f"bn{l}.beta"] = np.zeros(cout)
        params[f"bn{l}.mean"] = np.zeros(cout)
        params[f"bn{l}.var"] = np.ones(cout)
        cin = cout
    params["fc.weight"] = rng.normal(0, np.sqrt(1.0 / cin), (N_CLASSES, cin))
    params["fc.bias"] = np.zeros(N_CLASSES)
    return {k: v.astype(dtype) for k, v in params.items()}


def _train_step(params, images, labels, lr, momentum=0.1):
    """One SGD step with batch-statistics BN; updates ``params`` in place, returns the loss."""
    h = images
    caches = []
    for l in range(len(CHANNELS)):
        w = params[f"conv{l}.weight"]
        y, cols = conv3x3_forward(h, w)
        mu = y.mean(axis=(0, 2, 3))
        var = y.var(axis=(0, 2, 3))
        inv = 1.0 / np.sqrt(var + BN_EPS)
        xhat = (y - mu[None, :, None, None]) * inv[None, :, None, None]
        pre = xhat * params[f"bn{l}.gamma"][None, :, None, None] + params[f"bn{l}.beta"][None, :, None, None]
        z = np.maximum(pre, 0)
        params[f"bn{l}.mean"] = (1 - momentum) * params[f"bn{l}.mean"] + momentum * mu
        m = y.size / y.shape[1]
        params[f"bn{l}.var"] = (1 - momentum) * params[f"bn{l}.var"] + momentum * var * m / (m - 1)
        if POOLED[l]:
            hn, arg = maxpool2_forward(z)
            pc = (arg, z.shape)
        else:
            hn, pc = z, None
        caches.append((h.shape, cols, xhat, inv, pre > 0, pc))
        h = hn
    g = h.mean(axis=(2, 3))
    logits = g @ params["fc.weight"].T + params["fc.bias"]
    n = len(labels)
    lsm = log_softmax(logits)
    loss = -float(np.mean(lsm[np.arange(n), labels]))
    dlogits = np.exp(lsm)
    dlogits[np.arange(n), labels] -= 1
    dlogits /= n

    grads = {"fc.weight": dlogits.T @ g, "fc.bias": dlogits.sum(axis=0)}
    dg = dlogits @ params["fc.weight"]
    dh = np.broadcast_to((dg / (h.shape[2] * h.shape[3]))[:, :, None, None], h.shape)
    for l in reversed(range(len(CHANNELS))):
        h_shape, cols, xhat, inv, active, pc = caches[l]
        dz = maxpool2_backward(dh, *pc) if pc is not None else dh
        dpre = dz * active
        grads[f"bn{l}.gamma"] = (dpre * xhat).sum(axis=(0, 2, 3))
        grads[f"bn{l}.beta"] = dpre.sum(axis=(0, 2, 3))
        dxhat = dpre * params[f"bn{l}.gamma"][None, :, None, None]
        mean_dx = dxhat.mean(axis=(0, 2, 3), keepdims=True)
        mean_dxx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
        dy = (dxhat - mean_dx - xhat * mean_dxx) * inv[None, :, None, None]
        dh, dw = conv3x3_backward(dy, params[f"conv{l}.weight"], cols, h_shape, need_weight_grad=True)
        grads[f"conv{l}.weight"] = dw
    for k, gk in grads.items():
        params[k] = (params[k] - lr * gk).astype(params[k].dtype)
    return loss


def pretrain_reference(data, epochs=10, seed=42, lr=0.05, batch_size=64, min_accuracy=0.6):
    """Train the reference net with plain SGD + cross-entropy, then freeze it.

    Eval accuracy is stored in ``net.meta['eval_accuracy']``. When training
    ran for at least one epoch and accuracy stays under ``min_accuracy`` a
    :class:`TrainingDiagnostic` is raised.
    """
    if len(data.train) == 0:
        raise ValidationError("dataset has no training split")
    params = init_params(seed)
    rng = np.random.default_rng([seed, 7])
    images = data.train.images.astype(np.float32)
    labels = data.train.labels
    for epoch in range(epochs):
        order = rng.permutation(len(labels))
        losses = []
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if len(idx) < 2:
                continue
            losses.append(_train_step(params, images[idx], labels[idx], np.float32(lr)))
        log.info("pretrain epoch %d loss %.4f", epoch, float(np.mean(losses)))
    net = RefNet(params, {"seed": seed, "epochs": epochs})
    acc = net.accuracy(data.eval)
    net.meta["eval_accuracy"] = acc
    if epochs > 0 and acc < min_accuracy:
        raise TrainingDiagnostic(
            f"reference net reached only {acc:.1%} eval accuracy; check the dataset and architecture"
        )
    return net


# ---------------------------------------------------------------- persistence

def save_refnet(net, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, value in net.params.items():
        fname = f"{name}.atsr"
        write_atsr(directory / fname, value)
        entries[name] = fname
    for key, value in sorted(net.meta.items()):
        entries[f"meta.{key}"] = repr(value)
    write_manifest(directory / "manifest.txt", entries)


def load_refnet(directory):
    directory = Path(directory)
    entries = read_manifest(directory / "manifest.txt")
    params, meta = {}, {}
    for key, value in entries.items():
        if key.startswith("meta."):
            meta[key[5:]] = _parse_scalar(value)
        else:
            params[key] = read_atsr(directory / value)
    return RefNet(params, meta)


def _parse_scalar(text):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text.strip("'\"")
