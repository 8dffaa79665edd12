"""Learnable projection training against a frozen teacher.

Every tap of the student runs project -> quantize -> dequantize -> reconstruct
before feeding the next block, so training sees the deployment path. The
quantizer passes gradients straight through inside its clip range.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace

import numpy as np

from .codec import calibrate_quant, fake_quantize, quantize
from .numerics import ShapeError, channel_reshape, inverse_channel_reshape
from .refnet import StateError, TapSet, forward, log_softmax, softmax
from .transform import project

log = logging.getLogger(__name__)


class NumericalFailure(ArithmeticError):
    pass


@dataclass
class ProjectedModel:
    net: object
    pairs: list
    quant: list | None = None
    quantize: bool = True

    def __post_init__(self):
        if len(self.pairs) != self.net.n_layers:
            raise ShapeError(f"need {self.net.n_layers} projection pairs, got {len(self.pairs)}")
        for l, pair in enumerate(self.pairs):
            if pair.d_full != self.net.channels[l]:
                raise ShapeError(f"layer {l}: pair built for {pair.d_full} channels, net has {self.net.channels[l]}")

    @property
    def dims(self):
        return [p.d_active for p in self.pairs]

    def with_pairs(self, pairs):
        return replace(self, pairs=list(pairs))

    def with_dims(self, dims):
        return self.with_pairs([p.with_active(k) for p, k in zip(self.pairs, dims)])

    def astype(self, dtype):
        return replace(self, net=self.net.astype(dtype), pairs=[p.astype(dtype) for p in self.pairs])


@dataclass(frozen=True)
class LossBreakdown:
    hint: float
    kd: float

    @property
    def total(self):
        return self.hint + self.kd


def calibrate_quantizers(net, pairs, images, batch_size=256):
    """Per-layer max-abs scale of the projected teacher activations."""
    peaks = np.zeros(len(pairs))
    for s in range(0, len(images), batch_size):
        taps = forward(net, images[s:s + batch_size]).taps
        for l, (pair, a) in enumerate(zip(pairs, taps)):
            peaks[l] = max(peaks[l], float(np.max(np.abs(project(pair, a)))))
    return [calibrate_quant(np.array([p])) for p in peaks]


def forward_projected(model, images, record=False, symbols=None):
    """Student forward; returns ``(TapSet, ctx)`` where ``ctx`` is None unless ``record``.

    Pass a list as ``symbols`` to receive each layer's quantized coefficients.
    """
    net = model.net
    if model.quantize and (model.quant is None or len(model.quant) != len(model.pairs)):
        raise StateError("quantizers are not calibrated")
    h = np.asarray(images).astype(net.dtype, copy=False)
    taps, ctx = [], []
    for l, pair in enumerate(model.pairs):
        z, bcache = net.block_forward(l, h)
        zc = channel_reshape(z) - pair.mean.astype(z.dtype)[:, None]
        coded = pair.P @ zc
        if model.quantize:
            # int8 casting would silently turn NaN into a valid symbol
            if not np.all(np.isfinite(coded)):
                raise NumericalFailure(f"layer {l}: non-finite projected activations")
            deq, mask = fake_quantize(coded, model.quant[l])
            if symbols is not None:
                symbols.append(quantize(coded, model.quant[l]))
        else:
            deq, mask = coded, None
        rec = pair.P_inv @ deq + pair.mean.astype(z.dtype)[:, None]
        a = inverse_channel_reshape(rec, z.shape)
        taps.append(a)
        h, pcache = net.pool_forward(l, a)
        if record:
            ctx.append((bcache, pcache, zc, deq, mask, z.shape))
    logits, hshape = net.head_forward(h)
    if record:
        ctx.append(hshape)
    return TapSet(taps, logits), (ctx if record else None)


def hint_loss(taps, student_taps):
    """Sum over layers of the per-sample Frobenius distance, averaged over the batch."""
    if len(taps) != len(student_taps):
        raise ShapeError("tap lists differ in length")
    total = 0.0
    for a, b in zip(taps, student_taps):
        a = np.asarray(a)
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ShapeError(f"tap shapes differ: {a.shape} vs {b.shape}")
        diff = (a.astype(np.float64) - b).reshape(len(a), -1)
        total += float(np.mean(np.sqrt(np.sum(diff * diff, axis=1))))
    return total


def kd_loss(logits, student_logits):
    """Mean KL(softmax(teacher) || softmax(student)) at temperature 1."""
    o = np.asarray(logits, dtype=np.float64)
    s = np.asarray(student_logits, dtype=np.float64)
    if o.shape != s.shape:
        raise ShapeError(f"logit shapes differ: {o.shape} vs {s.shape}")
    o = np.atleast_2d(o)
    s = np.atleast_2d(s)
    lp = log_softmax(o)
    lq = log_softmax(s)
    return max(float(np.mean(np.sum(np.exp(lp) * (lp - lq), axis=1))), 0.0)


def loss_and_grads(model, images, teacher=None):
    """Loss of the student against the teacher and its gradient w.r.t. every (P, P_inv)."""
    net = model.net
    if teacher is None:
        teacher = forward(net, images)
    student, ctx = forward_projected(model, images, record=True)
    loss = LossBreakdown(hint_loss(teacher.taps, student.taps), kd_loss(teacher.logits, student.logits))
    n = len(images)
    dt = net.dtype

    dlogits = ((softmax(student.logits.astype(np.float64)) - softmax(teacher.logits.astype(np.float64))) / n).astype(dt)
    dh = net.head_backward(dlogits, ctx[-1])
    grads = [None] * len(model.pairs)
    for l in reversed(range(len(model.pairs))):
        bcache, pcache, zc, deq, mask, shape = ctx[l]
        pair = model.pairs[l]
        da = net.pool_backward(l, dh, pcache)
        diff = (student.taps[l] - teacher.taps[l]).reshape(n, -1)
        norms = np.sqrt(np.sum(diff.astype(np.float64) ** 2, axis=1))
        coef = np.where(norms > 0, 1.0 / np.where(norms > 0, norms, 1.0), 0.0) / n
        da = da + (diff * coef[:, None].astype(dt)).reshape(shape)

        g = channel_reshape(da)
        d_pinv = g @ deq.T
        d_deq = pair.P_inv.T @ g
        d_coded = d_deq * mask if mask is not None else d_deq
        d_p = d_coded @ zc.T
        grads[l] = (d_p, d_pinv)
        if l > 0:
            dz = inverse_channel_reshape(pair.P.T @ d_coded, shape)
            dh = net.block_backward(l, dz, bcache)
    return loss, grads


def sgd_step(model, grads, lr):
    pairs = []
    for pair, (d_p, d_pinv) in zip(model.pairs, grads):
        pairs.append(replace(
            pair,
            P=(pair.P - pair.P.dtype.type(lr) * d_p).astype(pair.P.dtype),
            P_inv=(pair.P_inv - pair.P_inv.dtype.type(lr) * d_pinv).astype(pair.P_inv.dtype),
        ))
    return model.with_pairs(pairs)


def train_projections(model, images, epochs=3, lr=1e-3, seed=0, batch_size=64):
    """Plain SGD on hint + KD loss over the projection pairs only.

    Takes unlabeled ``images``: the teacher's taps and logits are the only
    targets. Returns ``(trained_model, history)`` with one history row
    ``(epoch, step, hint, kd, total)`` per step.
    """
    images = np.asarray(images)
    rng = np.random.default_rng(seed)
    history = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        for s in range(0, len(order), batch_size):
            batch = images[order[s:s + batch_size]]
            loss, grads = loss_and_grads(model, batch)
            if not np.isfinite(loss.total):
                raise NumericalFailure(f"loss became {loss.total} at epoch {epoch} step {step}")
            history.append((epoch, step, loss.hint, loss.kd, loss.total))
            if lr != 0:
                model = sgd_step(model, grads, lr)
            step += 1
        ep = [r[4] for r in history if r[0] == epoch]
        log.info("projection epoch %d mean loss %.5f", epoch, float(np.mean(ep)) if ep else float("nan"))
    return model, history


def predict_projected(model, images, batch_size=256):
    out = []
    for s in range(0, len(images), batch_size):
        taps, _ = forward_projected(model, images[s:s + batch_size])
        out.append(taps.logits.argmax(axis=1))
    return np.concatenate(out)


def projected_accuracy(model, data, batch_size=256):
    return float(np.mean(predict_projected(model, data.images, batch_size) == data.labels))


def write_loss_csv(path, history):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "step", "hint", "kd", "total"])
        for epoch, step, hint, kd, total in history:
            w.writerow([epoch, step, f"{hint:.9g}", f"{kd:.9g}", f"{total:.9g}"])


def forward_projected_inputs(model, images, batch_size=256):
    """Per-layer student activations entering each projection (post-ReLU, pre-projection)."""
    net = model.net
    chunks = [[] for _ in model.pairs]
    for s in range(0, len(images), batch_size):
        h = np.asarray(images[s:s + batch_size]).astype(net.dtype, copy=False)
        for l, pair in enumerate(model.pairs):
            z, _ = net.block_forward(l, h)
            chunks[l].append(z)
            zc = channel_reshape(z) - pair.mean.astype(z.dtype)[:, None]
            coded = pair.P @ zc
            if model.quantize:
                coded, _ = fake_quantize(coded, model.quant[l])
            rec = pair.P_inv @ coded + pair.mean.astype(z.dtype)[:, None]
            h, _ = net.pool_forward(l, inverse_channel_reshape(rec, z.shape))
    return [np.concatenate(c) for c in chunks]
