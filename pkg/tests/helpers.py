"""Shared oracles for the projection-training tests."""

import numpy as np

from actproj import training
from actproj.refnet import forward
from actproj.training import ProjectedModel, calibrate_quantizers, loss_and_grads
from actproj.transform import compute_spectrum, pca_pair


def perturbed_model(net, images, dims, seed=0, noise=0.05, quantize=False):
    """Truncated PCA pairs with random perturbations so P_inv != P.T."""
    rng = np.random.default_rng(seed)
    taps = forward(net, images).taps
    pairs = []
    for l, (a, k) in enumerate(zip(taps, dims)):
        p = pca_pair(compute_spectrum(a, l), k, dtype=net.dtype)
        pairs.append(type(p)(l, p.P + noise * rng.normal(size=p.P.shape), p.P_inv + noise * rng.normal(size=p.P_inv.shape),
                             p.d_full, p.mean))
    quant = calibrate_quantizers(net, pairs, images) if quantize else None
    return ProjectedModel(net, pairs, quant, quantize=quantize)


def finite_difference_check(model, images, n_entries=6, eps=1e-6, seed=0, loss_fn=None):
    """Worst relative error between analytic and central-difference gradients.

    Samples ``n_entries`` entries from each P and P_inv, favouring entries with
    large analytic gradient so the relative error is meaningful.
    """
    loss_fn = loss_fn or (lambda m: loss_and_grads(m, images)[0].total)
    _, grads = loss_and_grads(model, images)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for l, (d_p, d_pinv) in enumerate(grads):
        for which, g in (("P", d_p), ("P_inv", d_pinv)):
            flat = np.abs(g).ravel()
            candidates = np.argsort(flat)[-max(4 * n_entries, 1):]
            for idx in rng.choice(candidates, min(n_entries, len(candidates)), replace=False):
                vals = []
                for sign in (1, -1):
                    pairs = list(model.pairs)
                    mat = getattr(pairs[l], which).copy()
                    mat.flat[idx] += sign * eps
                    pairs[l] = _replace(pairs[l], which, mat)
                    vals.append(loss_fn(model.with_pairs(pairs)))
                fd = (vals[0] - vals[1]) / (2 * eps)
                an = g.flat[idx]
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def _replace(pair, which, mat):
    from dataclasses import replace
    return replace(pair, **{which: mat})


def frozen_noise_loss(model, images):
    """Loss of the straight-through surrogate: quantization noise frozen at ``model``'s point.

    Inside the clip range the surrogate is ``coded + noise`` (identity
    gradient); outside it the dequantized value is a constant.
    """
    frozen = []
    real = training.fake_quantize

    def record(values, params):
        deq, mask = real(values, params)
        frozen.append((deq - values, deq, mask))
        return deq, mask

    training.fake_quantize = record
    try:
        training.forward_projected(model, images)
    finally:
        training.fake_quantize = real

    def surrogate_loss(m):
        calls = iter(frozen)

        def fake(values, params):
            noise, deq0, mask0 = next(calls)
            return np.where(mask0, values + noise, deq0), mask0

        training.fake_quantize = fake
        try:
            return loss_and_grads(m, images)[0].total
        finally:
            training.fake_quantize = real

    return surrogate_loss


ACCEPTANCE_LINES = []


def report(number, passed, detail):
    """Record and print one acceptance verdict line."""
    line = f"{'PASS' if passed else 'FAIL'}  criterion {number:>2}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed
