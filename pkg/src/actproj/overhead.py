"""Per-image MAC counts for the original, folded-projection and inverse-projection paths."""

from __future__ import annotations

import csv
from dataclasses import dataclass

from .numerics import ShapeError


@dataclass(frozen=True)
class ConvSpec:
    """A tapped convolution: ``cin -> cout`` with a ``k x k`` kernel on an ``h x w`` output map."""

    cin: int
    cout: int
    k: int
    h: int
    w: int

    def macs(self, cout=None):
        return (self.cout if cout is None else cout) * self.cin * self.k * self.k * self.h * self.w


@dataclass(frozen=True)
class MacReport:
    c_original: int
    c_folded: int
    c_inverse: int
    c_learnable: int = 0

    @property
    def relative_pct(self):
        return 100.0 * (self.c_folded + self.c_inverse) / self.c_original

    @property
    def unfolded_pct(self):
        return 100.0 * (self.c_original + self.c_learnable + self.c_inverse) / self.c_original


def refnet_layers(net):
    specs = []
    cin = 3
    for l, cout in enumerate(net.channels):
        _, _, h, w = net.tap_shape(l)
        specs.append(ConvSpec(cin, cout, 3, h, w))
        cin = cout
    return specs


def count_macs(dims, layers, extra_macs=0):
    """MAC counts for retained dims ``dims`` (None: no projections at all).

    A folded conv produces only ``d'`` output channels; the inverse
    projection restores ``d`` channels at ``d * d'`` MACs per position.
    ``extra_macs`` covers untapped layers such as the classifier.
    """
    original = sum(s.macs() for s in layers) + extra_macs
    if dims is None:
        return MacReport(original, original, 0, 0)
    dims = list(getattr(dims, "dims", dims))
    if len(dims) != len(layers):
        raise ShapeError(f"plan has {len(dims)} layers, net has {len(layers)}")
    folded = extra_macs
    inverse = learnable = 0
    for s, k in zip(layers, dims):
        if not 1 <= k <= s.cout:
            raise ShapeError(f"retained dims {k} outside [1, {s.cout}]")
        folded += s.macs(cout=k)
        inverse += s.cout * k * s.h * s.w
        learnable += k * s.cout * s.h * s.w
    return MacReport(original, folded, inverse, learnable)


def count_refnet_macs(dims, net):
    """Conv and classifier MACs of the reference net under ``dims``."""
    fc = net.params["fc.weight"].size
    return count_macs(dims, refnet_layers(net), extra_macs=fc)


def write_mac_csv(path, rows):
    """``rows``: iterable of ``(policy, param, MacReport)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "param", "c_original", "c_folded", "c_inverse", "relative_pct"])
        for policy, param, rep in rows:
            w.writerow([policy, param, rep.c_original, rep.c_folded, rep.c_inverse, f"{rep.relative_pct:.3f}"])
