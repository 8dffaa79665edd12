"""Dimension-reduction policies: cumulative-eigenvalue threshold and greedy selection.

The greedy search removes one projection row per step from the layer with
the smallest ``proxy / delta_bits``, where the proxy is the share of the
last retained eigenvalue and ``delta_bits`` is the encoded-size saving of
dropping that row.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .codec import N_SYMBOLS, SCALE_BITS, SYMBOL_OFFSET, TABLE_BITS, bit_account, payload_bits, quantize
from .numerics import ValidationError, read_manifest, write_manifest
from .transform import ReductionFloorError, project

log = logging.getLogger(__name__)

LAYER_OVERHEAD = TABLE_BITS + SCALE_BITS


@dataclass
class ReductionPlan:
    dims: list
    policy: str
    param: float
    achieved_bits: int | None = None
    unmet_budget: bool = False

    def save(self, path):
        entries = {
            "policy": self.policy,
            "param": format_param(self.param),
            "achieved_bits": str(self.achieved_bits),
            "unmet_budget": str(int(self.unmet_budget)),
        }
        for l, d in enumerate(self.dims):
            entries[f"layer{l}"] = str(int(d))
        write_manifest(path, entries)

    @classmethod
    def load(cls, path):
        e = read_manifest(path)
        dims = []
        while f"layer{len(dims)}" in e:
            dims.append(int(e[f"layer{len(dims)}"]))
        bits = None if e.get("achieved_bits", "None") == "None" else int(e["achieved_bits"])
        return cls(dims, e["policy"], float(e["param"]), bits, bool(int(e.get("unmet_budget", "0"))))


def format_param(value):
    value = float(value)
    return str(int(value)) if value.is_integer() else repr(value)


def threshold_dr(spectra, T):
    """Smallest k per layer whose cumulative eigenvalue share reaches ``T``."""
    if not 0 < T <= 1:
        raise ValidationError(f"threshold must lie in (0, 1], got {T}")
    dims = []
    for sp in spectra:
        sig = np.asarray(sp.sigma_sq if hasattr(sp, "sigma_sq") else sp, dtype=np.float64)
        total = float(np.sum(sig))
        if total <= 0:
            warnings.warn("all-zero spectrum, keeping a single dimension", RuntimeWarning, stacklevel=2)
            dims.append(1)
            continue
        share = np.cumsum(sig) / total
        if T >= 1:
            k = len(sig)
        else:
            # tiny slack so a share that should equal T is not lost to rounding
            k = int(np.argmax(share >= T - 1e-12)) + 1
        dims.append(max(1, min(k, len(sig))))
    return ReductionPlan(dims, "threshold", T)


def accuracy_proxy(spectrum, d_active, use_sigma=False):
    """Share of the last retained eigenvalue among the retained ones.

    With ``use_sigma`` the square roots of the eigenvalues are used instead.
    """
    sig = np.asarray(spectrum.sigma_sq if hasattr(spectrum, "sigma_sq") else spectrum, dtype=np.float64)
    if not 1 <= d_active <= len(sig):
        raise ValidationError(f"d_active {d_active} outside [1, {len(sig)}]")
    if use_sigma:
        sig = np.sqrt(np.maximum(sig, 0.0))
    denom = float(np.sum(sig[:d_active]))
    if denom <= 0:
        return 0.0
    return float(sig[d_active - 1]) / denom


def encoded_bits(coded, quant):
    """B(.) of one coded (rows, values) tensor, table and scale included."""
    return bit_account([coded], [quant]).total_bits


def delta_bits(pair, acts, quant):
    """Bits saved by dropping the last row of ``pair`` on activations ``acts``."""
    if pair.d_active <= 1:
        raise ReductionFloorError(f"layer {pair.layer} is at the one-row floor")
    coded = project(pair, acts)
    return encoded_bits(coded, quant) - encoded_bits(coded[:-1], quant)


def row_histograms(pair, acts, quant):
    """(d_active, 256) symbol histograms, one per projected row."""
    symbols = quantize(project(pair, acts), quant).astype(np.int64) + SYMBOL_OFFSET
    rows = symbols.shape[0]
    flat = symbols + (np.arange(rows) * N_SYMBOLS)[:, None]
    return np.bincount(flat.ravel(), minlength=rows * N_SYMBOLS).reshape(rows, N_SYMBOLS)


class LayerBitsTable:
    """Encoded bits of one layer for every prefix of its projection rows."""

    def __init__(self, hist):
        self.prefix = np.cumsum(hist, axis=0)
        self._cache = {}

    def bits(self, k):
        if k not in self._cache:
            self._cache[k] = payload_bits(self.prefix[k - 1]) + LAYER_OVERHEAD
        return self._cache[k]

    def delta(self, k):
        return self.bits(k) - self.bits(k - 1)


def collect_projection_inputs(model, images, batch_size=256):
    """Student activations entering each projection, on ``images``."""
    from .training import forward_projected_inputs

    return forward_projected_inputs(model, images, batch_size)


def layer_tables(model, images, batch_size=256):
    inputs = collect_projection_inputs(model, images, batch_size)
    return [LayerBitsTable(row_histograms(p, z, q)) for p, z, q in zip(model.pairs, inputs, model.quant)]


def plan_bits(model, dims, images, strict=False, tables=None):
    """Calibration-batch bits of ``model`` truncated to ``dims``.

    Non-strict accounting encodes the activations of the untruncated model
    (as the greedy search caches them); strict accounting re-runs the
    forward pass with the truncated pairs.
    """
    if strict:
        tables = layer_tables(model.with_dims(dims), images)
        return sum(t.bits(k) for t, k in zip(tables, dims))
    if tables is None:
        tables = layer_tables(model, images)
    return sum(t.bits(k) for t, k in zip(tables, dims))


@dataclass
class TraceRow:
    step: int
    layer: int
    d_before: int
    d_after: int
    delta_bits: int
    proxy: float
    metric: float
    total_bits: int


@dataclass
class SelectionState:
    model: object
    spectra: list
    images: np.ndarray
    dims: list = field(default_factory=list)
    tables: list = field(default_factory=list)
    delta_n: list = field(default_factory=list)
    total_bits: int = 0
    use_sigma: bool = False
    strict: bool = False
    labels: np.ndarray | None = None

    @classmethod
    def build(cls, model, spectra, images, use_sigma=False, strict=False, labels=None):
        state = cls(model, spectra, np.asarray(images), list(model.dims), use_sigma=use_sigma,
                    strict=strict, labels=labels)
        state.refresh()
        return state

    def refresh(self):
        """Re-encode every layer from a forward pass at the current dims."""
        current = self.model.with_dims(self.dims) if self.strict else self.model
        self.tables = layer_tables(current, self.images)
        self._recompute_all()

    def _recompute_all(self):
        self.delta_n = [t.delta(k) if k > 1 else 0 for t, k in zip(self.tables, self.dims)]
        self.total_bits = sum(t.bits(k) for t, k in zip(self.tables, self.dims))

    def eligible(self):
        return [l for l, k in enumerate(self.dims) if k > 1]

    def proxy(self, l):
        if self.labels is not None:
            return self._measured_drop(l)
        return accuracy_proxy(self.spectra[l], self.dims[l], self.use_sigma)

    def metric(self, l):
        dn = self.delta_n[l]
        if dn <= 0:
            return float("inf")
        return self.proxy(l) / dn

    def _measured_drop(self, l):
        from .training import predict_projected

        base = self.model.with_dims(self.dims)
        dims = list(self.dims)
        dims[l] -= 1
        trial = self.model.with_dims(dims)
        acc0 = float(np.mean(predict_projected(base, self.images) == self.labels))
        acc1 = float(np.mean(predict_projected(trial, self.images) == self.labels))
        return acc0 - acc1

    def truncate(self, l):
        if self.dims[l] <= 1:
            raise ReductionFloorError(f"layer {l} is at the one-row floor")
        self.dims[l] -= 1
        if self.strict:
            self.refresh()
        else:
            # only layer l changed; other layers' cached bits stay valid
            k = self.dims[l]
            self.total_bits -= self.delta_n[l]
            self.delta_n[l] = self.tables[l].delta(k) if k > 1 else 0


def greedy_dr(state, budget_bits):
    """Truncate one row at a time until ``state.total_bits <= budget_bits``.

    Returns ``(plan, trace)``. When every layer reaches one row first, the
    plan is returned with ``unmet_budget`` set.
    """
    trace = []
    step = 0
    while state.total_bits > budget_bits:
        eligible = state.eligible()
        if not eligible:
            break
        scored = [(state.metric(l), l, state.proxy(l)) for l in eligible]
        metric, l, proxy = min(scored, key=lambda t: (t[0], t[1]))
        d_before = state.dims[l]
        dn = state.delta_n[l]
        state.truncate(l)
        step += 1
        trace.append(TraceRow(step, l, d_before, d_before - 1, dn, proxy, metric, state.total_bits))
    unmet = state.total_bits > budget_bits
    if unmet:
        log.warning("budget %d bits unreachable; floor plan uses %d bits", budget_bits, state.total_bits)
    plan = ReductionPlan(list(state.dims), "greedy", float(budget_bits), int(state.total_bits), unmet)
    return plan, trace


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "layer", "d_before", "d_after", "delta_bits", "proxy", "metric", "total_bits"])
        for r in trace:
            w.writerow([r.step, r.layer, r.d_before, r.d_after, r.delta_bits,
                        f"{r.proxy:.9g}", f"{r.metric:.9g}", r.total_bits])


def read_trace_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [
        TraceRow(int(r["step"]), int(r["layer"]), int(r["d_before"]), int(r["d_after"]),
                 int(r["delta_bits"]), float(r["proxy"]), float(r["metric"]), int(r["total_bits"]))
        for r in rows
    ]
