"""End-to-end experiment steps. Every step reads and writes under the config's run directory."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .codec import BitReport, LayerBits, QuantParams, calibrate_quant, payload_bits, symbol_histogram
from .numerics import ValidationError, read_manifest, write_manifest
from .overhead import count_refnet_macs, write_mac_csv
from .reduction import (
    ReductionPlan,
    SelectionState,
    format_param,
    greedy_dr,
    layer_tables,
    plan_bits,
    threshold_dr,
    write_trace_csv,
)
from .refnet import forward, load_cifar10_splits, load_refnet, make_splits, pretrain_reference, save_refnet
from .training import ProjectedModel, calibrate_quantizers, forward_projected, train_projections, write_loss_csv
from .transform import compute_spectrum, identity_pair, load_pairs, load_spectra, pca_pair, save_pairs, save_spectra

log = logging.getLogger(__name__)

RESULT_COLUMNS = [
    "method", "plan", "policy", "param", "dims", "accuracy", "accuracy_drop", "total_bits",
    "bits_per_value", "payload_bits_per_value", "compression_ratio", "calib_bits",
]


class UnmetBudget(RuntimeError):
    pass


def load_data(config):
    if config.dataset == "cifar10":
        return load_cifar10_splits(config.cifar_dir, config.calibration_size, config.seed)
    return make_splits(
        config.seed,
        n_train_per_class=config.n_train_per_class,
        n_calibration=config.calibration_size,
        n_eval_per_class=config.n_eval_per_class,
    )


def _run_dir(config):
    run = config.run_dir()
    run.mkdir(parents=True, exist_ok=True)
    (run / "config.txt").write_text(config.to_text(skip=("output_dir",)))
    return run


def _need(path, step):
    if not Path(path).exists():
        raise ValidationError(f"{path} is missing; run `{step}` first")
    return path


# ---------------------------------------------------------------- pretrain

def cmd_pretrain(config, data=None):
    run = _run_dir(config)
    data = data or load_data(config)
    net = pretrain_reference(data, epochs=config.pretrain_epochs, seed=config.seed, lr=config.pretrain_lr,
                             min_accuracy=config.min_pretrain_accuracy)
    save_refnet(net, run / "refnet")
    write_manifest(run / "pretrain_report.txt", {
        "accuracy": repr(net.meta["eval_accuracy"]),
        "epochs": str(config.pretrain_epochs),
        "seed": str(config.seed),
    })
    return net


def load_net(run):
    return load_refnet(_need(run / "refnet", "pretrain"))


# ---------------------------------------------------------------- calibrate

def _save_quant(path, quant):
    write_manifest(path, {f"layer{l}.scale": repr(q.scale) for l, q in enumerate(quant)})


def _load_quant(path):
    e = read_manifest(path)
    return [QuantParams(float(e[f"layer{l}.scale"])) for l in range(len(e))]


def cmd_calibrate(config, data=None):
    """PCA spectra, full-rank PCA pairs and frozen quantizer scales for every tap."""
    run = _run_dir(config)
    net = load_net(run)
    data = data or load_data(config)
    images = data.calibration.images
    taps = [[] for _ in range(net.n_layers)]
    for s in range(0, len(images), 256):
        for l, a in enumerate(forward(net, images[s:s + 256]).taps):
            taps[l].append(a)
    spectra = [compute_spectrum(np.concatenate(t), l) for l, t in enumerate(taps)]
    pairs = [pca_pair(sp) for sp in spectra]
    quant = calibrate_quantizers(net, pairs, images)
    out = run / "calib"
    save_spectra(spectra, out)
    save_pairs(pairs, out / "pca")
    _save_quant(out / "quant.txt", quant)
    # quantizers for the no-transform baseline: raw post-ReLU activations
    raw_quant = [calibrate_quant(np.concatenate(t)) for t in taps]
    _save_quant(out / "quant_raw.txt", raw_quant)
    return spectra, quant


def load_pca_model(run, net=None):
    """Full-rank PCA pairs and quantizers of a calibrated run directory."""
    net = net or load_net(run)
    calib = _need(run / "calib", "calibrate")
    pairs = load_pairs(calib / "pca")
    return ProjectedModel(net, pairs, _load_quant(calib / "quant.txt"))


# ---------------------------------------------------------------- reduce

def _plan_index(run):
    path = run / "plans" / "index.txt"
    return read_manifest(path) if path.exists() else {}


def _reduction_base(config, run, net=None):
    """Model whose activations drive the reduction search."""
    if config.order == "train-then-reduce":
        net = net or load_net(run)
        pca = load_pca_model(run, net)
        pairs = load_pairs(_need(run / "trained" / "full", "train"))
        return pca.with_pairs(pairs)
    return load_pca_model(run, net)


def cmd_reduce(config, data=None, policy=None, thresholds=None, budget_bits=None):
    """Threshold sweep and/or greedy search; writes plans, traces and an index."""
    run = _run_dir(config)
    data = data or load_data(config)
    policy = policy or config.policy
    thresholds = tuple(thresholds or config.thresholds)
    budget_bits = config.budget_bits if budget_bits is None else budget_bits
    spectra = load_spectra(_need(run / "calib", "calibrate"))
    model = _reduction_base(config, run)
    images = data.calibration.images
    tables = layer_tables(model, images)
    plans_dir = run / "plans"
    plans_dir.mkdir(exist_ok=True)
    index = {}
    plans = {}

    threshold_bits = {}
    if policy in ("threshold", "both") or (policy == "greedy" and not budget_bits):
        for T in thresholds:
            plan = threshold_dr(spectra, T)
            plan.achieved_bits = plan_bits(model, plan.dims, images, config.strict_recompute, tables)
            threshold_bits[T] = plan.achieved_bits
            if policy in ("threshold", "both"):
                name = f"threshold_{T:g}"
                plan.save(plans_dir / f"{name}.txt")
                index[name] = f"{name}.txt"
                plans[name] = plan

    unmet = False
    if policy in ("greedy", "both"):
        budgets = [(f"greedy_{budget_bits}", budget_bits)] if budget_bits else [
            (f"greedy_match-{T:g}", b) for T, b in threshold_bits.items()
        ]
        labels = data.calibration.labels if config.measured_accuracy else None
        for name, budget in budgets:
            state = SelectionState.build(
                model, spectra, images,
                use_sigma=config.proxy == "sigma",
                strict=config.strict_recompute,
                labels=labels,
            )
            plan, trace = greedy_dr(state, budget)
            plan.save(plans_dir / f"{name}.txt")
            write_trace_csv(plans_dir / f"{name}_trace.csv", trace)
            index[name] = f"{name}.txt"
            plans[name] = plan
            unmet |= plan.unmet_budget
    write_manifest(plans_dir / "index.txt", index)
    if unmet:
        raise UnmetBudget("greedy search hit the one-row floor before meeting the budget")
    return plans


def load_plans(run):
    return {name: ReductionPlan.load(run / "plans" / f) for name, f in _plan_index(run).items()}


# ---------------------------------------------------------------- train

def cmd_train(config, data=None):
    """Train projection pairs.

    ``train-then-reduce`` trains the full-rank pairs once. ``reduce-then-train``
    trains the truncated PCA pairs of every plan written by ``reduce``.
    """
    run = _run_dir(config)
    data = data or load_data(config)
    base = load_pca_model(run)
    if config.order == "train-then-reduce":
        jobs = {"full": base.dims}
    else:
        plans = load_plans(run)
        if not plans:
            raise ValidationError("no plans found; run `reduce` before `train` in reduce-then-train order")
        jobs = {name: plan.dims for name, plan in plans.items()}
    trained = {}
    for name, dims in jobs.items():
        model, history = train_projections(
            base.with_dims(dims), data.train.images,
            epochs=config.epochs, lr=config.lr, seed=config.seed, batch_size=config.batch_size,
        )
        out = run / "trained" / name
        save_pairs(model.pairs, out)
        write_loss_csv(out / "loss.csv", history)
        trained[name] = model
    return trained


# ---------------------------------------------------------------- evaluate

@dataclass
class EvalResult:
    accuracy: float
    bits: BitReport


def evaluate_model(model, data, batch_size=256):
    """Eval-split accuracy plus per-layer encoded bits over the whole split."""
    hists = [np.zeros(256, dtype=np.int64) for _ in model.pairs]
    counts = [0] * len(model.pairs)
    correct = 0
    for s in range(0, len(data.images), batch_size):
        symbols = []
        taps, _ = forward_projected(model, data.images[s:s + batch_size], symbols=symbols)
        correct += int(np.sum(taps.logits.argmax(axis=1) == data.labels[s:s + batch_size]))
        for l, sym in enumerate(symbols):
            hists[l] += symbol_histogram(sym)
            counts[l] += sym.size
    n = len(data.images)
    layers = []
    for l, pair in enumerate(model.pairs):
        raw = n * int(np.prod(model.net.tap_shape(l)[1:]))
        layers.append(LayerBits(l, counts[l], raw, payload_bits(hists[l])))
    return EvalResult(correct / n, BitReport(layers))


def _result_row(method, plan, policy, param, dims, result, ref_acc, calib_bits=""):
    rep = result.bits
    return {
        "method": method,
        "plan": plan,
        "policy": policy,
        "param": param,
        "dims": " ".join(str(d) for d in dims),
        "accuracy": repr(result.accuracy),
        "accuracy_drop": repr(ref_acc - result.accuracy),
        "total_bits": str(rep.total_bits),
        "bits_per_value": repr(rep.bits_per_value),
        "payload_bits_per_value": repr(rep.payload_bits_per_value),
        "compression_ratio": repr(rep.compression_ratio),
        "calib_bits": str(calib_bits),
    }


def _trained_for(config, run, name, plan, base):
    if config.order == "train-then-reduce":
        pairs = load_pairs(_need(run / "trained" / "full", "train"))
        return base.with_pairs(pairs).with_dims(plan.dims)
    pairs = load_pairs(_need(run / "trained" / name, "train"))
    if [p.d_active for p in pairs] != list(plan.dims):
        raise ValidationError(f"trained/{name} does not match its plan; rerun `train`")
    return base.with_pairs(pairs)


def cmd_evaluate(config, data=None):
    run = _run_dir(config)
    data = data or load_data(config)
    net = load_net(run)
    base = load_pca_model(run, net)
    ref_acc = net.accuracy(data.eval)
    n_raw = [len(data.eval) * int(np.prod(net.tap_shape(l)[1:])) for l in range(net.n_layers)]
    raw_bits = BitReport([LayerBits(l, n, n, 8 * n, 0, 0) for l, n in enumerate(n_raw)])
    rows = [_result_row("reference", "", "none", "", net.channels, EvalResult(ref_acc, raw_bits), ref_acc)]

    raw_quant = _load_quant(run / "calib" / "quant_raw.txt")
    huff = ProjectedModel(net, [identity_pair(d, l) for l, d in enumerate(net.channels)], raw_quant)
    rows.append(_result_row("huffman", "", "none", "", net.channels, evaluate_model(huff, data.eval), ref_acc))

    for name, plan in load_plans(run).items():
        param = format_param(plan.param)
        pca = base.with_dims(plan.dims)
        rows.append(_result_row("pca", name, plan.policy, param, plan.dims, evaluate_model(pca, data.eval),
                                ref_acc, plan.achieved_bits))
        lp = _trained_for(config, run, name, plan, base)
        rows.append(_result_row("lp", name, plan.policy, param, plan.dims, evaluate_model(lp, data.eval),
                                ref_acc, plan.achieved_bits))
    with open(run / "results.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return rows


# ---------------------------------------------------------------- report

def cmd_report(config):
    """Overhead CSV for every plan plus a plain-text summary of results.csv."""
    run = _run_dir(config)
    net = load_net(run)
    rows = [("none", "", count_refnet_macs(None, net))]
    for name, plan in load_plans(run).items():
        rows.append((plan.policy, format_param(plan.param), count_refnet_macs(plan.dims, net)))
    write_mac_csv(run / "overhead.csv", rows)

    lines = []
    results = run / "results.csv"
    if results.exists():
        with open(results, newline="") as fh:
            res = list(csv.DictReader(fh))
        lines.append(f"{'method':<10}{'policy':<10}{'param':>14}  {'dims':<14}{'acc':>8}{'bpv':>8}{'ratio':>8}")
        for r in res:
            lines.append(
                f"{r['method']:<10}{r['policy']:<10}{r['param']:>14}  {r['dims']:<14}"
                f"{float(r['accuracy']):>8.4f}{float(r['bits_per_value']):>8.3f}{float(r['compression_ratio']):>8.3f}"
            )
    lines.append("")
    lines.append(f"{'policy':<10}{'param':>14}{'relative_pct':>14}")
    for policy, param, rep in rows:
        lines.append(f"{policy:<10}{param:>14}{rep.relative_pct:>14.3f}")
    text = "\n".join(lines) + "\n"
    (run / "summary.txt").write_text(text)
    return text


def run_all(config):
    data = load_data(config)
    cmd_pretrain(config, data)
    cmd_calibrate(config, data)
    if config.order == "train-then-reduce":
        cmd_train(config, data)
        cmd_reduce(config, data)
    else:
        cmd_reduce(config, data)
        cmd_train(config, data)
    cmd_evaluate(config, data)
    return cmd_report(config)
