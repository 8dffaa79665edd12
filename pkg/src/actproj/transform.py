"""Channel PCA spectra and the (P, P_inv) projection pairs built from them.

Rows of ``P`` are eigenvectors, so :func:`project` maps activations into
coefficient space and :func:`reconstruct` maps back. Channel means are
subtracted before projecting and added back after the inverse, which keeps
the top component from being spent on the mean.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (
    ShapeError,
    ValidationError,
    channel_reshape,
    inverse_channel_reshape,
    read_atsr,
    read_manifest,
    sym_eig,
    write_atsr,
    write_manifest,
)


class ReductionFloorError(ValueError):
    pass


@dataclass(frozen=True)
class EigenSpectrum:
    layer: int
    sigma_sq: np.ndarray
    basis: np.ndarray
    mean: np.ndarray

    @property
    def d(self):
        return len(self.sigma_sq)

    def energy_fraction(self, k):
        total = float(np.sum(self.sigma_sq))
        return float(np.sum(self.sigma_sq[:k])) / total if total > 0 else 1.0


def channel_covariance(acts):
    """Mean-centred channel covariance in float64; returns ``(cov, mean, n_samples)``."""
    ac = channel_reshape(acts).astype(np.float64)
    mean = ac.mean(axis=1)
    centred = ac - mean[:, None]
    n = ac.shape[1]
    return centred @ centred.T / n, mean, n


def compute_spectrum(acts, layer=0):
    cov, mean, n = channel_covariance(acts)
    d = cov.shape[0]
    if n < d:
        warnings.warn(
            f"layer {layer}: {n} samples for {d} channels, adding ridge to the covariance",
            RuntimeWarning,
            stacklevel=2,
        )
        cov = cov + np.eye(d) * (1e-6 * np.trace(cov) / d)
    eig = sym_eig(cov)
    vals = eig.eigenvalues.copy()
    vals[(vals < 0) & (vals >= -1e-9 * max(1.0, float(np.max(np.abs(vals)))))] = 0.0
    vals = np.maximum(vals, 0.0)
    return EigenSpectrum(layer, vals, eig.eigenvectors, mean)


@dataclass(frozen=True)
class ProjectionPair:
    layer: int
    P: np.ndarray
    P_inv: np.ndarray
    d_full: int
    mean: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mean is None:
            object.__setattr__(self, "mean", np.zeros(self.d_full, dtype=self.P.dtype))
        k = self.P.shape[0]
        if not 1 <= k <= self.d_full:
            raise ValidationError(f"d_active must lie in [1, {self.d_full}], got {k}")
        if self.P.shape != (k, self.d_full) or self.P_inv.shape != (self.d_full, k):
            raise ShapeError(f"inconsistent pair shapes P{self.P.shape}, P_inv{self.P_inv.shape}")
        if self.mean.shape != (self.d_full,):
            raise ShapeError("mean must have one entry per full channel")

    @property
    def d_active(self):
        return self.P.shape[0]

    def astype(self, dtype):
        return ProjectionPair(self.layer, self.P.astype(dtype), self.P_inv.astype(dtype), self.d_full, self.mean.astype(dtype))

    def with_active(self, k):
        if not 1 <= k <= self.d_active:
            raise ValidationError(f"cannot keep {k} of {self.d_active} rows")
        return replace(self, P=self.P[:k].copy(), P_inv=self.P_inv[:, :k].copy())


def pca_pair(spectrum, d_active=None, dtype=np.float32):
    d_active = spectrum.d if d_active is None else d_active
    P = spectrum.basis.T[:d_active]
    return ProjectionPair(
        spectrum.layer,
        P.astype(dtype),
        P.T.astype(dtype).copy(),
        spectrum.d,
        spectrum.mean.astype(dtype),
    )


def identity_pair(d, layer=0, dtype=np.float32):
    """No transform: P = I and zero mean (plain quantize + VLC of the raw channels)."""
    eye = np.eye(d, dtype=dtype)
    return ProjectionPair(layer, eye, eye.copy(), d)


def project(pair, acts):
    """``P @ (A_c - mean)``; returns the (d_active, n*h*w) coefficient matrix."""
    acts = np.asarray(acts)
    if acts.ndim != 4 or acts.shape[1] != pair.d_full:
        raise ShapeError(f"expected {pair.d_full} channels, got activations of shape {acts.shape}")
    ac = channel_reshape(acts)
    return pair.P @ (ac - pair.mean.astype(ac.dtype)[:, None])


def reconstruct(pair, coded, shape):
    coded = np.asarray(coded)
    if coded.ndim != 2 or coded.shape[0] != pair.d_active:
        raise ShapeError(f"expected {pair.d_active} coded rows, got {coded.shape}")
    ac = pair.P_inv @ coded + pair.mean.astype(coded.dtype)[:, None]
    return inverse_channel_reshape(ac, shape)


def truncate_row(pair):
    """Drop the last row of P and last column of P_inv."""
    if pair.d_active <= 1:
        raise ReductionFloorError(f"layer {pair.layer} is already at one retained dimension")
    return pair.with_active(pair.d_active - 1)


def save_pairs(pairs, directory, extra=None):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = dict(extra or {})
    for pair in pairs:
        l = pair.layer
        for name, arr in (("P", pair.P), ("P_inv", pair.P_inv), ("mean", pair.mean)):
            fname = f"layer{l}.{name}.atsr"
            write_atsr(directory / fname, arr)
            entries[f"layer{l}.{name}"] = fname
        entries[f"layer{l}.d_full"] = str(pair.d_full)
        entries[f"layer{l}.d_active"] = str(pair.d_active)
    write_manifest(directory / "pairs.txt", entries)


def load_pairs(directory):
    directory = Path(directory)
    entries = read_manifest(directory / "pairs.txt")
    layers = sorted({int(k[5:].split(".")[0]) for k in entries if k.startswith("layer")})
    pairs = []
    for l in layers:
        pair = ProjectionPair(
            l,
            read_atsr(directory / entries[f"layer{l}.P"]),
            read_atsr(directory / entries[f"layer{l}.P_inv"]),
            int(entries[f"layer{l}.d_full"]),
            read_atsr(directory / entries[f"layer{l}.mean"]),
        )
        if pair.d_active != int(entries[f"layer{l}.d_active"]):
            raise ValidationError(f"layer {l}: manifest d_active disagrees with P")
        pairs.append(pair)
    return pairs


def save_spectra(spectra, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = {}
    for sp in spectra:
        l = sp.layer
        # float32 on disk would round eigenvalues; keep a text copy at full precision
        entries[f"layer{l}.sigma_sq"] = " ".join(repr(float(v)) for v in sp.sigma_sq)
        entries[f"layer{l}.mean"] = " ".join(repr(float(v)) for v in sp.mean)
        write_atsr(directory / f"layer{l}.basis.atsr", sp.basis)
        entries[f"layer{l}.basis"] = f"layer{l}.basis.atsr"
        entries[f"layer{l}.d_full"] = str(sp.d)
    write_manifest(directory / "spectra.txt", entries)


def load_spectra(directory):
    directory = Path(directory)
    entries = read_manifest(directory / "spectra.txt")
    layers = sorted({int(k[5:].split(".")[0]) for k in entries if k.startswith("layer")})
    out = []
    for l in layers:
        sig = np.array([float(v) for v in entries[f"layer{l}.sigma_sq"].split()])
        mean = np.array([float(v) for v in entries[f"layer{l}.mean"].split()])
        basis = read_atsr(directory / entries[f"layer{l}.basis"]).astype(np.float64)
        out.append(EigenSpectrum(l, sig, basis, mean))
    return out
