"""Dense tensor helpers, a cyclic Jacobi eigensolver and the ATSR tensor file format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

ATSR_MAGIC = b"ATSR"
ATSR_VERSION = 1


class ShapeError(ValueError):
    pass


class ValidationError(ValueError):
    pass


class ConvergenceError(ArithmeticError):
    def __init__(self, message, residual):
        super().__init__(f"{message} (residual={residual:.3e})")
        self.residual = residual


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def channel_reshape(acts):
    """(n, d, h, w) activations -> (d, n*h*w); row ``c`` holds every value of channel ``c``."""
    acts = np.asarray(acts)
    if acts.ndim != 4:
        raise ShapeError(f"activation tensor must have rank 4, got shape {acts.shape}")
    n, d, h, w = acts.shape
    return np.ascontiguousarray(acts.transpose(1, 0, 2, 3)).reshape(d, n * h * w)


def inverse_channel_reshape(mat, shape):
    n, d, h, w = shape
    mat = np.asarray(mat)
    if mat.shape != (d, n * h * w):
        raise ShapeError(f"cannot restore {mat.shape} to activation shape {tuple(shape)}")
    return np.ascontiguousarray(mat.reshape(d, n, h, w).transpose(1, 0, 2, 3))


@dataclass(frozen=True)
class SymEigResult:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    sweeps: int = 0


def _canonical_signs(vecs):
    # largest-magnitude component positive; argmax picks the lowest index on ties
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


def sym_eig(c, tol=1e-10, max_sweeps=100, sym_tol=1e-9):
    """Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.

    Eigenvalues come back in descending order, eigenvector ``i`` is column ``i``.
    Sweeps stop once the largest off-diagonal magnitude falls to
    ``tol * max|c|``, so the stopping rule does not depend on the matrix scale.
    """
    a = np.array(c, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ShapeError(f"sym_eig expects a non-empty square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValidationError("matrix contains NaN or Inf")
    scale = float(np.max(np.abs(a)))
    asym = float(np.max(np.abs(a - a.T)))
    if asym > sym_tol * scale:
        raise ValidationError(f"matrix is not symmetric (max |C - C^T| = {asym:.3e})")
    a = 0.5 * (a + a.T)
    d = a.shape[0]
    v = np.eye(d)
    limit = tol * scale

    def off_max(m):
        if d == 1:
            return 0.0
        return float(np.max(np.abs(m - np.diag(np.diag(m)))))

    sweeps = 0
    off = off_max(a)
    while off > limit:
        if sweeps >= max_sweeps:
            raise ConvergenceError("Jacobi iteration did not converge", off)
        sweeps += 1
        for p in range(d - 1):
            for q in range(p + 1, d):
                apq = a[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                cs = 1.0 / np.sqrt(t * t + 1.0)
                sn = t * cs
                # A <- J^T A J on rows/cols p, q
                ap = a[:, p].copy()
                aq = a[:, q].copy()
                a[:, p] = cs * ap - sn * aq
                a[:, q] = sn * ap + cs * aq
                ap = a[p, :].copy()
                aq = a[q, :].copy()
                a[p, :] = cs * ap - sn * aq
                a[q, :] = sn * ap + cs * aq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = cs * vp - sn * vq
                v[:, q] = sn * vp + cs * vq
        off = off_max(a)

    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = _canonical_signs(v[:, order])
    return SymEigResult(vals, vecs, sweeps)


def write_atsr(path, array):
    arr = np.asarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(ATSR_MAGIC)
        fh.write(struct.pack("<BI", ATSR_VERSION, arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_atsr(path):
    raw = Path(path).read_bytes()
    if raw[:4] != ATSR_MAGIC:
        raise ValidationError(f"{path}: not an ATSR file")
    version, rank = struct.unpack_from("<BI", raw, 4)
    if version != ATSR_VERSION:
        raise ValidationError(f"{path}: unsupported ATSR version {version}")
    offset = 9
    dims = struct.unpack_from(f"<{rank}I", raw, offset)
    offset += 4 * rank
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
    if offset + 4 * count != len(raw):
        raise ValidationError(f"{path}: payload length does not match extents {dims}")
    return data.reshape(dims).astype(np.float32)


def parse_manifest(text, source="<text>"):
    """``key = value`` lines; ``#`` starts a comment."""
    entries = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValidationError(f"{source}: malformed line {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def read_manifest(path):
    return parse_manifest(Path(path).read_text(), path)


def write_manifest(path, entries):
    lines = [f"{k} = {v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n")
