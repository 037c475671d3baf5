"""Dense float64 matrix kernel.

Matrices are plain 2-D ``numpy.ndarray`` objects of dtype float64.  The
helpers here enforce explicit shapes (no silent broadcasting) and raise
:class:`ShapeError` / :class:`DomainError` on contract violations.
"""
from __future__ import annotations

import io
import os

import numpy as np

__all__ = [
    "ShapeError",
    "DomainError",
    "as_mat",
    "matmul",
    "row_softmax",
    "soft_threshold",
    "fro_inner",
    "fro_norm",
    "seeded_rng",
    "uniform_mat",
    "ones_outer",
    "write_csv",
    "read_csv",
    "dumps_csv",
    "loads_csv",
    "atomic_write",
]


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class DomainError(ValueError):
    """An argument lies outside the operation's domain."""


def as_mat(a) -> np.ndarray:
    """Coerce ``a`` to a 2-D float64 array (scalars become 1x1)."""
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim != 2:
        raise ShapeError(f"expected a matrix, got array with ndim={m.ndim}")
    return m


def _same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a, b) -> np.ndarray:
    a, b = as_mat(a), as_mat(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def row_softmax(m, scale: float = 1.0) -> np.ndarray:
    """Row-wise softmax of ``scale * m`` with per-row max subtraction."""
    m = as_mat(m)
    s = scale * m
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def soft_threshold(y, tau) -> np.ndarray:
    """Elementwise ``sign(y) * max(|y| - tau, 0)``; ``tau`` must be >= 0."""
    y, tau = as_mat(y), as_mat(tau)
    _same_shape(y, tau, "soft_threshold")
    if np.any(tau < 0):
        raise DomainError("soft_threshold: negative threshold")
    return np.sign(y) * np.maximum(np.abs(y) - tau, 0.0)


def fro_inner(a, b) -> float:
    a, b = as_mat(a), as_mat(b)
    _same_shape(a, b, "fro_inner")
    return float(np.sum(a * b))


def fro_norm(a) -> float:
    a = as_mat(a)
    return float(np.sqrt(np.sum(a * a)))


def ones_outer(col) -> np.ndarray:
    """Rank-1 helper: ``col @ 1^T`` for an n x 1 column, giving n x n."""
    col = as_mat(col)
    if col.shape[1] != 1:
        raise ShapeError(f"ones_outer: expected a column, got {col.shape}")
    n = col.shape[0]
    return np.repeat(col, n, axis=1)


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def uniform_mat(rng: np.random.Generator, rows: int, cols: int,
                lo: float = 0.0, hi: float = 1.0) -> np.ndarray:
    if not lo < hi:
        raise DomainError(f"uniform_mat: need lo < hi, got [{lo}, {hi})")
    return rng.uniform(lo, hi, size=(rows, cols))


# -- CSV matrix format: "rows,cols" header then one row per line ------------

def dumps_csv(m) -> str:
    m = as_mat(m)
    out = io.StringIO()
    out.write(f"{m.shape[0]},{m.shape[1]}\n")
    for row in m:
        out.write(",".join(format(float(x), ".17g") for x in row))
        out.write("\n")
    return out.getvalue()


def loads_csv(text: str) -> np.ndarray:
    # blank lines and "#" comment lines (e.g. a config echo) are skipped
    lines = [ln.strip() for ln in text.strip().splitlines()
             if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise ValueError("empty matrix CSV")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
    except ValueError as exc:
        raise ValueError(f"bad matrix CSV header {lines[0]!r}") from exc
    body = lines[1:]
    if len(body) != rows:
        raise ValueError(f"matrix CSV declares {rows} rows, found {len(body)}")
    data = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split(",")
        if len(vals) != cols:
            raise ValueError(f"row {i}: expected {cols} values, found {len(vals)}")
        data[i] = [float(v) for v in vals]
    if not np.all(np.isfinite(data)):
        raise ValueError("matrix CSV contains non-finite values")
    return data


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via temp file + rename."""
    path = os.fspath(path)
    tmp = f"{path}.tmp{os.getpid()}"
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    with open(tmp, mode) as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_csv(path, m, comment: str | None = None) -> None:
    head = "".join(f"# {ln}\n" for ln in comment.splitlines()) if comment else ""
    atomic_write(path, head + dumps_csv(m))


def read_csv(path) -> np.ndarray:
    with open(path) as fh:
        return loads_csv(fh.read())
