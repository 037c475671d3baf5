"""Small dense graphs: normalization, Laplacian encodings, synthetic tasks."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .matcore import DomainError, ShapeError, as_mat

__all__ = [
    "Graph",
    "adjacency",
    "normalized_adjacency",
    "jacobi_eigh",
    "laplacian",
    "laplacian_pe",
    "gen_sbm",
    "gen_longrange",
    "gcn_step",
    "connected_components",
    "graph_to_json",
    "graph_from_json",
    "save_graph",
    "load_graph",
]


@dataclass
class Graph:
    n: int
    edges: list
    X: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray | None = None
    test_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = as_mat(self.X)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        seen = set()
        clean = []
        for u, v in self.edges:
            u, v = int(u), int(v)
            if not (0 <= u < self.n and 0 <= v < self.n):
                raise DomainError(f"edge ({u}, {v}) outside [0, {self.n})")
            if u == v:
                raise DomainError(f"self-loop on node {u}")
            key = (min(u, v), max(u, v))
            if key in seen:
                raise DomainError(f"duplicate edge {key}")
            seen.add(key)
            clean.append(key)
        self.edges = clean
        if self.X.shape[0] != self.n:
            raise ShapeError(f"X has {self.X.shape[0]} rows for {self.n} nodes")
        for name in ("train_mask", "test_mask"):
            m = getattr(self, name)
            if m is not None:
                setattr(self, name, np.asarray(m, dtype=bool))


def adjacency(g: Graph) -> np.ndarray:
    A = np.zeros((g.n, g.n))
    for u, v in g.edges:
        A[u, v] = A[v, u] = 1.0
    return A


def normalized_adjacency(g: Graph) -> np.ndarray:
    """``D^{-1/2} (A + I) D^{-1/2}`` with degrees counted after the self-loop."""
    A = adjacency(g) + np.eye(g.n)
    s = 1.0 / np.sqrt(A.sum(axis=1))
    return s[:, None] * A * s[None, :]


# -- cyclic Jacobi eigensolver ---------------------------------------------------

def _round_robin(n: int):
    """Yield ``n - 1`` (or ``n``) rounds of disjoint index pairs covering all pairs."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(a, b), max(a, b)) for a, b in pairs if a >= 0 and b >= 0]
        if pairs:
            p, q = np.array(pairs).T
            yield p, q
        idx = [idx[0], idx[-1]] + idx[1:-1]


def jacobi_eigh(S, tol: float = 1e-12, max_sweeps: int = 100):
    """Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.

    Each sweep visits every off-diagonal pair once, in round-robin order so
    that the rotations of one round touch disjoint rows and can be applied
    together.  Stops when the off-diagonal Frobenius mass is at most
    ``tol * max(1, ||S||_F)``.  Returns ascending eigenvalues and the
    matching eigenvectors as columns.
    """
    A = as_mat(S).copy()
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError("jacobi_eigh needs a square matrix")
    if np.max(np.abs(A - A.T), initial=0.0) > 1e-10 * max(1.0, np.abs(A).max(initial=0.0)):
        raise DomainError("jacobi_eigh needs a symmetric matrix")
    A = 0.5 * (A + A.T)
    V = np.eye(n)
    scale = max(1.0, float(np.linalg.norm(A)))
    rounds = list(_round_robin(n))

    mask = ~np.eye(n, dtype=bool)

    def off(M):
        return float(np.sqrt(np.sum(M[mask] ** 2)))

    for _ in range(max_sweeps):
        if off(A) <= tol * scale:
            break
        for p, q in rounds:
            apq = A[p, q]
            nz = np.abs(apq) > 1e-300
            theta = np.where(nz, (A[q, q] - A[p, p]) / (2.0 * np.where(nz, apq, 1.0)), 0.0)
            t = np.where(theta >= 0, 1.0, -1.0) / (np.abs(theta) + np.hypot(theta, 1.0))
            t = np.where(nz, t, 0.0)
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = t * c
            # A <- J^T A J, V <- V J
            Ap, Aq = A[p, :].copy(), A[q, :].copy()
            A[p, :] = c[:, None] * Ap - s[:, None] * Aq
            A[q, :] = s[:, None] * Ap + c[:, None] * Aq
            Ap, Aq = A[:, p].copy(), A[:, q].copy()
            A[:, p] = Ap * c - Aq * s
            A[:, q] = Ap * s + Aq * c
            Vp, Vq = V[:, p].copy(), V[:, q].copy()
            V[:, p] = Vp * c - Vq * s
            V[:, q] = Vp * s + Vq * c
    w = np.diag(A).copy()
    order = np.argsort(w, kind="stable")
    return w[order], V[:, order]


def laplacian(g: Graph) -> np.ndarray:
    """Symmetric normalized Laplacian ``I - D^{-1/2} A D^{-1/2}`` (isolated nodes give 1)."""
    A = adjacency(g)
    d = A.sum(axis=1)
    s = np.where(d > 0, 1.0 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0)
    return np.eye(g.n) - s[:, None] * A * s[None, :]


def laplacian_pe(g: Graph, k: int, zero_tol: float = 1e-9) -> np.ndarray:
    """Eigenvectors of the ``k`` smallest nonzero Laplacian eigenvalues.

    Columns are unit-norm with their largest-magnitude entry made positive.
    If the graph has fewer than ``k`` nonzero eigenvalues the remaining
    columns are zero.
    """
    if k >= g.n:
        raise DomainError(f"laplacian_pe: need k < n, got k={k}, n={g.n}")
    w, V = jacobi_eigh(laplacian(g))
    keep = np.flatnonzero(w > zero_tol)[:k]
    pe = np.zeros((g.n, k))
    for col, j in enumerate(keep):
        v = V[:, j] / np.linalg.norm(V[:, j])
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        pe[:, col] = v
    return pe


def connected_components(g: Graph) -> int:
    parent = list(range(g.n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for u, v in g.edges:
        parent[find(u)] = find(v)
    return len({find(a) for a in range(g.n)})


# -- synthetic tasks ---------------------------------------------------------------

def _split(rng, n, train_frac):
    perm = rng.permutation(n)
    cut = int(round(train_frac * n))
    train = np.zeros(n, dtype=bool)
    train[perm[:cut]] = True
    return train, ~train


def gen_sbm(blocks: int, per_block: int, p_in: float, p_out: float, d: int,
            seed: int, noise: float = 0.0, train_frac: float = 0.5) -> Graph:
    """Stochastic block model node-classification task.

    One random node per block is a "seed" whose first ``blocks`` feature
    columns hold the one-hot block id; every other node has zero features
    there.  Labels are block ids.  With ``noise > 0`` the remaining
    ``d - blocks`` columns carry Gaussian noise of that scale on every node,
    which a model can use to memorise its training labels.
    """
    for pr in (p_in, p_out):
        if not 0.0 <= pr <= 1.0:
            raise DomainError("probabilities must lie in [0, 1]")
    if d < blocks:
        raise DomainError(f"feature dim {d} < number of blocks {blocks}")
    rng = matcore.seeded_rng(seed)
    n = blocks * per_block
    labels = np.repeat(np.arange(blocks), per_block)
    iu, ju = np.triu_indices(n, 1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    keep = rng.random(iu.size) < prob
    edges = list(zip(iu[keep].tolist(), ju[keep].tolist()))
    X = np.zeros((n, d))
    for b in range(blocks):
        s = b * per_block + int(rng.integers(per_block))
        X[s, b] = 1.0
    if noise > 0 and d > blocks:
        X[:, blocks:] = noise * rng.standard_normal((n, d - blocks))
    train, test = _split(rng, n, train_frac)
    return Graph(n, edges, X, labels, train, test,
                 meta={"task": "sbm", "blocks": blocks, "seed": seed})


def gen_longrange(n: int, hop: int, d: int, seed: int) -> Graph:
    """Ring of ``n`` nodes where node ``i`` must report the bit stored at ``i + hop``.

    Column 0 of ``X`` is the node's own bit as +-1, column 1 is a constant 1
    and the remaining ``d - 2`` columns are zero.
    """
    if not 0 <= hop < n:
        raise DomainError(f"need 0 <= hop < n, got hop={hop}, n={n}")
    if d < 2:
        raise DomainError("gen_longrange needs d >= 2")
    rng = matcore.seeded_rng(seed)
    bits = rng.integers(0, 2, size=n)
    X = np.zeros((n, d))
    X[:, 0] = 2.0 * bits - 1.0
    X[:, 1] = 1.0
    labels = bits[(np.arange(n) + hop) % n]
    edges = [(i, (i + 1) % n) for i in range(n)] if n > 2 else ([(0, 1)] if n == 2 else [])
    return Graph(n, edges, X, labels, np.ones(n, bool), np.ones(n, bool),
                 meta={"task": "longrange", "hop": hop, "seed": seed})


def gcn_step(Atil, X, W) -> np.ndarray:
    """``relu(Ã X W)``."""
    return np.maximum(matcore.matmul(matcore.matmul(Atil, X), W), 0.0)


# -- JSON graph files --------------------------------------------------------------

def graph_to_json(g: Graph, extra: dict | None = None) -> str:
    doc = {
        "n": g.n,
        "edges": [list(e) for e in g.edges],
        "X": matcore.dumps_csv(g.X),
        "labels": g.labels.tolist(),
    }
    if g.train_mask is not None:
        doc["train_mask"] = g.train_mask.astype(int).tolist()
    if g.test_mask is not None:
        doc["test_mask"] = g.test_mask.astype(int).tolist()
    meta = {k: v for k, v in g.meta.items() if not str(k).startswith("_")}
    if meta:
        doc["meta"] = meta
    if extra:
        doc.update(extra)
    return json.dumps(doc, indent=1)


def graph_from_json(text: str, base_dir: str | None = None) -> Graph:
    doc = json.loads(text)
    X = doc["X"]
    if isinstance(X, str) and "\n" in X:
        X = matcore.loads_csv(X)
    elif isinstance(X, str):
        import os
        path = X if base_dir is None else os.path.join(base_dir, X)
        X = matcore.read_csv(path)
    else:
        X = np.asarray(X, dtype=float)
    return Graph(int(doc["n"]), [tuple(e) for e in doc["edges"]], X, doc["labels"],
                 doc.get("train_mask"), doc.get("test_mask"), doc.get("meta", {}))


def save_graph(path, g: Graph, extra: dict | None = None) -> None:
    matcore.atomic_write(path, graph_to_json(g, extra))


def load_graph(path) -> Graph:
    import os
    with open(path) as fh:
        return graph_from_json(fh.read(), os.path.dirname(os.fspath(path)))
