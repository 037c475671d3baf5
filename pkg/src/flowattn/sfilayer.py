"""Flow-induced attention heads and the adjacency-enhanced layer.

Every forward pass is recorded on an :class:`~flowattn.autodiff.Tape`, so the
same code serves evaluation and training.  In ``sfi`` mode the attention of a
head is the optimal flow matrix of its penalized flow problem:

* train mode unrolls exactly ``cfg.unroll_k`` proximal steps on the tape
  (step sizes are stop-gradient floats);
* eval mode runs :func:`flowsolve.solve` to tolerance and records the result
  as a constant.

``dfi`` mode uses the closed form, which is plain softmax attention.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import flowsolve, graphkit, matcore
from .autodiff import Tape, Var
from .flowsolve import FlowProblem, SolverConfig, StepController
from .matcore import ShapeError

__all__ = [
    "MODES",
    "HeadParams",
    "LayerParams",
    "ModelParams",
    "ForwardConfig",
    "init_model",
    "resistance",
    "friction",
    "dense_attention",
    "sfi_attention",
    "unrolled_flows",
    "exact_flows",
    "layer_forward",
    "model_forward",
    "model_vars",
    "structure_vars",
    "node_inputs",
    "z0_seed",
    "dump_attention",
]

MODES = ("sfi", "dfi")
GAMMA_RAW_INIT = math.log(math.e - 1.0)     # softplus(GAMMA_RAW_INIT) == 1


@dataclass
class HeadParams:
    W_Q: np.ndarray
    W_K: np.ndarray
    Wt_Q: np.ndarray
    Wt_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray

    NAMES = ("W_Q", "W_K", "Wt_Q", "Wt_K", "W_V", "W_O")

    @property
    def d_k(self) -> int:
        return self.W_Q.shape[1]


@dataclass
class LayerParams:
    heads: list
    gamma_raw: np.ndarray = field(default_factory=lambda: np.array([[GAMMA_RAW_INIT]]))

    def __post_init__(self):
        if len(self.heads) < 1:
            raise ValueError("a layer needs at least one head")
        self.gamma_raw = matcore.as_mat(self.gamma_raw)

    @property
    def gamma(self) -> float:
        x = float(self.gamma_raw[0, 0])
        return max(x, 0.0) + math.log1p(math.exp(-abs(x)))


@dataclass
class ModelParams:
    """Input projection, a stack of layers and a linear readout.

    ``level`` is ``"node"`` (per-node logits) or ``"graph"`` (mean pooling).
    ``pe_k`` Laplacian eigenvectors are appended to the node features.
    """

    W_in: np.ndarray
    b_in: np.ndarray
    layers: list
    W_out: np.ndarray
    b_out: np.ndarray
    mode: str = "sfi"
    pe_k: int = 0
    level: str = "node"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.level not in ("node", "graph"):
            raise ValueError(f"level must be node or graph, got {self.level!r}")

    def named(self) -> list:
        """Ordered ``(name, matrix)`` pairs; the checkpoint layout."""
        out = [("in/W", self.W_in), ("in/b", self.b_in)]
        for li, lp in enumerate(self.layers):
            out.append((f"layer{li}/gamma_raw", lp.gamma_raw))
            for hi, hp in enumerate(lp.heads):
                for nm in HeadParams.NAMES:
                    out.append((f"layer{li}/head{hi}/{nm}", getattr(hp, nm)))
        out += [("out/W", self.W_out), ("out/b", self.b_out)]
        return out

    def with_values(self, values: list) -> "ModelParams":
        """Copy of the model with matrices replaced, in :meth:`named` order."""
        it = iter(values)
        W_in, b_in = next(it), next(it)
        layers = []
        for lp in self.layers:
            g = next(it)
            heads = [HeadParams(*(next(it) for _ in HeadParams.NAMES)) for _ in lp.heads]
            layers.append(LayerParams(heads, g))
        W_out, b_out = next(it), next(it)
        return ModelParams(W_in, b_in, layers, W_out, b_out, self.mode, self.pe_k, self.level)

    def values(self) -> list:
        return [m for _, m in self.named()]


GRAD_MODES = ("unroll", "exact")
# softmax resistances can underflow to 0, and the closed-form flows lose
# about eps * mu / r of accuracy, so a small additive floor keeps both in check
R_FLOOR = 1e-10


@dataclass
class ForwardConfig:
    solver: SolverConfig = field(default_factory=SolverConfig)
    lambda_star: float = 1.0
    alpha: float = 0.1
    seed: int = 0
    train: bool = False
    # train-time gradients: "unroll" records unroll_k solver steps, "exact"
    # differentiates the exact penalized minimiser on its active set
    grad: str = "unroll"

    def __post_init__(self):
        if self.grad not in GRAD_MODES:
            raise ValueError(f"grad must be one of {GRAD_MODES}, got {self.grad!r}")


def _glorot(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return matcore.uniform_mat(rng, fan_in, fan_out, -a, a)


def init_model(d_in: int, d: int, n_classes: int, n_layers: int, n_heads: int,
               seed: int, mode: str = "sfi", pe_k: int = 0, level: str = "node") -> ModelParams:
    """Random model with ``d_k = d_V = d / n_heads``."""
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dk = d // n_heads
    rng = matcore.seeded_rng(seed)
    layers = []
    for _ in range(n_layers):
        heads = [HeadParams(_glorot(rng, d, dk), _glorot(rng, d, dk),
                            _glorot(rng, d, dk), _glorot(rng, d, dk),
                            _glorot(rng, d, dk), _glorot(rng, dk, d))
                 for _ in range(n_heads)]
        layers.append(LayerParams(heads))
    return ModelParams(
        W_in=_glorot(rng, d_in + pe_k, d), b_in=np.zeros((1, d)), layers=layers,
        W_out=_glorot(rng, d, n_classes), b_out=np.zeros((1, n_classes)),
        mode=mode, pe_k=pe_k, level=level)


# -- heads ---------------------------------------------------------------------------

def _as_var(tape, x):
    return x if isinstance(x, Var) else tape.const(x)


def _logits(tape, X, Wa, Wb):
    Q = tape.matmul(X, Wa)
    K = tape.matmul(X, Wb)
    return tape.matmul(Q, tape.transpose(K)), Q.shape[1]


def resistance(X, W_Q, W_K, tape: Tape | None = None):
    """``Softmax(-(X W_Q)(X W_K)^T / sqrt(d_k))``.  Returns a Var if ``tape`` is given."""
    own = tape is None
    tape = tape or Tape()
    S, dk = _logits(tape, _as_var(tape, X), _as_var(tape, W_Q), _as_var(tape, W_K))
    R = tape.row_softmax(S, -1.0 / math.sqrt(dk))
    return R.value if own else R


def friction(X, Wt_Q, Wt_K, tape: Tape | None = None):
    """Same parameterization as :func:`resistance`, with its own weights."""
    return resistance(X, Wt_Q, Wt_K, tape)


def dense_attention(X, W_Q, W_K, tape: Tape | None = None):
    """Closed-form (lambda = 0) flows: ``Softmax((X W_Q)(X W_K)^T / sqrt(d_k))``."""
    own = tape is None
    tape = tape or Tape()
    S, dk = _logits(tape, _as_var(tape, X), _as_var(tape, W_Q), _as_var(tape, W_K))
    A = tape.row_softmax(S, 1.0 / math.sqrt(dk))
    return A.value if own else A


def z0_seed(seed: int, layer: int, head: int) -> np.random.Generator:
    """Generator for the initial flows of one head, derived from (seed, layer, head)."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, layer, head])
    return np.random.Generator(np.random.PCG64(ss))


def unrolled_flows(tape: Tape, R: Var, F: Var, lam: float, alpha: float,
                   cfg: SolverConfig, Z0) -> tuple:
    """Record ``cfg.unroll_k`` proximal steps of the textbook iteration.

    Steps come from :class:`flowsolve.StepController` evaluated on the plain
    values, so they match an untaped run and carry no gradient.  Returns the
    final flow Var and the list of steps taken.
    """
    scfg = replace(cfg, splitting="smooth")
    p = FlowProblem(R.value, F.value, lam, alpha)
    ctrl = StepController(p, scfg)
    Z = tape.const(Z0)
    obj = flowsolve.penalized_objective(p, Z.value)
    steps = []
    for _ in range(scfg.unroll_k):
        G = tape.hadamard(R, Z) + tape.scale(tape.row_sum_outer(Z), alpha)
        t, _, obj = ctrl.next_step(Z.value, G.value, obj)
        Y = Z - tape.scale(G, t)
        Z = tape.soft_threshold(Y, tape.scale(F, t * lam))
        steps.append(t)
    return Z, steps


def exact_flows(tape: Tape, R: Var, F: Var, lam: float, alpha: float) -> Var:
    """Record the exact penalized minimiser as a function of ``R`` and ``F``.

    The active set comes from :func:`flowsolve.penalized_exact` and is held
    fixed, so on it ``mu = (1 + lam sum f/r) / (1/alpha + sum 1/r)`` and
    ``z = (mu - lam f) / r`` are smooth and the tape carries their gradient.
    """
    n = R.shape[1]
    Z = flowsolve.penalized_exact(FlowProblem(R.value, F.value, lam, alpha))
    A = tape.hadamard(tape.const((Z > 0).astype(float)), tape.reciprocal(R))
    col = tape.const(np.ones((n, 1)))
    S1 = tape.matmul(A, col)
    S2 = tape.scale(tape.matmul(tape.hadamard(A, F), col), lam)
    one = tape.const(np.ones(S1.shape))
    mu = tape.hadamard(tape.add(S2, one),
                       tape.reciprocal(tape.add(S1, tape.scale(one, 1.0 / alpha))))
    return tape.hadamard(A, tape.sub(tape.matmul(mu, tape.const(np.ones((1, n)))), tape.scale(F, lam)))


def sfi_attention(tape: Tape, X: Var, hp, fcfg: ForwardConfig, rng=None, Z0=None,
                  diag: dict | None = None) -> Var:
    """Optimal-flow attention of one head (sfi mode)."""
    hv = hp if isinstance(hp, dict) else {nm: _as_var(tape, getattr(hp, nm)) for nm in HeadParams.NAMES}
    R = resistance(X, hv["W_Q"], hv["W_K"], tape)
    # floored and rescaled so rows still sum to 1
    R = tape.scale(tape.add(R, tape.const(np.full(R.shape, R_FLOOR))), 1.0 / (1.0 + R.shape[1] * R_FLOOR))
    F = friction(X, hv["Wt_Q"], hv["Wt_K"], tape)
    n = R.shape[0]
    lam = flowsolve.effective_lambda(fcfg.lambda_star, n)
    if Z0 is None:
        Z0 = flowsolve.initial_flows(rng if rng is not None else matcore.seeded_rng(fcfg.seed), n, n)
    if fcfg.train and fcfg.grad == "exact":
        Z = exact_flows(tape, R, F, lam, fcfg.alpha)
        if diag is not None:
            p = FlowProblem(R.value, F.value, lam, fcfg.alpha)
            diag.update(iterations=0, converged=True,
                        kkt_residual=flowsolve.kkt_check(p, Z.value).kkt_residual)
        return Z
    if fcfg.train:
        Z, steps = unrolled_flows(tape, R, F, lam, fcfg.alpha, fcfg.solver, Z0)
        if diag is not None:
            p = FlowProblem(R.value, F.value, lam, fcfg.alpha)
            diag.update(iterations=len(steps), converged=False,
                        feas_residual=float(np.abs(Z.value.sum(axis=1) - 1).max()),
                        kkt_residual=flowsolve.kkt_check(p, Z.value).kkt_residual)
        return Z
    sol = flowsolve.solve(FlowProblem(R.value, F.value, lam, fcfg.alpha), fcfg.solver, Z0=Z0)
    if diag is not None:
        diag.update(sol.diagnostics())
    return tape.const(sol.Z)


def _head_vars(tape, hp):
    return {nm: _as_var(tape, getattr(hp, nm)) for nm in HeadParams.NAMES}


def layer_forward(tape: Tape, X: Var, Atil: Var, lp, mode: str, fcfg: ForwardConfig,
                  layer_index: int = 0, z0_hook=None, record: list | None = None) -> Var:
    """``X + (1+gamma)^-1 sum_h [Ã + gamma ATT_h] X W_V^h W_O^h``.

    ``lp`` is a :class:`LayerParams` or a dict ``{"gamma_raw": Var,
    "heads": [dict of Vars]}`` of tape variables.  ``z0_hook(layer, head, n)``
    may supply initial flows; the default draws them from :func:`z0_seed`.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if isinstance(lp, LayerParams):
        lv = {"gamma_raw": _as_var(tape, lp.gamma_raw), "heads": [_head_vars(tape, h) for h in lp.heads]}
    else:
        lv = lp
    X = _as_var(tape, X)
    Atil = _as_var(tape, Atil)
    n = X.shape[0]
    if Atil.shape != (n, n):
        raise ShapeError(f"Atil {Atil.shape} does not match {n} nodes")
    gamma = tape.softplus(lv["gamma_raw"])
    mix = tape.reciprocal(gamma + np.ones((1, 1)))
    total = None
    for h, hv in enumerate(lv["heads"]):
        diag = {}
        if mode == "dfi":
            att = dense_attention(X, hv["W_Q"], hv["W_K"], tape)
        else:
            if z0_hook is not None:
                Z0 = z0_hook(layer_index, h, n)
            else:
                Z0 = flowsolve.initial_flows(z0_seed(fcfg.seed, layer_index, h), n, n)
            att = sfi_attention(tape, X, hv, fcfg, Z0=Z0, diag=diag)
        if record is not None:
            record.append({"layer": layer_index, "head": h, "att": att.value, **diag})
        V = tape.matmul(tape.matmul(X, hv["W_V"]), hv["W_O"])
        term = tape.matmul(Atil + tape.scale(att, gamma), V)
        total = term if total is None else total + term
    return X + tape.scale(total, mix)


# -- model ---------------------------------------------------------------------------

def node_inputs(g: graphkit.Graph, pe_k: int) -> np.ndarray:
    """Node features with ``pe_k`` Laplacian eigenvectors appended (cached per graph)."""
    if pe_k <= 0:
        return g.X
    cache = g.meta.setdefault("_cache", {})
    key = f"pe{pe_k}"
    if key not in cache:
        cache[key] = graphkit.laplacian_pe(g, pe_k)
    return np.hstack([g.X, cache[key]])


def _atil(g):
    cache = g.meta.setdefault("_cache", {})
    if "atil" not in cache:
        cache["atil"] = graphkit.normalized_adjacency(g)
    return cache["atil"]


def model_vars(tape: Tape, mp: ModelParams, trainable: bool = True):
    """Put every model matrix on ``tape``; returns ``(flat list, structured dict)``."""
    mk = tape.param if trainable else tape.const
    flat = [mk(m) for m in mp.values()]
    return flat, structure_vars(mp, flat)


def structure_vars(mp: ModelParams, flat: list) -> dict:
    """Arrange tape variables given in :meth:`ModelParams.named` order."""
    it = iter(flat)
    sv = {"W_in": next(it), "b_in": next(it), "layers": []}
    for lp in mp.layers:
        g = next(it)
        heads = [{nm: next(it) for nm in HeadParams.NAMES} for _ in lp.heads]
        sv["layers"].append({"gamma_raw": g, "heads": heads})
    sv["W_out"], sv["b_out"] = next(it), next(it)
    return sv


def model_forward(g: graphkit.Graph, mp: ModelParams, fcfg: ForwardConfig,
                  tape: Tape | None = None, sv: dict | None = None,
                  z0_hook=None, record: list | None = None):
    """Logits for one graph: projection, stacked layers, linear readout.

    Pass ``tape`` and ``sv`` (from :func:`model_vars`) to record for training;
    otherwise a private tape is used and a plain array is returned.
    """
    own = tape is None
    if own:
        tape = Tape()
        _, sv = model_vars(tape, mp, trainable=False)
    Xin = node_inputs(g, mp.pe_k)
    n = g.n
    ones = tape.const(np.ones((n, 1)))
    H = tape.matmul(tape.const(Xin), sv["W_in"]) + tape.matmul(ones, sv["b_in"])
    Atil = tape.const(_atil(g))
    for li, lv in enumerate(sv["layers"]):
        H = layer_forward(tape, H, Atil, lv, mp.mode, fcfg, li, z0_hook, record)
    if mp.level == "graph":
        H = tape.scale(tape.matmul(tape.const(np.ones((1, n))), H), 1.0 / n)
        ones = tape.const(np.ones((1, 1)))
    logits = tape.matmul(H, sv["W_out"]) + tape.matmul(ones, sv["b_out"])
    return logits.value if own else logits


def dump_attention(record: list, outdir, config: dict | None = None) -> dict:
    """Write each head's attention as CSV plus a JSON sparsity summary."""
    os.makedirs(outdir, exist_ok=True)
    summary = {"threshold": flowsolve.ZERO_THRESHOLD, "heads": []}
    fr = []
    for r in record:
        name = f"att_layer{r['layer']}_head{r['head']}.csv"
        matcore.write_csv(os.path.join(outdir, name), r["att"])
        f = flowsolve.sparsity_fraction(r["att"])
        fr.append(f)
        summary["heads"].append({"layer": r["layer"], "head": r["head"], "file": name,
                                 "below_1e-8_fraction": f})
    summary["below_1e-8_fraction"] = float(np.mean(fr)) if fr else 0.0
    if config is not None:
        summary["config"] = config
    matcore.atomic_write(os.path.join(outdir, "sparsity.json"), json.dumps(summary, indent=1))
    return summary
