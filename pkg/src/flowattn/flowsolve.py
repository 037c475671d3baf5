"""Network-flow energies, the proximal/BB solver and its verification tools.

Notation: ``Z[i, j]`` is the flow from node ``j`` into sink ``i``; ``R`` holds
link resistances and ``F`` link frictions.  The penalized problem is::

    H(Z) = 1/2 sum_ij R_ij Z_ij^2 + alpha/2 ||Z 1 - 1||^2      (smooth)
    G(Z) = lam * sum_ij |F_ij Z_ij|                            (non-smooth)

and is minimised by proximal gradient steps with Barzilai-Borwein step
sizes.  The exact-constraint problem (``Z 1 = 1``) is solved row by row via
bisection on the dual potential and serves as an independent oracle.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import matcore
from .matcore import DomainError, ShapeError, as_mat

__all__ = [
    "FlowProblem",
    "SolverConfig",
    "FlowSolution",
    "DivergenceError",
    "dense_closed_form",
    "penalized_closed_form",
    "energy_dense",
    "penalized_objective",
    "grad_smooth",
    "safe_step",
    "lipschitz_bound",
    "guaranteed_step",
    "bb_step",
    "prox_iterate",
    "penalty_prox",
    "penalized_exact",
    "split_iterate",
    "gradient_mapping_norm",
    "StepController",
    "solve",
    "dual_bisection_row",
    "dual_oracle",
    "KKTReport",
    "kkt_check",
    "sparsity_fraction",
    "heterogeneous_instance",
    "effective_lambda",
]

ZERO_THRESHOLD = 1e-8
SPLITTINGS = ("prox", "smooth")


class DivergenceError(FloatingPointError):
    """The iterate became non-finite."""


@dataclass
class FlowProblem:
    R: np.ndarray
    F: np.ndarray
    lam: float = 0.0
    alpha: float = 0.1

    def __post_init__(self):
        self.R = as_mat(self.R)
        self.F = as_mat(self.F)

    @property
    def n(self) -> int:
        return self.R.shape[1]

    def validate(self, row_sum_tol: float = 1e-9) -> "FlowProblem":
        R, F = self.R, self.F
        if R.shape != F.shape:
            raise ShapeError(f"R {R.shape} and F {F.shape} differ")
        if not np.all(np.isfinite(R)) or np.any(R <= 0):
            raise DomainError("resistances must be finite and strictly positive")
        if not np.all(np.isfinite(F)) or np.any(F < 0):
            raise DomainError("frictions must be finite and nonnegative")
        if row_sum_tol is not None and np.max(np.abs(R.sum(axis=1) - 1.0)) > row_sum_tol:
            raise DomainError("resistance rows must sum to 1")
        if self.lam < 0:
            raise DomainError("lambda must be >= 0")
        if not self.alpha > 0:
            raise DomainError("alpha must be > 0")
        return self


@dataclass
class SolverConfig:
    """Solver settings.

    ``splitting`` picks which part of the objective the gradient step sees:

    * ``"smooth"``: gradient on ``H`` (energy + penalty), prox of the l1
      term only.  This is the textbook iteration used when unrolling.
    * ``"prox"``: gradient on the energy only; the penalty and l1 term are
      handled together by the exact row prox :func:`penalty_prox`.  Same
      minimiser, but the step no longer has to resolve the stiff
      ``alpha 1 1^T`` direction, so it stays fast for large ``alpha``.

    ``clamp_to_safe`` restricts BB steps to ``(0, t_safe]``.  It is off by
    default: BB2 steps on this quadratic are never shorter than ``1/L``, so
    clamping reduces BB to the fixed step.  With the ``smooth`` splitting,
    unclamped BB is guarded by a non-monotone check that falls back to the
    guaranteed step.
    ``step`` overrides the fixed-policy step size.

    ``method="exact"`` skips the iteration and returns
    :func:`penalized_exact`, which is useful when ``R`` is so badly scaled
    (e.g. ``max R / min R`` near 1e20 in a trained model) that no first-order
    method reaches ``tol`` in reasonable time.
    """

    max_iter: int = 20000
    tol: float = 1e-8
    step_policy: str = "bb"
    unroll_k: int = 20
    clamp_to_safe: bool = False
    step: float | None = None
    renormalize: bool = False
    tol_active: float = ZERO_THRESHOLD
    nonmonotone_window: int = 10
    splitting: str = "prox"
    method: str = "iterative"

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.step_policy not in ("bb", "fixed"):
            raise ValueError(f"unknown step policy {self.step_policy!r}")
        if self.method not in ("iterative", "exact"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.splitting not in SPLITTINGS:
            raise ValueError(f"unknown splitting {self.splitting!r}")
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be > 0")


@dataclass
class FlowSolution:
    Z: np.ndarray
    iterations: int
    feas_residual: float
    kkt_residual: float
    objective: float
    converged: bool
    grad_map_norm: float = float("nan")
    objectives: list = field(default_factory=list, repr=False)
    steps: list = field(default_factory=list, repr=False)

    def diagnostics(self) -> dict:
        return {
            "iterations": self.iterations,
            "feas_residual": self.feas_residual,
            "kkt_residual": self.kkt_residual,
            "objective": self.objective,
            "converged": self.converged,
        }


def effective_lambda(lambda_star: float, n: int) -> float:
    """l1 weight actually used for an n-node instance: ``lambda_star / n``."""
    return lambda_star / n


# -- closed forms and objectives ---------------------------------------------

def dense_closed_form(R) -> np.ndarray:
    """Optimal flows of the unregularised exact problem: ``Z_ij ∝ 1/R_ij``."""
    R = as_mat(R)
    if np.any(R <= 0):
        raise DomainError("resistances must be strictly positive")
    inv = 1.0 / R
    return inv / inv.sum(axis=1, keepdims=True)


def penalized_closed_form(R, alpha: float) -> np.ndarray:
    """Minimiser of ``H`` alone: ``Z_ij = alpha / (1 + alpha T_i) / R_ij``."""
    R = as_mat(R)
    inv = 1.0 / R
    T = inv.sum(axis=1, keepdims=True)
    return (alpha / (1.0 + alpha * T)) * inv


def energy_dense(R, Z) -> float:
    R, Z = as_mat(R), as_mat(Z)
    if R.shape != Z.shape:
        raise ShapeError(f"energy_dense: {R.shape} vs {Z.shape}")
    return 0.5 * float(np.trace((R * Z) @ Z.T))


def _row_defect(Z):
    return Z.sum(axis=1) - 1.0


def penalized_objective(p: FlowProblem, Z) -> float:
    Z = as_mat(Z)
    if Z.shape != p.R.shape:
        raise ShapeError(f"penalized_objective: Z {Z.shape} vs R {p.R.shape}")
    d = _row_defect(Z)
    return (energy_dense(p.R, Z) + 0.5 * p.alpha * float(d @ d)
            + p.lam * float(np.abs(p.F * Z).sum()))


def grad_smooth(p: FlowProblem, Z) -> np.ndarray:
    """``R∘Z + alpha (Z1 - 1) 1^T``."""
    Z = as_mat(Z)
    if Z.shape != p.R.shape:
        raise ShapeError(f"grad_smooth: Z {Z.shape} vs R {p.R.shape}")
    return p.R * Z + p.alpha * matcore.ones_outer(_row_defect(Z)[:, None])


# -- step sizes ---------------------------------------------------------------

def safe_step(alpha: float, n: int) -> float:
    """Step bound ``1 / (1 + alpha sqrt(n))`` obtained from ``||R||_2 <= 1``.

    Note this bounds the penalty's Lipschitz constant by ``alpha sqrt(n)``;
    the exact per-row constant is up to ``alpha n`` (the Hessian of the
    penalty is ``alpha 1 1^T``).  See :func:`guaranteed_step`.
    """
    if not alpha > 0 or n < 1:
        raise DomainError("safe_step needs alpha > 0 and n >= 1")
    return 1.0 / (1.0 + alpha * math.sqrt(n))


def lipschitz_bound(R, alpha: float) -> float:
    """Upper bound on the gradient Lipschitz constant of ``H``.

    Each row Hessian is ``diag(R_i) + alpha 1 1^T`` with largest eigenvalue
    at most ``max_j R_ij + alpha n``.
    """
    R = as_mat(R)
    return float(R.max()) + alpha * R.shape[1]


def guaranteed_step(R, alpha: float) -> float:
    """A step that provably gives monotone descent: ``min(safe, 1/L)``."""
    n = as_mat(R).shape[1]
    return min(safe_step(alpha, n), 1.0 / lipschitz_bound(R, alpha))


def bb_step(A, B, t_safe: float, clamp: bool = True, t_max: float = math.inf,
            floor: float = 1e-18) -> float:
    """BB2 step ``<A, B> / ||B||^2`` with safeguards.

    Falls back to ``t_safe`` when ``||B||^2 < floor`` or the ratio is not
    positive.  With ``clamp`` the result lies in ``(0, t_safe]``; otherwise
    it is capped at ``t_max``.
    """
    A, B = as_mat(A), as_mat(B)
    if A.shape != B.shape:
        raise ShapeError(f"bb_step: {A.shape} vs {B.shape}")
    bb = matcore.fro_inner(B, B)
    if bb < floor:
        return t_safe
    t = matcore.fro_inner(A, B) / bb
    if not t > 0 or not math.isfinite(t):
        return t_safe
    return min(t, t_safe) if clamp else min(t, t_max)


def prox_iterate(p: FlowProblem, Z, t: float) -> np.ndarray:
    """One proximal gradient step of length ``t``."""
    if t < 0:
        raise DomainError("step must be nonnegative")
    Z = as_mat(Z)
    Y = Z - t * grad_smooth(p, Z)
    return matcore.soft_threshold(Y, (t * p.lam) * p.F)


def gradient_mapping_norm(p: FlowProblem, Z, t: float) -> float:
    if not t > 0:
        raise DomainError("gradient mapping needs t > 0")
    Z = as_mat(Z)
    return matcore.fro_norm((Z - prox_iterate(p, Z, t)) / t)


def penalty_prox(p: FlowProblem, V, t: float) -> np.ndarray:
    """Exact prox of ``t (alpha/2 ||Z1 - 1||^2 + lam ||F∘Z||_1)`` at ``V``.

    Row-separable.  The solution is ``Z_i = Soft_{t lam F_i}(V_i - u_i)``
    where the shift ``u_i = t alpha (sum_j Z_ij - 1)`` solves

        phi(u) = sum_j Soft(V_ij - u) - u / (t alpha) - 1 = 0.

    ``phi`` is piecewise linear and strictly decreasing, with kinks at
    ``a_j = V_ij - thr_j`` and ``b_j = V_ij + thr_j``.  Sorting the kinks and
    keeping running sums gives ``phi`` at every kink; the root is then
    found exactly by linear interpolation on the bracketing segment.
    """
    V = as_mat(V)
    if not t > 0:
        raise DomainError("penalty_prox needs t > 0")
    m, n = V.shape
    thr = (t * p.lam) * p.F
    c = t * p.alpha
    a, b = V - thr, V + thr
    pts = np.concatenate([a, b], axis=1)                     # m x 2n
    order = np.argsort(pts, axis=1, kind="stable")
    kinks = np.take_along_axis(pts, order, axis=1)
    is_a = order < n
    # entries with a_j > u contribute a_j - u; entries with b_j < u contribute b_j - u.
    # At a kink the owning entry contributes 0 either way, so inclusive counts are fine.
    cnt_a = np.cumsum(is_a, axis=1)
    sum_a = np.cumsum(np.where(is_a, kinks, 0.0), axis=1)
    cnt_b = np.cumsum(~is_a, axis=1)
    sum_b = np.cumsum(np.where(is_a, 0.0, kinks), axis=1)
    na_gt = n - cnt_a
    sa_gt = a.sum(axis=1, keepdims=True) - sum_a
    vals = (sa_gt - kinks * na_gt) + (sum_b - kinks * cnt_b) - kinks / c - 1.0
    k = np.count_nonzero(vals >= 0.0, axis=1)
    rows = np.arange(m)
    u = np.empty(m)
    # outside the outermost kinks every entry is active: slope -(n + 1/c)
    slope = n + 1.0 / c
    lo, hi = k == 0, k == 2 * n
    u[lo] = kinks[lo, 0] + vals[lo, 0] / slope
    u[hi] = kinks[hi, -1] + vals[hi, -1] / slope
    mid = ~(lo | hi)
    r, km = rows[mid], k[mid]
    b0, b1 = kinks[r, km - 1], kinks[r, km]
    p0, p1 = vals[r, km - 1], vals[r, km]
    u[mid] = b0 + p0 * (b1 - b0) / (p0 - p1)
    return matcore.soft_threshold(V - u[:, None], thr)


def split_iterate(p: FlowProblem, Z, t: float) -> np.ndarray:
    """Gradient step on the energy, then :func:`penalty_prox`."""
    Z = as_mat(Z)
    return penalty_prox(p, Z - t * (p.R * Z), t)


class StepController:
    """Chooses the step for each proximal iteration.

    Shared by :func:`solve` and the differentiable unrolled solver so both
    take identical steps.  Steps are plain floats (never differentiated).
    """

    def __init__(self, p: FlowProblem, cfg: SolverConfig):
        self.p = p
        self.cfg = cfg
        self.split = cfg.splitting == "prox"
        if self.split:
            # only the energy is linearised: L = max R
            self.t_safe = 1.0 / float(p.R.max())
        else:
            self.t_safe = guaranteed_step(p.R, p.alpha)
        # BB2 steps on a quadratic never exceed 1 / lambda_min(Hessian) <= 1 / min R
        self.t_max = 1.0 / float(p.R.min())
        self.prev = None
        self.recent: list[float] = []

    def gradient(self, Z):
        return self.p.R * Z if self.split else grad_smooth(self.p, Z)

    def step_from(self, Z, G, t):
        p = self.p
        if self.split:
            return penalty_prox(p, Z - t * G, t)
        return matcore.soft_threshold(Z - t * G, (t * p.lam) * p.F)

    def choose(self, Z, G) -> float:
        cfg = self.cfg
        if cfg.step_policy == "fixed":
            t = cfg.step if cfg.step is not None else self.t_safe
        elif self.prev is None:
            t = self.t_safe
        else:
            Zp, Gp = self.prev
            # energy gradients R∘Z can be ~1e-7 when R is badly scaled, so the
            # absolute 1e-18 floor would discard valid BB steps there
            floor = 1e-300 if self.split else 1e-18
            t = bb_step(Z - Zp, G - Gp, self.t_safe, clamp=cfg.clamp_to_safe,
                        t_max=self.t_max, floor=floor)
        self.prev = (Z, G)
        return t

    def next_step(self, Z: np.ndarray, G: np.ndarray, obj: float):
        """Return ``(t, Z_next, obj_next)`` for the iterate ``Z`` with gradient ``G``."""
        cfg = self.cfg
        self.recent.append(obj)
        if len(self.recent) > max(1, cfg.nonmonotone_window):
            self.recent.pop(0)
        t = self.choose(Z, G)
        Z_next = self.step_from(Z, G, t)
        obj_next = penalized_objective(self.p, Z_next)
        # non-monotone safeguard (smooth splitting only): an overshooting BB
        # step is replaced by the safe one.  With the penalty in the prox the
        # safeguard does more harm than good: BB's occasional objective spikes
        # are part of how it handles badly scaled R, and falling back to the
        # short step there stalls the iteration.
        if (not self.split and cfg.step_policy == "bb" and t > self.t_safe
                and obj_next > max(self.recent) + 1e-12 * max(1.0, abs(obj))):
            t = self.t_safe
            Z_next = self.step_from(Z, G, t)
            obj_next = penalized_objective(self.p, Z_next)
        return t, Z_next, obj_next


def initial_flows(rng: np.random.Generator, n_rows: int, n: int) -> np.ndarray:
    """Uniform ``[0, 2/n)`` start so each row sums to 1 in expectation."""
    return matcore.uniform_mat(rng, n_rows, n, 0.0, 2.0 / n)


def solve(p: FlowProblem, cfg: SolverConfig | None = None,
          rng: np.random.Generator | None = None, Z0=None) -> FlowSolution:
    """Minimise the penalized flow energy by proximal gradient iteration.

    Stops when the gradient mapping (at the guaranteed step, for the
    ``smooth`` splitting) and the KKT residual both fall to ``cfg.tol``, or
    after ``cfg.max_iter`` steps.
    """
    cfg = cfg or SolverConfig()
    p.validate(row_sum_tol=None)
    n_rows, n = p.R.shape
    if cfg.method == "exact":
        Z = penalized_exact(p)
        kkt = kkt_check(p, Z, cfg.tol_active).kkt_residual
        obj = penalized_objective(p, Z)
        out = Z / Z.sum(axis=1, keepdims=True) if cfg.renormalize else Z
        return FlowSolution(Z=out, iterations=0,
                            feas_residual=float(np.max(np.abs(_row_defect(Z)))),
                            kkt_residual=float(kkt), objective=obj, converged=kkt <= cfg.tol,
                            objectives=[obj])
    if Z0 is None:
        Z = initial_flows(rng if rng is not None else matcore.seeded_rng(0), n_rows, n)
    else:
        Z = as_mat(Z0).copy()
    ctrl = StepController(p, cfg)
    t_chk = guaranteed_step(p.R, p.alpha)
    tau_chk = (t_chk * p.lam) * p.F
    obj = penalized_objective(p, Z)
    objectives, steps = [obj], []
    converged = False
    gm = float("nan")
    kkt = float("nan")
    it = 0
    while True:
        G = grad_smooth(p, Z)
        gm = matcore.fro_norm((Z - matcore.soft_threshold(Z - t_chk * G, tau_chk)) / t_chk)
        if ctrl.split:
            G = p.R * Z
        if gm <= cfg.tol:
            kkt = kkt_check(p, Z, cfg.tol_active).kkt_residual
            if kkt <= cfg.tol:
                converged = True
                break
        if it >= cfg.max_iter:
            break
        t, Z, obj = ctrl.next_step(Z, G, obj)
        if not np.all(np.isfinite(Z)):
            raise DivergenceError(f"non-finite iterate at step {it + 1}")
        steps.append(t)
        objectives.append(obj)
        it += 1
    if not converged:
        kkt = kkt_check(p, Z, cfg.tol_active).kkt_residual
    out = Z
    if cfg.renormalize:
        out = Z / Z.sum(axis=1, keepdims=True)
    return FlowSolution(
        Z=out,
        iterations=it,
        feas_residual=float(np.max(np.abs(_row_defect(Z)))),
        kkt_residual=float(kkt),
        objective=penalized_objective(p, Z),
        converged=converged,
        grad_map_norm=float(gm),
        objectives=objectives,
        steps=steps,
    )


def penalized_exact(p: FlowProblem) -> np.ndarray:
    """Exact minimiser of the penalized objective, row by row.

    Stationarity gives ``z_j = max(mu - lam f_j, 0) / r_j`` with
    ``mu = alpha (1 - sum_j z_j)``, so ``mu`` is the root of the increasing
    piecewise-linear map ``mu / alpha + sum_j max(mu - lam f_j, 0) / r_j - 1``
    whose kinks are the thresholds ``lam f_j``.  Sorting them and keeping
    running sums finds the active set and ``mu`` in closed form.
    """
    R, F = p.R, p.F
    m, n = R.shape
    thr = p.lam * F
    order = np.argsort(thr, axis=1, kind="stable")
    ts = np.take_along_axis(thr, order, axis=1)
    inv = 1.0 / np.take_along_axis(R, order, axis=1)
    # S1[k] = sum of 1/r over the k entries with the smallest thresholds, S2 likewise for thr/r
    S1 = np.concatenate([np.zeros((m, 1)), np.cumsum(inv, axis=1)], axis=1)
    S2 = np.concatenate([np.zeros((m, 1)), np.cumsum(ts * inv, axis=1)], axis=1)
    # phi at each kink, using the entries strictly before it as the active set
    phi = ts / p.alpha + ts * S1[:, :-1] - S2[:, :-1] - 1.0
    k = np.count_nonzero(phi < 0.0, axis=1)
    rows = np.arange(m)
    mu = (1.0 + S2[rows, k]) / (1.0 / p.alpha + S1[rows, k])
    return np.maximum(mu[:, None] - thr, 0.0) / R


# -- exact-constraint oracle ---------------------------------------------------

def dual_bisection_row(r, f, lam: float):
    """Exact minimiser of ``1/2 sum r z^2 + lam sum f|z|`` s.t. ``sum z = 1``.

    Optimal flows are ``z_i = Soft_{lam f_i}(mu) / r_i``; ``mu`` is found by
    bisection of the nondecreasing map ``g(mu) = sum_i Soft_{lam f_i}(mu) / r_i``
    on ``[0, lam max f + max r]``, then polished on the detected active set.
    Returns ``(z, mu)``.
    """
    r = np.asarray(r, dtype=np.float64).ravel()
    f = np.asarray(f, dtype=np.float64).ravel()
    if r.shape != f.shape:
        raise ShapeError("dual_bisection_row: r and f differ in length")
    if np.any(r <= 0) or np.any(f < 0) or lam < 0:
        raise DomainError("need r > 0, f >= 0, lam >= 0")
    thr = lam * f

    def g(mu):
        return float(np.sum(np.maximum(mu - thr, 0.0) / r))

    lo, hi = 0.0, float(thr.max() + r.max())
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if g(mid) < 1.0:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 4e-16 * max(1.0, hi):
            break
    mu = 0.5 * (lo + hi)
    active = mu > thr
    if np.any(active):
        polished = (1.0 + np.sum(thr[active] / r[active])) / np.sum(1.0 / r[active])
        if np.array_equal(polished > thr, active):
            mu = float(polished)
    z = np.maximum(mu - thr, 0.0) / r
    return z, mu


def dual_oracle(p: FlowProblem):
    """Row-wise exact solution: returns ``(Z, mu)`` with ``mu`` one per row."""
    rows = [dual_bisection_row(p.R[i], p.F[i], p.lam) for i in range(p.R.shape[0])]
    Z = np.vstack([z for z, _ in rows])
    mu = np.array([m for _, m in rows])
    return Z, mu


@dataclass
class KKTReport:
    kkt_residual: float
    mu: np.ndarray


def kkt_check(p: FlowProblem, Z, tol_active: float = ZERO_THRESHOLD, mu=None) -> KKTReport:
    """Largest first-order violation of ``Z`` for the penalized problem.

    Row potentials default to ``mu_i = -alpha (sum_j Z_ij - 1)``; pass ``mu``
    to check against the exact-constraint problem instead.  Entries with
    ``|Z| > tol_active`` must satisfy ``R Z + lam F sign(Z) = mu``; the rest
    need ``|mu| <= lam F``.
    """
    Z = as_mat(Z)
    if Z.shape != p.R.shape:
        raise ShapeError(f"kkt_check: Z {Z.shape} vs R {p.R.shape}")
    if mu is None:
        mu = -p.alpha * _row_defect(Z)
    mu = np.asarray(mu, dtype=np.float64).ravel()
    mu_col = mu[:, None]
    active = np.abs(Z) > tol_active
    stat = np.abs(p.R * Z + p.lam * p.F * np.sign(Z) - mu_col)
    zero = np.maximum(np.abs(mu_col) - p.lam * p.F, 0.0)
    viol = np.where(active, stat, zero)
    return KKTReport(kkt_residual=float(viol.max(initial=0.0)), mu=mu)


def sparsity_fraction(Z, threshold: float = ZERO_THRESHOLD) -> float:
    """Fraction of entries with magnitude below ``threshold``."""
    Z = as_mat(Z)
    return float(np.mean(np.abs(Z) < threshold))


def heterogeneous_instance(n: int, seed: int = 0, spread: float = 3.0):
    """Row-stochastic ``(R, F)`` with strongly uneven frictions.

    Frictions are a sharp softmax so each row has a few large entries, which
    the l1 term prunes first as ``lam`` grows.
    """
    rng = matcore.seeded_rng(seed)
    R = matcore.row_softmax(rng.standard_normal((n, n)))
    F = matcore.row_softmax(rng.standard_normal((n, n)), scale=spread)
    return R, F
