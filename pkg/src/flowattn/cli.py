"""Command-line entry point: ``flowattn {solve,oracle,gradcheck,train,sweep,gen}``.

Every subcommand takes ``--config FILE`` (JSON).  Values are resolved as
built-in defaults, then the config file, then explicit flags.  Unknown
config keys are an input error.  The seed falls back to ``$SFI_SEED`` when
neither the file nor a flag sets it.

Exit codes: 0 success, 1 input error, 2 no convergence, 3 numerical divergence.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import fields, replace

import numpy as np

from . import autodiff, flowsolve, graphkit, matcore, sfilayer, trainer
from .flowsolve import DivergenceError, FlowProblem, SolverConfig
from .matcore import DomainError, ShapeError

EXIT_OK, EXIT_INPUT, EXIT_NOCONV, EXIT_DIVERGED = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


class InputError(Exception):
    """Bad flags, config or input files (exit 1)."""


# -- config resolution ------------------------------------------------------------

def _load_config(path):
    if path is None:
        return {}
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InputError("config file must hold a JSON object")
    return doc


def resolve(args, defaults: dict) -> dict:
    """Merge defaults <- config file <- explicit flags; reject unknown keys."""
    file_cfg = _load_config(getattr(args, "config", None))
    extra = set(file_cfg) - set(defaults)
    if extra:
        raise InputError(f"unknown config keys: {sorted(extra)}")
    cfg = dict(defaults)
    cfg.update(file_cfg)
    flags = {k: v for k, v in vars(args).items() if k in defaults and v is not None}
    cfg.update(flags)
    if "seed" in defaults and "seed" not in file_cfg and "seed" not in flags:
        env = os.environ.get("SFI_SEED")
        if env is not None:
            try:
                cfg["seed"] = int(env)
            except ValueError as exc:
                raise InputError(f"SFI_SEED must be an integer, got {env!r}") from exc
    return cfg


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(x) for x in text]
    try:
        return [float(x) for x in str(text).split(",") if x.strip()]
    except ValueError as exc:
        raise InputError(f"expected a comma-separated list of numbers, got {text!r}") from exc


def _config_line(cfg: dict) -> str:
    return "config: " + json.dumps(cfg, sort_keys=True)


def _csv_table(header, rows, cfg) -> str:
    lines = ["# " + _config_line(cfg), ",".join(header)]
    for r in rows:
        lines.append(",".join(format(float(x), ".17g") for x in r))
    return "\n".join(lines) + "\n"


def _emit(text: str, path) -> None:
    if path:
        matcore.atomic_write(path, text)
    else:
        sys.stdout.write(text)


# -- instances --------------------------------------------------------------------

def _instance(cfg) -> tuple[np.ndarray, np.ndarray]:
    if cfg.get("r"):
        try:
            R = matcore.read_csv(cfg["r"])
            F = matcore.read_csv(cfg["f"]) if cfg.get("f") else np.zeros_like(R)
        except OSError as exc:
            raise InputError(str(exc)) from exc
        return R, F
    n = int(cfg["n"])
    if n < 1:
        raise InputError("n must be >= 1")
    return flowsolve.heterogeneous_instance(n, int(cfg["seed"]))


def _problem(R, F, lambda_star, alpha) -> FlowProblem:
    p = FlowProblem(R, F, flowsolve.effective_lambda(lambda_star, R.shape[1]), alpha)
    return p.validate()


def _solver_cfg(cfg) -> SolverConfig:
    return SolverConfig(max_iter=int(cfg["max_iter"]), tol=float(cfg["tol"]),
                        step_policy=cfg["step_policy"], method=cfg["method"])


# -- solve --------------------------------------------------------------------------

SOLVE_DEFAULTS = {"r": None, "f": None, "n": 8, "seed": 0, "lambda_star": 1.0, "alpha": 0.1,
                  "tol": 1e-8, "max_iter": 20000, "step_policy": "bb", "method": "iterative",
                  "out": "flows.csv"}


def cmd_solve(args) -> int:
    cfg = resolve(args, SOLVE_DEFAULTS)
    R, F = _instance(cfg)
    p = _problem(R, F, cfg["lambda_star"], cfg["alpha"])
    sol = flowsolve.solve(p, _solver_cfg(cfg), rng=matcore.seeded_rng(int(cfg["seed"])))
    matcore.write_csv(cfg["out"], sol.Z, comment=_config_line(cfg))
    diag = dict(sol.diagnostics(), config=cfg)
    matcore.atomic_write(cfg["out"] + ".json", json.dumps(diag, indent=1, sort_keys=True))
    print(json.dumps(sol.diagnostics()))
    return EXIT_OK if sol.converged else EXIT_NOCONV


# -- oracle -------------------------------------------------------------------------

ORACLE_DEFAULTS = dict(SOLVE_DEFAULTS, alpha_list="10,100,1000", tol=1e-10, out=None)
del ORACLE_DEFAULTS["alpha"]


def cmd_oracle(args) -> int:
    """Penalized solutions for increasing alpha against the exact-constraint oracle."""
    cfg = resolve(args, ORACLE_DEFAULTS)
    R, F = _instance(cfg)
    alphas = _floats(cfg["alpha_list"])
    if not alphas or any(not a > 0 for a in alphas):
        raise InputError("alpha_list needs positive values")
    Zo, _ = flowsolve.dual_oracle(_problem(R, F, cfg["lambda_star"], 1.0))
    rows, ok = [], True
    for a in alphas:
        p = _problem(R, F, cfg["lambda_star"], a)
        sol = flowsolve.solve(p, _solver_cfg(cfg), rng=matcore.seeded_rng(int(cfg["seed"])))
        ok &= sol.converged
        Zn = sol.Z / sol.Z.sum(axis=1, keepdims=True)
        rows.append((a, np.abs(sol.Z - Zo).max(), sol.feas_residual, np.abs(Zn - Zo).max()))
    _emit(_csv_table(["alpha", "max_abs_error_vs_oracle", "feas_residual",
                      "max_abs_error_renormalized"], rows, cfg), cfg["out"])
    return EXIT_OK if ok else EXIT_NOCONV


# -- gradcheck ----------------------------------------------------------------------

def _loss_against(tape, out, rng):
    """Scalar ``sum(out * C)`` with a fixed random ``C`` so every entry matters."""
    C = tape.const(rng.standard_normal(out.shape))
    return tape.reduce_sum(tape.hadamard(out, C))


def _away_from(rng, shape, kinks, gap=0.05):
    """Random values at least ``gap`` from every kink (for piecewise ops)."""
    x = rng.standard_normal(shape)
    for k in kinks:
        near = np.abs(x - k) < gap
        x[near] += np.where(x[near] >= k, gap, -gap)
    return x


def _solver_case(rng, n, exact):
    def f(tape, vs):
        R = tape.row_softmax(vs[0], -1.0)
        F = tape.row_softmax(vs[1], -1.0)
        lam, alpha = flowsolve.effective_lambda(1.0, n), 0.1
        if exact:
            Z = sfilayer.exact_flows(tape, R, F, lam, alpha)
        else:
            cfg = SolverConfig(step_policy="fixed", step=flowsolve.safe_step(alpha, n), unroll_k=20)
            Z, _ = sfilayer.unrolled_flows(tape, R, F, lam, alpha, cfg,
                                           flowsolve.initial_flows(matcore.seeded_rng(7), n, n))
        return _loss_against(tape, Z, np.random.default_rng(1))
    return f, [rng.standard_normal((n, n)), rng.standard_normal((n, n))]


def _layer_case(rng, mode, n=6, d=4):
    lp = sfilayer.init_model(d, d, 2, 1, 2, int(rng.integers(1 << 30)), mode=mode).layers[0]
    X = rng.standard_normal((n, d))
    edges = [(i, (i + 1) % n) for i in range(n)]
    g = graphkit.Graph(n, edges, X, np.zeros(n, dtype=int))
    Atil = graphkit.normalized_adjacency(g)
    solver = SolverConfig(step_policy="fixed", step=flowsolve.safe_step(0.1, n), unroll_k=20)
    fc = sfilayer.ForwardConfig(solver=solver, lambda_star=1.0, alpha=0.1, train=True)
    params = [lp.gamma_raw] + [getattr(h, nm) for h in lp.heads for nm in sfilayer.HeadParams.NAMES]
    nh = len(lp.heads)

    def f(tape, vs):
        it = iter(vs[1:])
        heads = [{nm: next(it) for nm in sfilayer.HeadParams.NAMES} for _ in range(nh)]
        out = sfilayer.layer_forward(tape, tape.const(X), tape.const(Atil),
                                     {"gamma_raw": vs[0], "heads": heads}, mode, fc)
        return _loss_against(tape, out, np.random.default_rng(2))
    return f, params


def gradcheck_cases(seed: int = 0) -> dict:
    """Named ``(f, params)`` pairs covering every tape op plus the solver and layer."""
    rng = matcore.seeded_rng(seed)
    c = {}

    def unary(op, x):
        return (lambda tape, vs: _loss_against(tape, op(tape, vs[0]), np.random.default_rng(3))), [x]

    c["matmul"] = (lambda tape, vs: _loss_against(tape, tape.matmul(vs[0], vs[1]), np.random.default_rng(3)),
                   [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    c["hadamard"] = (lambda tape, vs: _loss_against(tape, tape.hadamard(vs[0], vs[1]), np.random.default_rng(3)),
                     [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))])
    c["add_sub_scale"] = (lambda tape, vs: _loss_against(
        tape, tape.scale(tape.sub(tape.add(vs[0], vs[1]), vs[0]), 2.5), np.random.default_rng(3)),
        [rng.standard_normal((3, 3)), rng.standard_normal((3, 3))])
    c["transpose"] = unary(lambda t, v: t.transpose(v), rng.standard_normal((3, 4)))
    c["exp"] = unary(lambda t, v: t.exp(v), rng.standard_normal((3, 4)))
    c["row_softmax"] = unary(lambda t, v: t.row_softmax(v, -0.7), rng.standard_normal((4, 5)))
    c["soft_threshold"] = unary(lambda t, v: t.soft_threshold(v, t.const(np.full(v.shape, 0.3))),
                                _away_from(rng, (4, 5), (-0.3, 0.3)))
    c["row_sum_outer"] = unary(lambda t, v: t.row_sum_outer(v), rng.standard_normal((4, 4)))
    c["relu"] = unary(lambda t, v: t.relu(v), _away_from(rng, (3, 4), (0.0,)))
    c["softplus"] = unary(lambda t, v: t.softplus(v), rng.standard_normal((3, 4)))
    c["reciprocal"] = unary(lambda t, v: t.reciprocal(v), 1.0 + rng.random((3, 4)))
    labels = rng.integers(0, 3, 5)
    c["cross_entropy"] = ((lambda tape, vs: tape.cross_entropy(vs[0], labels)),
                          [rng.standard_normal((5, 3))])
    c["unrolled_solver"] = _solver_case(rng, 6, exact=False)
    c["exact_flows"] = _solver_case(rng, 6, exact=True)
    c["layer_dfi"] = _layer_case(rng, "dfi")
    c["layer_sfi"] = _layer_case(rng, "sfi")
    return c


GRADCHECK_DEFAULTS = {"ops": None, "eps": 1e-5, "seed": 0, "max_coords": None, "out": None}


def cmd_gradcheck(args) -> int:
    cfg = resolve(args, GRADCHECK_DEFAULTS)
    cases = gradcheck_cases(int(cfg["seed"]))
    names = list(cases)
    if cfg["ops"]:
        names = [s.strip() for s in str(cfg["ops"]).split(",") if s.strip()]
        bad = [s for s in names if s not in cases]
        if bad:
            raise InputError(f"unknown ops {bad}; choose from {sorted(cases)}")
    eps = float(cfg["eps"])
    if eps > 1e-3:
        print(f"warning: eps={eps:g} is large; truncation error will dominate", file=sys.stderr)
    reports = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for nm in names:
            f, params = cases[nm]
            mc = cfg["max_coords"]
            reports.append(autodiff.gradcheck(f, params, eps=eps, op=nm, seed=int(cfg["seed"]),
                                              max_coords=int(mc) if mc else None))
    worst = max(r.max_rel_err for r in reports)
    doc = {"config": cfg, "tolerance": GRADCHECK_TOL, "max_rel_err": worst,
           "passed": worst <= GRADCHECK_TOL,
           "reports": [json.loads(r.to_json()) for r in reports]}
    _emit(json.dumps(doc, indent=1, sort_keys=True) + "\n", cfg["out"])
    # a failed check is reported like an input error: the run itself completed
    return EXIT_OK if worst <= GRADCHECK_TOL else EXIT_INPUT


# -- train --------------------------------------------------------------------------

TRAIN_MODES = ("sfi", "dfi", "gcn", "sfi-plus")
TRAIN_DEFAULTS = {f.name: f.default for f in fields(trainer.TrainConfig)}
TRAIN_DEFAULTS.update(out="run", from_ckpt=None)


def _train_config(cfg: dict, mode: str) -> trainer.TrainConfig:
    keys = {f.name for f in fields(trainer.TrainConfig)}
    return trainer.TrainConfig(**{k: v for k, v in cfg.items() if k in keys and k != "mode"}, mode=mode)


def cmd_train(args) -> int:
    cfg = resolve(args, TRAIN_DEFAULTS)
    mode = cfg["mode"]
    if mode not in TRAIN_MODES:
        raise InputError(f"mode must be one of {TRAIN_MODES}")
    try:
        tc = _train_config(cfg, "sfi" if mode == "sfi-plus" else mode)
    except (TypeError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    task = trainer.make_task(tc)
    init, extra = None, {}
    if mode == "sfi-plus":
        d_in = task[0][0][0].X.shape[1]
        if cfg["from_ckpt"]:
            try:
                named, _, _ = trainer.load_checkpoint(cfg["from_ckpt"])
            except OSError as exc:
                raise InputError(str(exc)) from exc
        else:
            # no checkpoint given: train the dense model first
            _, dense, _ = trainer.train(replace(tc, mode="dfi"), task=task)
            named = dense.named()
        init = trainer.warm_start(named, tc, d_in, task[2])
        extra["warm_start"] = cfg["from_ckpt"] or "dfi (trained in this run)"
    elif cfg["from_ckpt"]:
        raise InputError("--from-ckpt only applies to --mode sfi-plus")
    metrics, model, step = trainer.train(tc, init=init, task=task)
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    resolved = dict(cfg, **extra)
    matcore.atomic_write(os.path.join(out, "metrics.csv"), trainer.metrics_csv(metrics, resolved))
    trainer.save_checkpoint(os.path.join(out, "checkpoint.sfic"), model, step, resolved)
    summary = {"config": resolved, "gap": trainer.gap_report(metrics),
               "final": {"train_metric": metrics.train_metric[-1], "test_metric": metrics.test_metric[-1]}}
    if mode in ("sfi", "sfi-plus", "dfi"):
        rec = []
        trainer.forward(model, task[0][0][0], trainer.forward_config(tc, train=False), record=rec)
        summary["attention"] = sfilayer.dump_attention(rec, os.path.join(out, "attention"), resolved)
    matcore.atomic_write(os.path.join(out, "summary.json"), json.dumps(summary, indent=1, sort_keys=True))
    print(json.dumps({"train_metric": metrics.train_metric[-1], "test_metric": metrics.test_metric[-1],
                      "gap": metrics.gap[-1], "out": out}))
    return EXIT_OK


# -- sweep --------------------------------------------------------------------------

SWEEP_DEFAULTS = dict(SOLVE_DEFAULTS, n=16, lambda_list="0,0.5,1,2,5", out=None)
del SWEEP_DEFAULTS["lambda_star"]


def cmd_sweep(args) -> int:
    """Sparsity of the optimal flows as the l1 weight grows, on one fixed instance."""
    cfg = resolve(args, SWEEP_DEFAULTS)
    R, F = _instance(cfg)
    rows, ok = [], True
    for ls in _floats(cfg["lambda_list"]):
        if ls < 0:
            raise InputError("lambda values must be >= 0")
        p = _problem(R, F, ls, cfg["alpha"])
        sol = flowsolve.solve(p, _solver_cfg(cfg), rng=matcore.seeded_rng(int(cfg["seed"])))
        ok &= sol.converged
        rows.append((ls, flowsolve.sparsity_fraction(sol.Z), sol.feas_residual, sol.objective))
    _emit(_csv_table(["lambda_star", "sparsity_fraction_below_1e-8", "feas_residual", "objective"],
                     rows, cfg), cfg["out"])
    return EXIT_OK if ok else EXIT_NOCONV


# -- gen ----------------------------------------------------------------------------

GEN_DEFAULTS = {"task": "sbm", "blocks": 4, "per_block": 10, "p_in": 0.5, "p_out": 0.05,
                "feat_dim": 4, "noise": 0.0, "train_frac": 0.5, "ring_n": 32, "hop": 8,
                "seed": 0, "out": "graph.json"}


def cmd_gen(args) -> int:
    cfg = resolve(args, GEN_DEFAULTS)
    if cfg["task"] == "sbm":
        g = graphkit.gen_sbm(int(cfg["blocks"]), int(cfg["per_block"]), float(cfg["p_in"]),
                             float(cfg["p_out"]), int(cfg["feat_dim"]), int(cfg["seed"]),
                             float(cfg["noise"]), float(cfg["train_frac"]))
    elif cfg["task"] == "longrange":
        g = graphkit.gen_longrange(int(cfg["ring_n"]), int(cfg["hop"]), int(cfg["feat_dim"]),
                                   int(cfg["seed"]))
    else:
        raise InputError(f"unknown task {cfg['task']!r}")
    graphkit.save_graph(cfg["out"], g, extra={"config": cfg})
    print(json.dumps({"n": g.n, "edges": len(g.edges), "out": cfg["out"]}))
    return EXIT_OK


# -- parser -------------------------------------------------------------------------

def _instance_flags(p, with_lambda=True):
    p.add_argument("--r", help="resistance matrix CSV (default: generated instance)")
    p.add_argument("--f", help="friction matrix CSV (default zeros)")
    p.add_argument("--n", type=int, help="size of the generated instance")
    if with_lambda:
        p.add_argument("--lambda", dest="lambda_star", type=float,
                       help="l1 weight lambda*; the solver uses lambda*/n")
    p.add_argument("--tol", type=float)
    p.add_argument("--max-iter", dest="max_iter", type=int)
    p.add_argument("--step-policy", dest="step_policy", choices=("bb", "fixed"))
    p.add_argument("--method", choices=("iterative", "exact"))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="flowattn", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--seed", type=int)
        p.add_argument("--out")
        return p

    p = common(sub.add_parser("solve", help="solve one flow problem"))
    _instance_flags(p)
    p.add_argument("--alpha", type=float)
    p.set_defaults(func=cmd_solve)

    p = common(sub.add_parser("oracle", help="penalized solver vs exact oracle over alpha"))
    _instance_flags(p)
    p.add_argument("--alpha-list", dest="alpha_list")
    p.set_defaults(func=cmd_oracle)

    p = common(sub.add_parser("gradcheck", help="finite-difference check of tape gradients"))
    p.add_argument("--ops", help="comma-separated subset of checks")
    p.add_argument("--eps", type=float)
    p.add_argument("--max-coords", dest="max_coords", type=int)
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("train", help="train a model on a synthetic task"))
    for f in fields(trainer.TrainConfig):
        if f.name in ("seed",):
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.name == "mode":
            p.add_argument(flag, choices=TRAIN_MODES)
        else:
            p.add_argument(flag, dest=f.name, type=type(f.default))
    p.add_argument("--from-ckpt", dest="from_ckpt")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("sweep", help="sparsity as a function of lambda*"))
    _instance_flags(p, with_lambda=False)
    p.add_argument("--alpha", type=float)
    p.add_argument("--lambda-list", dest="lambda_list")
    p.set_defaults(func=cmd_sweep)

    p = common(sub.add_parser("gen", help="generate a synthetic graph as JSON"))
    p.add_argument("--task", choices=("sbm", "longrange"))
    for name, typ in (("blocks", int), ("per_block", int), ("p_in", float), ("p_out", float),
                      ("feat_dim", int), ("noise", float), ("train_frac", float),
                      ("ring_n", int), ("hop", int)):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)
    p.set_defaults(func=cmd_gen)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (DivergenceError, trainer.TrainingDivergence, FloatingPointError) as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, ValueError, ShapeError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
