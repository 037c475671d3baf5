"""Training loop, optimizer, checkpoints and train/test gap reporting.

Training is full batch: each epoch sums the loss over every training graph
(one tape per graph) and takes one Adam step.  Evaluation runs the model in
eval mode, where sfi heads are solved to tolerance.
"""
from __future__ import annotations

import io
import json
import math
import re
import struct
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import graphkit, matcore, sfilayer
from .autodiff import Tape, backward
from .flowsolve import SolverConfig
from .sfilayer import ForwardConfig, ModelParams

__all__ = [
    "TrainConfig",
    "Metrics",
    "AdamState",
    "GCNParams",
    "TrainingDivergence",
    "CheckpointError",
    "cross_entropy",
    "accuracy",
    "adam_update",
    "make_task",
    "build_model",
    "forward",
    "forward_config",
    "train",
    "evaluate",
    "gap_report",
    "metrics_csv",
    "save_checkpoint",
    "load_checkpoint",
    "checkpoint_bytes",
    "checkpoint_from_bytes",
    "model_from_named",
    "warm_start",
]

CKPT_MAGIC = b"SFIC"
CKPT_VERSION = 1
METRICS_HEADER = "epoch,train_loss,test_loss,train_metric,test_metric,gap,sparsity"


class TrainingDivergence(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    eval_every: int = 10
    lambda_star: float = 1.0
    alpha: float = 0.1
    # model
    mode: str = "sfi"            # sfi | dfi | gcn
    width: int = 8
    layers: int = 2
    heads: int = 2
    pe_k: int = 0
    # task
    task: str = "sbm"            # sbm | longrange
    blocks: int = 4
    per_block: int = 10
    p_in: float = 0.5
    p_out: float = 0.05
    feat_dim: int = 4
    noise: float = 0.0
    train_frac: float = 0.5
    ring_n: int = 32
    hop: int = 8
    train_graphs: int = 1
    test_graphs: int = 1
    # solver
    unroll_k: int = 20
    step_policy: str = "bb"
    tol: float = 1e-8
    max_iter: int = 20000
    eval_method: str = "exact"   # exact | iterative
    train_grad: str = "unroll"   # unroll | exact

    def __post_init__(self):
        if self.epochs < 0 or self.eval_every < 1:
            raise ValueError("epochs must be >= 0 and eval_every >= 1")
        if self.lr < 0 or not 0 <= self.beta1 < 1 or not 0 <= self.beta2 < 1 or self.adam_eps <= 0:
            raise ValueError("invalid optimizer hyperparameters")
        if self.mode not in ("sfi", "dfi", "gcn"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.task not in ("sbm", "longrange"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.lambda_star < 0 or not self.alpha > 0:
            raise ValueError("need lambda_star >= 0 and alpha > 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def train_solver(self) -> SolverConfig:
        return SolverConfig(unroll_k=self.unroll_k, step_policy=self.step_policy,
                            tol=self.tol, max_iter=self.max_iter, splitting="smooth")

    def eval_solver(self) -> SolverConfig:
        return SolverConfig(tol=self.tol, max_iter=self.max_iter, method=self.eval_method)


@dataclass
class Metrics:
    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    test_loss: list = field(default_factory=list)
    train_metric: list = field(default_factory=list)
    test_metric: list = field(default_factory=list)
    gap: list = field(default_factory=list)
    sparsity: list = field(default_factory=list)

    def append(self, **row):
        for k, v in row.items():
            getattr(self, k).append(v)

    def __len__(self):
        return len(self.epoch)


# -- losses and optimizer ------------------------------------------------------------

def cross_entropy(logits, labels, mask=None) -> float:
    """Mean of ``-log softmax(logits)[label]`` over the (masked) rows."""
    logits = matcore.as_mat(logits)
    labels = np.asarray(labels)
    rows = np.arange(logits.shape[0]) if mask is None else np.flatnonzero(mask)
    lab = labels[rows]
    if np.any(lab < 0) or np.any(lab >= logits.shape[1]):
        raise ValueError(f"label outside [0, {logits.shape[1]})")
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-np.mean(logp[np.arange(rows.size), lab]))


def accuracy(logits, labels, mask=None) -> float:
    rows = np.arange(len(labels)) if mask is None else np.flatnonzero(mask)
    pred = np.argmax(np.asarray(logits)[rows], axis=1)
    return float(np.mean(pred == np.asarray(labels)[rows]))


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_update(params: list, grads: list, state: AdamState, lr: float,
                beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam step; returns ``(new_params, new_state)``."""
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1, c2 = 1 - beta1 ** t, 1 - beta2 ** t
    new = [p - lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for p, mi, vi in zip(params, m, v)]
    return new, AdamState(m, v, t)


# -- baseline: stacked GCN steps ----------------------------------------------------

@dataclass
class GCNParams:
    """``relu(Ã H W)`` layers between a linear input projection and readout."""

    W_in: np.ndarray
    b_in: np.ndarray
    Ws: list
    W_out: np.ndarray
    b_out: np.ndarray
    pe_k: int = 0
    mode: str = "gcn"

    def named(self):
        out = [("in/W", self.W_in), ("in/b", self.b_in)]
        out += [(f"gcn{i}/W", W) for i, W in enumerate(self.Ws)]
        return out + [("out/W", self.W_out), ("out/b", self.b_out)]

    def values(self):
        return [m for _, m in self.named()]

    def with_values(self, vals):
        k = len(self.Ws)
        return GCNParams(vals[0], vals[1], list(vals[2:2 + k]), vals[2 + k], vals[3 + k], self.pe_k)


def _gcn_forward(tape, g, gp, flat):
    k = len(gp.Ws)
    Xin = sfilayer.node_inputs(g, gp.pe_k)
    ones = tape.const(np.ones((g.n, 1)))
    H = tape.matmul(tape.const(Xin), flat[0]) + tape.matmul(ones, flat[1])
    Atil = tape.const(sfilayer._atil(g))
    for W in flat[2:2 + k]:
        H = tape.relu(tape.matmul(tape.matmul(Atil, H), W))
    return tape.matmul(H, flat[2 + k]) + tape.matmul(ones, flat[3 + k])


def build_model(cfg: TrainConfig, d_in: int, n_classes: int):
    if cfg.mode == "gcn":
        rng = matcore.seeded_rng(cfg.seed)
        glorot = sfilayer._glorot
        return GCNParams(glorot(rng, d_in + cfg.pe_k, cfg.width), np.zeros((1, cfg.width)),
                         [glorot(rng, cfg.width, cfg.width) for _ in range(cfg.layers)],
                         glorot(rng, cfg.width, n_classes), np.zeros((1, n_classes)), cfg.pe_k)
    return sfilayer.init_model(d_in, cfg.width, n_classes, cfg.layers, cfg.heads, cfg.seed,
                               mode=cfg.mode, pe_k=cfg.pe_k)


def forward(model, g, fcfg: ForwardConfig, tape: Tape | None = None, flat=None, record=None):
    """Logits of ``model`` on ``g``; records on ``tape`` when given."""
    own = tape is None
    if own:
        tape = Tape()
        flat = [tape.const(m) for m in model.values()]
    if isinstance(model, GCNParams):
        out = _gcn_forward(tape, g, model, flat)
    else:
        out = sfilayer.model_forward(g, model, fcfg, tape, sfilayer.structure_vars(model, flat),
                                     record=record)
    return out.value if own else out


# -- tasks ----------------------------------------------------------------------------

def make_task(cfg: TrainConfig):
    """Return ``(train, test, n_classes)``; each split is a list of ``(graph, mask)``."""
    if cfg.task == "sbm":
        g = graphkit.gen_sbm(cfg.blocks, cfg.per_block, cfg.p_in, cfg.p_out, cfg.feat_dim,
                             cfg.seed, noise=cfg.noise, train_frac=cfg.train_frac)
        return [(g, g.train_mask)], [(g, g.test_mask)], cfg.blocks
    graphs = [graphkit.gen_longrange(cfg.ring_n, cfg.hop, cfg.feat_dim, cfg.seed * 1000 + i)
              for i in range(cfg.train_graphs + cfg.test_graphs)]
    full = np.ones(cfg.ring_n, dtype=bool)
    train = [(g, full) for g in graphs[:cfg.train_graphs]]
    test = [(g, full) for g in graphs[cfg.train_graphs:]]
    return train, test, 2


def forward_config(cfg: TrainConfig, train: bool) -> ForwardConfig:
    return ForwardConfig(solver=cfg.train_solver() if train else cfg.eval_solver(),
                         lambda_star=cfg.lambda_star if cfg.mode == "sfi" else 0.0,
                         alpha=cfg.alpha, seed=cfg.seed, train=train, grad=cfg.train_grad)


def evaluate(model, split, cfg: TrainConfig):
    """Mean loss, accuracy and attention sparsity over a split (eval mode)."""
    fc = forward_config(cfg, train=False)
    losses, accs, sp = [], [], []
    for g, mask in split:
        record = []
        logits = forward(model, g, fc, record=record)
        losses.append(cross_entropy(logits, g.labels, mask))
        accs.append(accuracy(logits, g.labels, mask))
        sp += [float(np.mean(np.abs(r["att"]) < 1e-8)) for r in record]
    return float(np.mean(losses)), float(np.mean(accs)), float(np.mean(sp)) if sp else 0.0


def _loss_and_grads(model, split, cfg):
    fc = forward_config(cfg, train=True)
    total, grads = 0.0, None
    for g, mask in split:
        tape = Tape()
        flat = [tape.param(m) for m in model.values()]
        logits = forward(model, g, fc, tape, flat)
        loss = tape.scale(tape.cross_entropy(logits, g.labels, mask), 1.0 / len(split))
        gmap = backward(tape, loss)
        gl = [gmap[v.id] for v in flat]
        grads = gl if grads is None else [a + b for a, b in zip(grads, gl)]
        total += float(loss.value[0, 0])
    return total, grads


def train(cfg: TrainConfig, init=None, task=None):
    """Full-batch Adam training.  Returns ``(Metrics, model, step)``.

    ``init`` supplies starting parameters (e.g. from :func:`warm_start`).
    Metrics are recorded at epoch 0 and every ``eval_every`` epochs, plus the
    final epoch.
    """
    train_split, test_split, n_classes = task if task is not None else make_task(cfg)
    g0 = train_split[0][0]
    model = init if init is not None else build_model(cfg, g0.X.shape[1], n_classes)
    params = [p.copy() for p in model.values()]
    state = AdamState.zeros_like(params)
    metrics = Metrics()

    def record(epoch):
        tr_loss, tr_acc, sp = evaluate(model, train_split, cfg)
        te_loss, te_acc, _ = evaluate(model, test_split, cfg)
        metrics.append(epoch=epoch, train_loss=tr_loss, test_loss=te_loss, train_metric=tr_acc,
                       test_metric=te_acc, gap=tr_acc - te_acc, sparsity=sp)

    record(0)
    for epoch in range(1, cfg.epochs + 1):
        loss, grads = _loss_and_grads(model, train_split, cfg)
        if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergence(f"non-finite loss or gradient at epoch {epoch} (loss={loss})")
        params, state = adam_update(params, grads, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        model = model.with_values(params)
        if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
            record(epoch)
    return metrics, model, cfg.epochs


# -- reporting -------------------------------------------------------------------------

def gap_report(m: Metrics) -> dict:
    """Final gap and mean gap over the last quarter of the recorded series."""
    if len(m) == 0:
        raise ValueError("empty metrics series")
    k = max(1, len(m.gap) // 4)
    return {"final_gap": float(m.gap[-1]), "mean_gap_last_quartile": float(np.mean(m.gap[-k:]))}


def metrics_csv(m: Metrics, config: dict | None = None) -> str:
    out = io.StringIO()
    if config is not None:
        out.write("# config: " + json.dumps(config, sort_keys=True) + "\n")
    out.write(METRICS_HEADER + "\n")
    for i in range(len(m)):
        row = [m.epoch[i], m.train_loss[i], m.test_loss[i], m.train_metric[i],
               m.test_metric[i], m.gap[i], m.sparsity[i]]
        out.write(",".join([str(row[0])] + [format(float(x), ".17g") for x in row[1:]]) + "\n")
    return out.getvalue()


# -- checkpoints ------------------------------------------------------------------------

def checkpoint_bytes(named: list, step: int) -> bytes:
    """Binary checkpoint: magic, version, count, then named float64 matrices.

    The training step is stored as the 1x1 matrix ``meta/step``.
    """
    items = list(named) + [("meta/step", np.array([[float(step)]]))]
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(items)))
    for name, mat in items:
        mat = matcore.as_mat(mat)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<II", *mat.shape))
        buf.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())
    return buf.getvalue()


def checkpoint_from_bytes(data: bytes):
    """Inverse of :func:`checkpoint_bytes`: returns ``(named list, step)``."""
    if data[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        named, step = [], 0
        for _ in range(count):
            (ln,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + ln].decode("utf-8")
            off += ln
            rows, cols = struct.unpack_from("<II", data, off)
            off += 8
            nbytes = 8 * rows * cols
            if off + nbytes > len(data):
                raise CheckpointError("truncated checkpoint")
            mat = np.frombuffer(data, dtype="<f8", count=rows * cols, offset=off).reshape(rows, cols).copy()
            off += nbytes
            if name == "meta/step":
                step = int(mat[0, 0])
            else:
                named.append((name, mat))
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return named, step


def save_checkpoint(path, model, step: int, config: dict | None = None) -> None:
    """Write the binary checkpoint and a ``<path>.json`` sidecar with the config echo."""
    matcore.atomic_write(path, checkpoint_bytes(model.named(), step))
    side = {"mode": model.mode, "pe_k": model.pe_k, "step": step}
    if isinstance(model, ModelParams):
        side["level"] = model.level
    if config is not None:
        side["config"] = config
    matcore.atomic_write(f"{path}.json", json.dumps(side, indent=1, sort_keys=True))


def load_checkpoint(path):
    """Returns ``(named list, step, sidecar dict or {})``."""
    import os
    with open(path, "rb") as fh:
        named, step = checkpoint_from_bytes(fh.read())
    side = {}
    if os.path.exists(f"{path}.json"):
        with open(f"{path}.json") as fh:
            side = json.load(fh)
    return named, step, side


_HEAD_RE = re.compile(r"layer(\d+)/head(\d+)/(\w+)$")


def model_from_named(named: list, mode: str = "sfi", pe_k: int = 0, level: str = "node"):
    """Rebuild a model from checkpoint matrices (layer/head counts from the names)."""
    d = dict(named)
    if any(k.startswith("gcn") for k in d):
        k = sum(1 for name in d if name.startswith("gcn"))
        return GCNParams(d["in/W"], d["in/b"], [d[f"gcn{i}/W"] for i in range(k)],
                         d["out/W"], d["out/b"], pe_k)
    heads: dict = {}
    for name in d:
        m = _HEAD_RE.match(name)
        if m:
            heads.setdefault(int(m.group(1)), set()).add(int(m.group(2)))
    layers = []
    for li in range(len(heads)):
        hs = [sfilayer.HeadParams(*(d[f"layer{li}/head{hi}/{nm}"] for nm in sfilayer.HeadParams.NAMES))
              for hi in range(len(heads[li]))]
        layers.append(sfilayer.LayerParams(hs, d[f"layer{li}/gamma_raw"]))
    return ModelParams(d["in/W"], d["in/b"], layers, d["out/W"], d["out/b"], mode, pe_k, level)


def warm_start(dense_named: list, cfg: TrainConfig, d_in: int, n_classes: int) -> ModelParams:
    """Initialise an sfi model from a dense (dfi) checkpoint.

    Every parameter is copied; nothing is frozen.  The checkpoint must match
    the sfi model that ``cfg`` describes in names and shapes.
    """
    if cfg.mode != "sfi":
        cfg = replace(cfg, mode="sfi")
    template = build_model(cfg, d_in, n_classes)
    want = template.named()
    have = dict(dense_named)
    if len(have) != len(want):
        raise CheckpointError(f"checkpoint has {len(have)} matrices, model needs {len(want)}")
    vals = []
    for name, mat in want:
        if name not in have:
            raise CheckpointError(f"checkpoint lacks {name}")
        if have[name].shape != mat.shape:
            raise CheckpointError(f"{name}: checkpoint shape {have[name].shape} != model {mat.shape}")
        vals.append(have[name].copy())
    return template.with_values(vals)
