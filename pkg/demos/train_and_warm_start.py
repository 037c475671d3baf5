"""Train a dense model, then continue it as a sparse one.

Runs the dfi model on a small noisy SBM, copies its weights into an sfi
model (nothing frozen) and trains that for a few more epochs.  Prints the
train/test accuracy and attention sparsity along the way.

    python demos/train_and_warm_start.py
"""
from dataclasses import replace

from flowattn import trainer as tr

cfg = tr.TrainConfig(mode="dfi", epochs=100, eval_every=25, feat_dim=12, noise=1.0, lr=0.01)
task = tr.make_task(cfg)
m, dense, _ = tr.train(cfg, task=task)
for e, a, b in zip(m.epoch, m.train_metric, m.test_metric):
    print(f"dfi  epoch {e:>3}  train {a:.2f}  test {b:.2f}")

scfg = replace(cfg, mode="sfi", epochs=40, eval_every=10)
init = tr.warm_start(dense.named(), scfg, task[0][0][0].X.shape[1], task[2])
m, _, _ = tr.train(scfg, init=init, task=task)
for e, a, b, s in zip(m.epoch, m.train_metric, m.test_metric, m.sparsity):
    print(f"sfi+ epoch {e:>3}  train {a:.2f}  test {b:.2f}  sparsity {s:.2f}")
print(tr.gap_report(m))
