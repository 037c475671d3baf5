"""The dense flow pattern is ordinary softmax attention.

With R = softmax(-QK^T / sqrt(dk)) the unregularised optimal flows are
proportional to 1/R, which is softmax(QK^T / sqrt(dk)) again.  The sfi layer
at lambda* = 0 and large alpha therefore reproduces the dfi layer.

    python demos/softmax_limit.py
"""
import math

import numpy as np

from flowattn import flowsolve as fs, graphkit as gk, matcore, sfilayer as sl
from flowattn.autodiff import Tape

rng = matcore.seeded_rng(0)
Q, K = rng.standard_normal((6, 4)), rng.standard_normal((6, 4))
S = Q @ K.T
R = matcore.row_softmax(S, -1 / math.sqrt(4))
print("max |1/R normalised - softmax| =",
      np.abs(fs.dense_closed_form(R) - matcore.row_softmax(S, 1 / math.sqrt(4))).max())

g = gk.gen_sbm(2, 4, 0.7, 0.1, 8, seed=1)
At = gk.normalized_adjacency(g)
lp = sl.init_model(8, 8, 2, 1, 2, seed=0).layers[0]
for alpha in (1.0, 10.0, 100.0, 1000.0):
    fc = sl.ForwardConfig(solver=fs.SolverConfig(tol=1e-10, max_iter=100000), lambda_star=0.0, alpha=alpha)
    a = sl.layer_forward(Tape(), g.X, At, lp, "sfi", fc).value
    b = sl.layer_forward(Tape(), g.X, At, lp, "dfi", fc).value
    print(f"alpha={alpha:<7g} max |sfi - dfi| = {np.abs(a - b).max():.2e}")
