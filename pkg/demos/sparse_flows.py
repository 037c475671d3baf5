"""Watch the l1 term switch flows off as lambda* grows.

Solves one heterogeneous-friction instance for a few lambda* values and
prints, for the first sink, which sources still carry flow.

    python demos/sparse_flows.py
"""
import numpy as np

from flowattn import flowsolve as fs

n = 8
R, F = fs.heterogeneous_instance(n, seed=0)
np.set_printoptions(precision=3, suppress=True)

print("row 0 of R:", R[0])
print("row 0 of F:", F[0])
for ls in (0.0, 0.5, 1.0, 2.0, 5.0):
    p = fs.FlowProblem(R, F, fs.effective_lambda(ls, n), alpha=0.1)
    sol = fs.solve(p)
    z = sol.Z[0]
    print(f"lambda*={ls:<4} iters={sol.iterations:<5} sparsity={fs.sparsity_fraction(sol.Z):.3f}  z0={z}")

# the exact-constraint oracle gives the alpha -> inf limit
Zo, mu = fs.dual_oracle(fs.FlowProblem(R, F, fs.effective_lambda(1.0, n), 1.0))
for alpha in (1.0, 10.0, 100.0, 1000.0):
    Z = fs.solve(fs.FlowProblem(R, F, fs.effective_lambda(1.0, n), alpha), fs.SolverConfig(tol=1e-10)).Z
    print(f"alpha={alpha:<7g} max |Z - Z_oracle| = {np.abs(Z - Zo).max():.2e}")
