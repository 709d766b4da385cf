"""Perceptron: overlap concentration and the conditional-Gaussian projection law.

Thin-shell statistics of the spins and of the auxiliary vector u'(S) are
reported under the disorder-averaged Gibbs law, followed by the discrepancy
between <g(Theta^T x)> and its Gaussian prediction for a small test battery.
"""

from glasslab import verify
from glasslab.models import Kind, ModelSpec
from glasslab.potentials import tanh_potential

spec = ModelSpec(Kind.PERCEPTRON, alpha=0.5, u=tanh_potential(0.5))
print(f"{'N':>4} {'Var R12':>10} {'Var aux':>10} {'<R12>':>8}")
for N in (8, 12, 16):
    c = verify.concentration_stats(spec, N, 200, master_seed=N)
    print(f"{N:>4} {c.var_R12:10.5f} {c.var_aux_overlap:10.2e} {c.mean_R12:8.4f}")

sk = ModelSpec(Kind.SK_ISING, beta=0.25, h=0.3)
print(f"\n{'N':>4} " + " ".join(f"{g:>12}" for g in ("tanh", "cos1", "const")))
for N in (8, 12, 16):
    s = verify.projection_test(sk, N, 2, ["tanh", "cos1", "const"], 300, master_seed=N)
    print(f"{N:>4} " + " ".join(f"{s.battery[g]['msd1']:12.3e}" for g in ("tanh", "cos1", "const")))
