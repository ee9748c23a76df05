"""Sparse identification of the Lorenz system with an l0-type penalty.

All 10 quadratic monomials are candidates in each of the three equations;
the true field uses 7 of the 30 coefficients.  IRLS drives small
coefficients to zero while the SQP iteration keeps the denoised states
consistent with the dynamics; a final unpenalized solve polishes the
surviving support.  Takes a few minutes on one core.
"""

import numpy as np

from sidds import NoiseModel, SiddsProblem, integrate_trajectory, sample_noise, sidds_solve
from sidds.problems import get_problem

prob = get_problem("lorenz63")
X = integrate_trajectory(prob.field, prob.x0, prob.m, prob.delta).states
Y = X + sample_noise(NoiseModel("iid", 0.1), prob.m, 3, seed=0).reshape(-1, 3)

problem = SiddsProblem.single(Y, prob.spec, prob.delta, points=prob.points, p=0.0, alpha=prob.alpha)
res = sidds_solve(problem)
rep = res.report

print(f"status {rep.status}, {rep.iterations} iterations, {rep.elapsed:.0f}s")
print("\n  it  stage    eps       objective    ||h||     ||grad L||  minres")
for r in rep.records[:: max(1, rep.iterations // 25)]:
    print(f"{r.it:4d}  {r.stage:7s} {r.eps:8.1e}  {r.objective:11.4e}  {r.con_norm:8.2e}  "
          f"{r.l_grad_norm:9.2e}  {r.minres_its:5d}")

found = res.coeffs.matrix != 0
print(f"\nsupport correct: {np.array_equal(found, prob.true_mask)}")
labels = prob.spec.labels()
for i in range(3):
    terms = [f"{res.coeffs.matrix[k, i]:+.4f} {labels[k]}" for k in range(prob.spec.n) if found[k, i]]
    print(f"dx{i + 1}/dt = " + " ".join(terms))
print(f"||c - c*|| = {np.linalg.norm(res.coeffs.matrix - prob.field.C):.4f}")
