"""How far is each estimator from the Cramer-Rao bound?

For small noise the LSOI error and the SIDDS error are both linear in the
noise, so their covariances can be computed without sampling.  The bound is
taken over unbiased estimators that respect the exact (continuous-time)
dynamics.
"""

import numpy as np

from sidds import NoiseModel, crlb_bound, integrate_trajectory, lsoi_asymptotics, make_findiff, sidds_asymptotics
from sidds.problems import get_problem

noise = NoiseModel("iid", 1e-2)
print(f"{'problem':10s} {'CRLB':>10s} {'LSOI':>10s} {'SIDDS':>10s}   (trace of coefficient covariance)")
for name in ("sho", "duffing", "vanderpol"):
    prob = get_problem(name)
    f = prob.fixed_sparsity()
    m = 1000
    X = integrate_trajectory(prob.field, prob.x0, m, prob.delta).states
    D = make_findiff(m, prob.delta, 5)
    bound = crlb_bound(f, prob.x0, m, prob.delta, noise).trace()
    lsoi = np.trace(lsoi_asymptotics(X, f.coeffs, D, prob.spec, noise).covariance)
    sidds = np.trace(sidds_asymptotics(f, prob.x0, m, prob.delta, D, noise).coeff_covariance)
    print(f"{name:10s} {bound:10.3e} {lsoi:10.3e} {sidds:10.3e}")

# wider stencils make LSOI worse: the derivative estimate amplifies more noise
prob = get_problem("sho")
X = integrate_trajectory(prob.field, prob.x0, prob.m, prob.delta).states
for q in (3, 5, 7, 9):
    cov = lsoi_asymptotics(X, prob.fixed_sparsity().coeffs, make_findiff(prob.m, prob.delta, q), prob.spec,
                           noise).covariance
    print(f"SHO LSOI trace with {q}-point stencil: {np.trace(cov):.3e}")
