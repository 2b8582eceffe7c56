# %% [markdown]
# # Convergence bound on quadratic clients
#
# Each client minimizes 0.5*||w - b_i||^2 under zero-mean gradient noise, so
# rho = beta = 1 and the optimum is the weighted mean of the targets. The
# measured optimality gap is compared with the theoretical bound.

# %%
from flamma.analysis import bound_B, bound_C, check_bound_quadratic

for T in (10, 50, 100):
    rep = check_bound_quadratic(num_clients=10, K=5, T=T, seeds=10)
    print(f"T={T:3d}  gap={rep.empirical_gap:.4f}  bound={rep.bound:.1f}  holds={rep.holds}")

# %%
c = rep.constants
print("kappa", c.kappa, "xi", c.xi, "eta", c.eta)
print("G^2", round(c.G2, 3), "B", round(bound_B(c), 2), "C", round(bound_C(c), 2))
