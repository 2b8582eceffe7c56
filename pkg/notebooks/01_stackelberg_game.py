# %% [markdown]
# # The decay-factor game for one round
#
# The server picks a decay factor gamma. Each selected client then picks an
# integer number of local epochs tau that maximizes gamma*omega*tau - c*tau^2.

# %%
import numpy as np

from flamma.game import (
    ClientGameParams,
    best_response_tau,
    client_utility,
    optimal_gamma,
    quantize_tau,
    verify_equilibrium,
)

# %%
gamma, omega, c = 0.6, 0.8, 0.05
tau_star = best_response_tau(gamma, omega, c)
taus = np.arange(0, 11)
for t in taus:
    print(f"tau={t:2d}  utility={client_utility(gamma, omega, c, t):+.3f}")
print("real optimum", tau_star, "-> integer choice", quantize_tau(tau_star, 1, 10, gamma, omega, c))

# %% [markdown]
# Costly clients abstain: when no epoch count earns positive utility the
# client trains for zero epochs.

# %%
print(quantize_tau(best_response_tau(0.05, 0.3, 0.5), 1, 10, 0.05, 0.3, 0.5))

# %% [markdown]
# The server's choice shrinks with the round index, so late rounds move the
# global model less.

# %%
for t in (1, 2, 5, 10, 20, 50, 100):
    print(t, round(optimal_gamma(0.8, 0.3, t), 4))

# %%
rng = np.random.default_rng(0)
params = [ClientGameParams(i, rng.uniform(0.05, 0.5), rng.uniform(0, 1)) for i in range(8)]
g = np.mean([optimal_gamma(p.contribution, p.cost_coeff, 3) for p in params])
profile = [quantize_tau(best_response_tau(g, p.contribution, p.cost_coeff), 1, 10, g, p.contribution, p.cost_coeff)
           for p in params]
print("gamma", round(g, 4), "epochs", profile, "equilibrium:", verify_equilibrium(params, g, profile))
