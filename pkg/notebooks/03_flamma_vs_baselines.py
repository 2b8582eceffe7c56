# %% [markdown]
# # FLamma against FedAvg, FedProx and q-FFL
#
# All four algorithms share the dataset, the partition and the seed. Accuracy
# variance is measured in percentage points squared across clients.

# %%
import dataclasses

from flamma.cli import RunManifest, load_data
from flamma.federation import ALGORITHMS, FederationConfig, run_experiment

manifest = RunManifest(config=FederationConfig(seed=0, total_rounds=100))
train, test, part = load_data(manifest)

# %%
results = {}
for alg in ALGORITHMS:
    records = run_experiment(dataclasses.replace(manifest.config, algorithm=alg), train, part, test)
    results[alg] = records
    last = records[-1]
    print(f"{alg:8s} accuracy {100 * last.global_accuracy:5.1f}%  variance {last.accuracy_variance:7.1f}  gamma {last.gamma:.3f}")

# %% [markdown]
# The FLamma decay factor falls roughly like 1/t, and clients stop training
# once gamma*omega drops below their cost. Epoch choices per round:

# %%
for r in results["flamma"][::10]:
    print(r.round, round(r.gamma, 4), sorted(r.epochs_chosen.items()))
