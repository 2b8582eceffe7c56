# %% [markdown]
# # Label-skewed client data
#
# Shard partitioning sorts the training set by label, cuts it into equal
# shards and hands each client a few of them, so most clients see two classes.

# %%
import numpy as np

from flamma.datasets import client_weights, generate_synthetic, partition_iid, partition_shards, train_test_split

ds = generate_synthetic(num_classes=10, dim=20, per_class=100, seed=0)
train, test = train_test_split(ds, 0.2, seed=0)
print(len(train), "training rows,", len(test), "test rows")

# %%
shards = partition_shards(train, num_clients=20, shards_per_client=2, seed=0)
for cid in range(5):
    labels, counts = np.unique(train.labels[shards[cid]], return_counts=True)
    print(cid, dict(zip(labels.tolist(), counts.tolist())))

# %%
iid = partition_iid(train, num_clients=20, seed=0)
print("classes per client, iid:", [len(np.unique(train.labels[iid[c]])) for c in range(5)])
print("aggregation weights sum to", sum(client_weights(shards).values()))
