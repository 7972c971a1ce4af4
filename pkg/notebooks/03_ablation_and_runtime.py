# %% [markdown]
# # Ablation variants, segment count and runtime
#
# Variants A to G switch parts of the hyperfunction on and off. All rows share
# the same seeds and so the same splits. The block-model fixture is easy, so
# most rows saturate; the point here is the mechanics, not the ranking.

# %%
from dataclasses import replace

import numpy as np

from grelu.activations import ActivationSpec
from grelu.graph import synthetic_sbm
from grelu.models import ModelConfig
from grelu.training import TrainConfig, ablation_suite, k_sweep, runtime_bench

g = synthetic_sbm(4, 25, 0.3, 0.05, 16, seed=1, noise=2.0)
cfg = TrainConfig(epochs=100, per_class=10, test_size=40)
base = ModelConfig()
for row in ablation_suite(base, g, cfg, n_runs=3):
    print(f"{row['model']:9s} {row['type']:10s} K={row['k']}  {row['mean']:.3f} +/- {row['std']:.3f}")

# %% [markdown]
# ## Number of segments

# %%
grelu = ModelConfig(activation=ActivationSpec("grelu"))
for row in k_sweep(grelu, g, cfg, ks=range(1, 6), n_runs=3):
    print(f"K={row['k']}: {row['mean']:.3f}")

# %% [markdown]
# ## Per-epoch cost
#
# Timed serially, best of two rounds after a warm-up.

# %%
big = synthetic_sbm(6, 300, 0.01, 0.0005, 200, seed=0)
rows = runtime_bench(grelu, big, replace(cfg, epochs=30), repeats=2)
relu_ms = np.median(rows[0]["epoch_times_ms"])
for r in rows:
    ms = np.median(r["epoch_times_ms"])
    print(f"{r['activation']:7s} {ms:6.2f} ms/epoch  ({ms / relu_ms:.2f}x ReLU)")
