# %% [markdown]
# # Toy experiment: joint training versus classification only
#
# Fifty synthetic identities, ten renders each.  The joint model routes
# low-quality pairs to the contrastive branch and keeps the rest in
# classification; the baseline trains on originals with the adaptive
# margin only.  Each 200-epoch run takes about a minute on one CPU core.
# Set TOY_EPOCHS for a quicker look.

# %%
import os
import sys
from pathlib import Path

from qgface.diagnostics import diagnose
from qgface.toy import TOY_EPOCHS, run_toy, toy_data

epochs = int(os.environ.get("TOY_EPOCHS", TOY_EPOCHS))
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("notebook-out")
seed = 0
data = toy_data(seed)

results = {}
for variant in ("qgface", "baseline"):
    state, report = run_toy(seed, variant, epochs=epochs, out_dir=out / variant, data=data)
    results[variant] = (state, report)

# %%
print(f"{'tier':6s} {'joint r1':>9s} {'base r1':>9s} {'joint gap':>10s} {'base gap':>10s}")
for tier in data[2].tiers:
    q, b = results["qgface"][1][tier], results["baseline"][1][tier]
    print(f"{tier:6s} {q['rank_k']*100:9.1f} {b['rank_k']*100:9.1f} {q['gap']:10.3f} {b['gap']:10.3f}")

# %% [markdown]
# Diagnostics for the joint model: scaling term versus quality, indicator
# histograms for both streams, the queue similarity trace and per-tier
# similarity-gap histograms.

# %%
train, images, manifest = data
for path in diagnose(results["qgface"][0], out / "diagnostics", images[:256], train.labels[:256], manifest,
                     run_dir=out / "qgface"):
    print(path)
