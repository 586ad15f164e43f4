# %% [markdown]
# # Synthetic mixed-quality faces and the paired augmentation stream
#
# The synthetic generator renders procedural faces per identity.  Probes are
# degraded into tiers (downscale plus JPEG); the gallery is clean.  Training
# batches are paired: originals get only a flip, the augmented copy gets
# crop, rotation, colour jitter, down-up sampling and JPEG, each with its
# own coin.

# %%
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from qgface.augment import AugmentConfig, make_pair_batch, pair_grid
from qgface.toy import toy_data

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("notebook-out")
out.mkdir(parents=True, exist_ok=True)

train, images, manifest = toy_data(seed=0, n_ids=8, per_id=4, probes_per_id=1)
print("train", images.shape, "identities", train.n_identities)
print("probe tiers", manifest.tiers, "gallery", len(manifest.gallery))

# %%
tiers = np.concatenate([np.stack([manifest.images[i] for i, _ in manifest.probes_in(t)][:6]) for t in manifest.tiers])
rows = [np.concatenate(list(tiers[k * 6:(k + 1) * 6]), axis=1) for k in range(len(manifest.tiers))]
Image.fromarray(np.concatenate(rows, axis=0)).save(out / "probe_tiers.png")

# %%
cfg = AugmentConfig(input_size=images.shape[1:3])
originals, augmented = make_pair_batch(images[:12], cfg, np.random.default_rng(0))
Image.fromarray(pair_grid(originals, augmented, columns=4)).save(out / "pairs.png")
print("wrote", out / "probe_tiers.png", "and", out / "pairs.png")
