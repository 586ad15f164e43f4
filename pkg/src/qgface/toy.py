"""Desk-scale preset: a small synthetic mixed-quality benchmark and matching config.

Fifty identities with ten training renders each, 48x48 pixels.  Probes come in
four tiers (clean plus three degradation levels, ``d1`` being the worst);
the gallery holds one clean render per identity.
"""

import numpy as np

from .config import TrainConfig, baseline
from .data import synth_generate
from .encoder import embed_images
from .evaluation import identification_by_tier
from .train import fit

TOY_LEVELS = (1.0, (0.5, 75), (0.3, 50), (0.18, 30))
TOY_TIERS = ("hq", "d3", "d2", "d1")
TOY_SIZE = (48, 48)
TOY_EPOCHS = 200


def toy_data(seed, n_ids=50, per_id=10, probes_per_id=3):
    """Returns (train_index, train_images, eval_manifest)."""
    train, manifest = synth_generate(n_ids, per_id, TOY_LEVELS, TOY_SIZE, seed=seed,
                                     probes_per_id=probes_per_id, tier_names=list(TOY_TIERS))
    images = np.stack([img for img, _ in train.records])
    return train, images, manifest


def toy_config(seed, epochs=TOY_EPOCHS, variant="qgface"):
    # the small dataset needs many more passes than the 12-epoch default
    cfg = TrainConfig(image_size=TOY_SIZE, epochs=epochs, seed=seed, batch_size=64, lr=0.05,
                      lr_drop_epochs=tuple(sorted({epochs // 2, epochs * 3 // 4} - {0})))
    if variant == "baseline":
        return baseline(cfg)
    if variant != "qgface":
        raise ValueError(f"unknown variant {variant!r}")
    return cfg


def run_toy(seed, variant="qgface", epochs=TOY_EPOCHS, out_dir=None, data=None):
    """Train one toy model and score it per tier.

    Returns ``(state, report)`` where ``report[tier]`` holds rank_k, gap,
    mean_matched, mean_best_unmatched and n_probes.
    """
    train, images, manifest = data if data is not None else toy_data(seed)
    state = fit(toy_config(seed, epochs, variant), train, out_dir=out_dir, images=images)
    emb = embed_images(state.encoder, np.stack(manifest.images))
    return state, identification_by_tier(emb, manifest)
