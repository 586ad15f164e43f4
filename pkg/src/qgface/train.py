"""Joint training: quality partitioning, adaptive-margin classification and
queue-based contrastive learning on a single encoder."""

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import config as config_mod
from .augment import make_pair_batch
from .classification import ClassifierProxies, classification_loss
from .contrastive import ProxyQueue, contrastive_loss, enqueue
from .encoder import Encoder, EncoderSpec, embed
from .errors import ConfigurationError, NumericError
from .quality import QualityState, partition, quality_indicator, to_unit, update_stats

log = logging.getLogger(__name__)

METRICS_COLUMNS = ["step", "total_loss", "class_loss", "contra_loss", "frac_lq_pairs",
                   "mu_z", "sigma_z", "lr"]
QUALITY_COLUMNS = ["step", "mu_z", "sigma_z", "frac_lq"]
CONTRASTIVE_COLUMNS = ["step", "num_pairs", "mean_pos_sim", "mean_neg_sim"]


@dataclass
class StepMetrics:
    step: int
    total_loss: float
    class_loss: float
    contra_loss: float
    frac_lq_pairs: float
    mu_z: float
    sigma_z: float
    lr: float
    num_contra_pairs: int = 0
    mean_pos_sim: float = math.nan
    mean_neg_sim: float = math.nan


class TrainState:
    """Everything mutated by training: encoder, proxies, optimiser, statistics, queue."""

    def __init__(self, config, n_identities, identity_names=None):
        self.config = config
        self.n_identities = int(n_identities)
        self.identity_names = list(identity_names or [])
        enc = config.encoder
        self.encoder_spec = EncoderSpec(input_size=config.image_size, embedding_dim=enc.embedding_dim,
                                        arch=enc.arch, seed=config.seed, widths=tuple(enc.widths),
                                        output_bn=enc.output_bn)
        self.encoder = Encoder(self.encoder_spec)
        gen = torch.Generator().manual_seed(config.seed + 1)
        self.proxies = ClassifierProxies(enc.embedding_dim, self.n_identities,
                                         s=config.loss.s, m=config.loss.m, generator=gen)
        self.optimizer = torch.optim.SGD(
            list(self.encoder.parameters()) + list(self.proxies.parameters()),
            lr=config.lr, momentum=config.momentum, weight_decay=config.weight_decay)
        q = config.quality
        self.quality = QualityState(momentum=q.momentum, c=q.c, b=q.b)
        capacity = config.queue.capacity or self.n_identities
        self.queue = ProxyQueue(capacity, enc.embedding_dim)
        self.step = 0
        self.epoch = 0

    def set_lr(self, lr):
        for group in self.optimizer.param_groups:
            group["lr"] = lr

    @property
    def lr(self):
        return self.optimizer.param_groups[0]["lr"]

    def parameters_vector(self):
        with torch.no_grad():
            params = list(self.encoder.parameters()) + list(self.proxies.parameters())
            return torch.cat([p.reshape(-1) for p in params]).clone()

    def checkpoint(self):
        return {
            "format": "qgface-checkpoint-1",
            "arch": self.encoder_spec.arch,
            "embedding_dim": self.encoder_spec.embedding_dim,
            "encoder_spec": self.encoder_spec.to_dict(),
            "encoder": self.encoder.state_dict(),
            "proxies": self.proxies.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "quality": self.quality.to_dict(),
            "queue": self.queue.state_dict(),
            "step": self.step,
            "epoch": self.epoch,
            "n_identities": self.n_identities,
            "identity_names": self.identity_names,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_checkpoint(cls, ckpt):
        config = config_mod.from_dict(ckpt["config"])
        state = cls(config, ckpt["n_identities"], ckpt.get("identity_names"))
        state.encoder.load_state_dict(ckpt["encoder"])
        state.proxies.load_state_dict(ckpt["proxies"])
        state.optimizer.load_state_dict(ckpt["optimizer"])
        state.quality = QualityState(**ckpt["quality"])
        if ckpt.get("queue") is not None:
            state.queue = ProxyQueue.from_state_dict(ckpt["queue"])
        state.step = int(ckpt["step"])
        state.epoch = int(ckpt["epoch"])
        return state


def save_checkpoint(state, path):
    torch.save(state.checkpoint(), path)


def load_checkpoint(path):
    return TrainState.from_checkpoint(torch.load(path, map_location="cpu", weights_only=False))


def _batch_stats(norms, state, extra=None):
    stats = {
        "step": state.step,
        "n_finite_norms": int(norms.numel()),
        "norm_min": float(norms.min()) if norms.numel() else float("nan"),
        "norm_max": float(norms.max()) if norms.numel() else float("nan"),
        "norm_mean": float(norms.mean()) if norms.numel() else float("nan"),
        "mu_z": state.quality.mu_z,
        "sigma_z": state.quality.sigma_z,
    }
    stats.update(extra or {})
    return stats


def train_step(images, labels, state, rng):
    """One optimisation step on a batch of uint8 images; mutates ``state``.

    Order: pair construction, embedding of both streams, statistics update,
    partition, classification loss, contrastive loss against the compensated
    queue, backward + SGD, then enqueue of this step's features.
    """
    cfg = state.config
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    B = len(labels)
    two_streams = cfg.augment.enabled
    originals, augmented = make_pair_batch(images, cfg.augment_config(), rng, augment=two_streams)
    batch = np.concatenate([originals, augmented]) if two_streams else originals

    state.encoder.train()
    emb = embed(batch, state.encoder)
    feats, norms = emb.features, emb.norms.detach()
    if not torch.isfinite(norms).all():
        raise NumericError("non-finite embeddings", _batch_stats(norms[torch.isfinite(norms)], state))

    state.quality = update_stats(norms, state.quality)
    z_hat = quality_indicator(norms, state.quality)
    z_unit = to_unit(z_hat)
    b = cfg.quality.b if cfg.quality.enabled else 0.0
    if two_streams:
        part = partition(z_unit[:B], z_unit[B:], b)
        class_mask, contra_mask = part.class_mask, part.contra_mask
        all_labels = torch.cat([labels, labels])
    else:
        class_mask = torch.ones(B, dtype=torch.bool) if b <= 0 else z_unit > b
        contra_mask = torch.zeros(B, dtype=torch.bool)
        all_labels = labels

    cls = classification_loss(feats, all_labels, state.proxies, z_hat, class_mask, step=state.step,
                              reduction=cfg.loss.reduction)

    use_contra = two_streams and cfg.contrastive.enabled and contra_mask.any() and state.queue.filled > 0
    if use_contra:
        con = contrastive_loss(feats[B:], feats[:B], labels, state.queue, contra_mask,
                               s=cfg.contrastive.s, proxies=state.proxies,
                               include_positive_in_denominator=cfg.contrastive.include_positive_in_denominator,
                               reduction=cfg.contrastive.reduction)
        contra_value, n_pairs, pos_sim, neg_sim = con.loss, con.num_pairs, con.mean_pos_sim, con.mean_neg_sim
    else:
        contra_value, n_pairs, pos_sim, neg_sim = torch.zeros((), dtype=feats.dtype), 0, math.nan, math.nan

    # summed in float64 so the logged total equals the logged terms' sum
    total = cls.loss.double() + contra_value.double()
    if not torch.isfinite(total):
        raise NumericError(
            f"non-finite loss at step {state.step}",
            _batch_stats(norms, state, {"class_loss": float(cls.loss.detach()), "contra_loss": float(contra_value.detach() if torch.is_tensor(contra_value) else contra_value),
                                        "frac_lq": float(contra_mask.float().mean())}))

    state.optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
    if two_streams and cfg.contrastive.enabled:
        # proxies are snapshotted before this step's update
        enqueue(state.queue, feats[B:].detach(), feats[:B].detach(), labels, state.proxies)
    if total.requires_grad:
        state.optimizer.step()

    metrics = StepMetrics(
        step=state.step,
        total_loss=float(total.detach()),
        class_loss=float(cls.loss.detach()),
        contra_loss=float(contra_value.detach() if torch.is_tensor(contra_value) else contra_value),
        frac_lq_pairs=float(contra_mask.float().mean()) if len(contra_mask) else 0.0,
        mu_z=state.quality.mu_z,
        sigma_z=state.quality.sigma_z,
        lr=state.lr,
        num_contra_pairs=n_pairs,
        mean_pos_sim=pos_sim,
        mean_neg_sim=neg_sim,
    )
    state.step += 1
    return state, metrics


def epoch_batches(n, batch_size, seed, epoch):
    """Shuffled index batches for one epoch; the short tail batch is dropped."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    n_full = n // batch_size if n >= batch_size else 1
    size = batch_size if n >= batch_size else n
    return [perm[i * size:(i + 1) * size] for i in range(n_full)]


class CsvLog:
    """Append-only CSV writer; values are written with ``repr`` so reruns are byte-identical."""

    def __init__(self, path, columns, resume_step=None):
        self.path = Path(path)
        self.columns = columns
        if resume_step is not None and self.path.exists():
            with open(self.path, newline="") as fh:
                rows = [r for r in csv.DictReader(fh) if int(r["step"]) < resume_step]
            self._write_rows(rows, mode="w")
        else:
            self._write_rows([], mode="w")

    def _write_rows(self, rows, mode):
        with open(self.path, mode, newline="") as fh:
            w = csv.writer(fh)
            if mode == "w":
                w.writerow(self.columns)
            for r in rows:
                w.writerow([r[c] for c in self.columns])

    def append(self, values):
        self._write_rows([{c: _fmt(values[c]) for c in self.columns}], mode="a")


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def configure_determinism(config):
    if config.deterministic:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def fit(config, train_index, out_dir=None, resume=None, images=None, callback=None):
    """Run the step-decay schedule over ``train_index``.

    Writes ``metrics.csv``, ``quality.csv``, ``contrastive.csv`` and
    ``checkpoint.pt`` (after every epoch) into ``out_dir`` when given.
    ``resume`` is a checkpoint path or TrainState to continue from.
    Returns the final TrainState.
    """
    configure_determinism(config)
    if images is None:
        images = train_index.load_images(size=config.image_size)
    labels = train_index.labels
    if len(images) != len(labels):
        raise ConfigurationError("images and labels differ in length")
    if isinstance(resume, (str, Path)):
        state = load_checkpoint(resume)
    elif resume is not None:
        state = resume
    else:
        state = TrainState(config, train_index.n_identities, train_index.identity_names)
    if state.n_identities != train_index.n_identities:
        raise ConfigurationError("checkpoint identity count does not match the dataset")

    logs = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        config_mod.save_config(config, out_dir / "config.yaml")
        resume_step = state.step if resume is not None else None
        logs = (CsvLog(out_dir / "metrics.csv", METRICS_COLUMNS, resume_step),
                CsvLog(out_dir / "quality.csv", QUALITY_COLUMNS, resume_step),
                CsvLog(out_dir / "contrastive.csv", CONTRASTIVE_COLUMNS, resume_step))
        if config.epochs == 0 or state.epoch >= config.epochs:
            save_checkpoint(state, out_dir / "checkpoint.pt")

    for epoch in range(state.epoch, config.epochs):
        state.set_lr(config.lr_at(epoch))
        for bi, idx in enumerate(epoch_batches(len(labels), config.batch_size, config.seed, epoch)):
            rng = np.random.default_rng([config.seed, epoch, bi, 1])
            state, m = train_step(images[idx], labels[idx], state, rng)
            if logs is not None:
                row = asdict(m)
                logs[0].append(row)
                logs[1].append({"step": m.step, "mu_z": m.mu_z, "sigma_z": m.sigma_z,
                                "frac_lq": m.frac_lq_pairs})
                logs[2].append({"step": m.step, "num_pairs": m.num_contra_pairs,
                                "mean_pos_sim": m.mean_pos_sim, "mean_neg_sim": m.mean_neg_sim})
            if callback is not None:
                callback(state, m)
        state.epoch = epoch + 1
        log.info("epoch %d done, step %d, lr %.4g", state.epoch, state.step, state.lr)
        if out_dir is not None:
            save_checkpoint(state, out_dir / "checkpoint.pt")
    return state
