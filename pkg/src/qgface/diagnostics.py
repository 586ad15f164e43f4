"""Diagnostic curves for a trained model, written as CSV and rendered as PNG.

Every plot is produced from a CSV on disk, so the numbers stay checkable
without matplotlib.  Files written by :func:`diagnose`:

``gst_vs_quality.csv``   z_lo, z_hi, count, mean_gst, mean_abs_gst
``quality_hist.csv``     z_lo, z_hi, original, augmented
``queue_trace.csv``      step, num_pairs, mean_pos_sim, mean_neg_sim, pos_minus_neg
``gap_hist.csv``         tier, sim_lo, sim_hi, matched, best_unmatched
``gap_summary.csv``      tier, n_probes, mean_matched, mean_best_unmatched, gap
"""

import copy
import csv
import math
from pathlib import Path

import numpy as np
import torch

from .augment import make_pair_batch
from .classification import classification_loss
from .encoder import embed_images
from .evaluation import similarity_gap
from .quality import quality_indicator

GST_COLUMNS = ["z_lo", "z_hi", "count", "mean_gst", "mean_abs_gst"]
QHIST_COLUMNS = ["z_lo", "z_hi", "original", "augmented"]
TRACE_COLUMNS = ["step", "num_pairs", "mean_pos_sim", "mean_neg_sim", "pos_minus_neg"]
GAP_HIST_COLUMNS = ["tier", "sim_lo", "sim_hi", "matched", "best_unmatched"]
GAP_SUMMARY_COLUMNS = ["tier", "n_probes", "mean_matched", "mean_best_unmatched", "gap"]


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def write_rows(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([_cell(row[c]) for c in columns])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _z_hat(state, features):
    norms = torch.as_tensor(np.linalg.norm(features, axis=1))
    return quality_indicator(norms, state.quality)


def gst_vs_quality(state, images, labels, bins=20):
    """Mean gradient scaling term per quality-indicator bin (eval-mode embeddings)."""
    feats = torch.as_tensor(embed_images(state.encoder, images))
    z_hat = _z_hat(state, feats.numpy())
    proxies = copy.deepcopy(state.proxies).double()
    labels = torch.as_tensor(np.asarray(labels), dtype=torch.long)
    with torch.no_grad():
        out = classification_loss(feats, labels, proxies, z_hat.double(),
                                  torch.ones(len(labels), dtype=torch.bool))
    g = out.gst.numpy()
    z = z_hat.numpy()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    which = np.clip(np.searchsorted(edges, z, side="right") - 1, 0, bins - 1)
    rows = []
    for i in range(bins):
        sel = g[which == i]
        rows.append({"z_lo": edges[i], "z_hi": edges[i + 1], "count": int(sel.size),
                     "mean_gst": float(sel.mean()) if sel.size else math.nan,
                     "mean_abs_gst": float(np.abs(sel).mean()) if sel.size else math.nan})
    return rows


def quality_histogram(state, images, rng, bins=20):
    """Histogram of the quality indicator for the original and augmented streams."""
    originals, augmented = make_pair_batch(images, state.config.augment_config(), rng)
    z_o = _z_hat(state, embed_images(state.encoder, originals)).numpy()
    z_a = _z_hat(state, embed_images(state.encoder, augmented)).numpy()
    edges = np.linspace(-1.0, 1.0, bins + 1)
    h_o, _ = np.histogram(z_o, edges)
    h_a, _ = np.histogram(z_a, edges)
    return [{"z_lo": edges[i], "z_hi": edges[i + 1], "original": int(h_o[i]), "augmented": int(h_a[i])}
            for i in range(bins)]


def queue_trace(contrastive_csv):
    """Positive/negative similarity trace of the contrastive branch, steps with pairs only."""
    rows = []
    for r in read_rows(contrastive_csv):
        if int(r["num_pairs"]) == 0:
            continue
        pos, neg = float(r["mean_pos_sim"]), float(r["mean_neg_sim"])
        rows.append({"step": int(r["step"]), "num_pairs": int(r["num_pairs"]),
                     "mean_pos_sim": pos, "mean_neg_sim": neg, "pos_minus_neg": pos - neg})
    return rows


def gap_histograms(embeddings, manifest, bins=40):
    """Per-tier histograms of matched and best-unmatched similarities, plus summaries."""
    emb = np.asarray(embeddings)
    g_idx = np.array([i for i, _ in manifest.gallery])
    g_lab = np.array([y for _, y in manifest.gallery])
    edges = np.linspace(-1.0, 1.0, bins + 1)
    hist, summary = [], []
    for tier in manifest.tiers:
        probes = manifest.probes_in(tier)
        p_idx = np.array([i for i, _ in probes])
        p_lab = np.array([y for _, y in probes])
        res = similarity_gap(emb[g_idx], g_lab, emb[p_idx], p_lab)
        h_m, _ = np.histogram(np.clip(res.matched, -1, 1), edges)
        h_u, _ = np.histogram(np.clip(res.best_unmatched, -1, 1), edges)
        hist += [{"tier": tier, "sim_lo": edges[i], "sim_hi": edges[i + 1],
                  "matched": int(h_m[i]), "best_unmatched": int(h_u[i])} for i in range(bins)]
        summary.append({"tier": tier, "n_probes": len(probes), "mean_matched": res.mean_matched,
                        "mean_best_unmatched": res.mean_best_unmatched, "gap": res.summary})
    return hist, summary


def render_plots(out_dir):
    """Render a PNG next to every diagnostic CSV present in ``out_dir``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    written = []

    def save(fig, name):
        fig.tight_layout()
        fig.savefig(out_dir / name, dpi=100)
        plt.close(fig)
        written.append(out_dir / name)

    def centers(rows, lo, hi):
        return [(float(r[lo]) + float(r[hi])) / 2 for r in rows]

    if (out_dir / "gst_vs_quality.csv").exists():
        rows = read_rows(out_dir / "gst_vs_quality.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(centers(rows, "z_lo", "z_hi"), [float(r["mean_abs_gst"]) for r in rows], "o-")
        ax.set_xlabel("quality indicator")
        ax.set_ylabel("mean |GST|")
        save(fig, "gst_vs_quality.png")

    if (out_dir / "quality_hist.csv").exists():
        rows = read_rows(out_dir / "quality_hist.csv")
        x = centers(rows, "z_lo", "z_hi")
        width = float(rows[0]["z_hi"]) - float(rows[0]["z_lo"])
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for col in ("original", "augmented"):
            ax.bar(x, [int(r[col]) for r in rows], width=width, alpha=0.5, label=col)
        ax.set_xlabel("quality indicator")
        ax.legend()
        save(fig, "quality_hist.png")

    if (out_dir / "queue_trace.csv").exists():
        rows = read_rows(out_dir / "queue_trace.csv")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        if rows:
            steps = [int(r["step"]) for r in rows]
            for col in ("mean_pos_sim", "mean_neg_sim", "pos_minus_neg"):
                ax.plot(steps, [float(r[col]) for r in rows], ".", ms=3, label=col)
            ax.legend()
        ax.set_xlabel("step")
        save(fig, "queue_trace.png")

    if (out_dir / "gap_hist.csv").exists():
        rows = read_rows(out_dir / "gap_hist.csv")
        tiers = list(dict.fromkeys(r["tier"] for r in rows))
        fig, axes = plt.subplots(1, len(tiers), figsize=(3.2 * len(tiers), 3), squeeze=False)
        for ax, tier in zip(axes[0], tiers):
            sub = [r for r in rows if r["tier"] == tier]
            x = centers(sub, "sim_lo", "sim_hi")
            width = float(sub[0]["sim_hi"]) - float(sub[0]["sim_lo"])
            for col in ("matched", "best_unmatched"):
                ax.bar(x, [int(r[col]) for r in sub], width=width, alpha=0.5, label=col)
            ax.set_title(tier)
            ax.set_xlabel("cosine")
        axes[0][0].legend(fontsize=7)
        save(fig, "gap_hist.png")
    return written


def diagnose(state, out_dir, train_images=None, train_labels=None, manifest=None, run_dir=None,
             seed=0, plots=True):
    """Write every diagnostic the inputs allow; returns the list of files written."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if train_images is not None:
        write_rows(out_dir / "gst_vs_quality.csv", GST_COLUMNS,
                   gst_vs_quality(state, train_images, train_labels))
        write_rows(out_dir / "quality_hist.csv", QHIST_COLUMNS,
                   quality_histogram(state, train_images, np.random.default_rng(seed)))
        written += [out_dir / "gst_vs_quality.csv", out_dir / "quality_hist.csv"]
    if run_dir is not None and (Path(run_dir) / "contrastive.csv").exists():
        write_rows(out_dir / "queue_trace.csv", TRACE_COLUMNS, queue_trace(Path(run_dir) / "contrastive.csv"))
        written.append(out_dir / "queue_trace.csv")
    if manifest is not None:
        emb = embed_images(state.encoder, manifest.load_images(size=state.config.image_size))
        hist, summary = gap_histograms(emb, manifest)
        write_rows(out_dir / "gap_hist.csv", GAP_HIST_COLUMNS, hist)
        write_rows(out_dir / "gap_summary.csv", GAP_SUMMARY_COLUMNS, summary)
        written += [out_dir / "gap_hist.csv", out_dir / "gap_summary.csv"]
    if plots:
        written += render_plots(out_dir)
    return written
