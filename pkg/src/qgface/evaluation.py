"""Verification and closed-set identification metrics on cosine similarity."""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ProtocolError


def l2_normalize(x, eps=1e-12):
    x = np.asarray(x, dtype=np.float64)
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), eps)


def pair_scores(embeddings, pairs):
    emb = l2_normalize(embeddings)
    a = np.array([p[0] for p in pairs], dtype=np.int64)
    b = np.array([p[1] for p in pairs], dtype=np.int64)
    if len(a) and (max(a.max(), b.max()) >= len(emb) or min(a.min(), b.min()) < 0):
        raise InvalidInputError("pair index out of range")
    same = np.array([bool(p[2]) for p in pairs])
    return np.einsum("ij,ij->i", emb[a], emb[b]), same


def best_threshold(scores, same):
    """Threshold maximising accuracy of the rule ``score >= t``.

    Candidates are the distinct scores plus +inf (reject everything); ties go
    to the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    cand = np.append(np.unique(scores), np.inf)
    pos_sorted = np.sort(scores[same])
    neg_sorted = np.sort(scores[~same])
    tp = len(pos_sorted) - np.searchsorted(pos_sorted, cand, side="left")
    fp = len(neg_sorted) - np.searchsorted(neg_sorted, cand, side="left")
    correct = tp + (len(neg_sorted) - fp)
    best = int(np.argmax(correct))
    return float(cand[best]), correct[best] / len(scores)


def verification_accuracy_from_scores(scores, same, folds=10):
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    if folds < 1 or len(scores) < folds:
        raise InvalidInputError(f"need at least {folds} pairs for {folds}-fold evaluation, got {len(scores)}")
    if folds == 1:
        return best_threshold(scores, same)[1]
    accs = []
    for test in np.array_split(np.arange(len(scores)), folds):
        train = np.setdiff1d(np.arange(len(scores)), test)
        t, _ = best_threshold(scores[train], same[train])
        accs.append(int(np.sum((scores[test] >= t) == same[test])) / len(test))
    return sum(accs) / len(accs)


def verification_accuracy(embeddings, pairs, folds=10):
    """k-fold best-threshold accuracy; folds are contiguous in pair order."""
    scores, same = pair_scores(embeddings, pairs)
    return verification_accuracy_from_scores(scores, same, folds)


def tar_at_far(scores, same, far):
    """True acceptance rate at the smallest threshold whose FAR is <= ``far``."""
    if not 0.0 < far <= 1.0:
        raise InvalidInputError(f"far must lie in (0, 1], got {far}")
    scores = np.asarray(scores, dtype=np.float64)
    same = np.asarray(same, dtype=bool)
    impostor = np.sort(scores[~same])
    genuine = scores[same]
    if len(impostor) == 0:
        raise InvalidInputError("tar_at_far needs at least one impostor score")
    if len(genuine) == 0:
        raise InvalidInputError("tar_at_far needs at least one genuine score")
    cand = np.append(np.unique(scores), np.inf)
    accepted = len(impostor) - np.searchsorted(impostor, cand, side="left")
    ok = accepted / len(impostor) <= far
    threshold = cand[np.argmax(ok)]  # cand ascending, +inf always ok
    return float(np.mean(genuine >= threshold))


def _similarities(gallery_emb, probe_emb):
    return l2_normalize(probe_emb) @ l2_normalize(gallery_emb).T


def rank_k_identification(gallery_emb, gallery_labels, probe_emb, probe_labels, k=1):
    """Fraction of probes with a same-identity gallery entry among their k nearest.

    Ties in similarity are broken by gallery index.
    """
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    missing = set(probe_labels.tolist()) - set(gallery_labels.tolist())
    if missing:
        raise ProtocolError(f"open-set probes: identities {sorted(missing)[:10]} not in gallery")
    sims = _similarities(gallery_emb, probe_emb)
    top = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    hit = (gallery_labels[top] == probe_labels[:, None]).any(axis=1)
    return float(hit.mean())


@dataclass
class GapResult:
    matched: np.ndarray
    best_unmatched: np.ndarray

    @property
    def mean_matched(self):
        return float(self.matched.mean())

    @property
    def mean_best_unmatched(self):
        return float(self.best_unmatched.mean())

    @property
    def summary(self):
        return self.mean_matched - self.mean_best_unmatched

    def write_csv(self, path, probe_labels=None):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["probe", "identity", "matched_sim", "best_unmatched_sim"])
            for i, (m, u) in enumerate(zip(self.matched, self.best_unmatched)):
                ident = "" if probe_labels is None else int(probe_labels[i])
                w.writerow([i, ident, repr(float(m)), repr(float(u))])


def similarity_gap(gallery_emb, gallery_labels, probe_emb, probe_labels):
    """Per-probe best matched and best unmatched gallery similarity.

    With several gallery images of the probe's identity the highest matched
    similarity is used.
    """
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    sims = _similarities(gallery_emb, probe_emb)
    same = gallery_labels[None, :] == probe_labels[:, None]
    if not same.any(axis=1).all():
        raise ProtocolError("a probe identity has no gallery entry")
    if same.all(axis=1).any():
        raise ProtocolError("a probe has no unmatched gallery entry; best unmatched similarity is undefined")
    matched = np.where(same, sims, -np.inf).max(axis=1)
    unmatched = np.where(same, -np.inf, sims).max(axis=1)
    return GapResult(matched=matched, best_unmatched=unmatched)


def identification_by_tier(embeddings, manifest, k=1):
    """Rank-k accuracy and similarity gap for each probe tier of ``manifest``."""
    emb = np.asarray(embeddings)
    g_idx = np.array([i for i, _ in manifest.gallery])
    g_lab = np.array([y for _, y in manifest.gallery])
    report = {}
    for tier in manifest.tiers:
        probes = manifest.probes_in(tier)
        p_idx = np.array([i for i, _ in probes])
        p_lab = np.array([y for _, y in probes])
        gap = similarity_gap(emb[g_idx], g_lab, emb[p_idx], p_lab)
        report[tier] = {
            "rank_k": rank_k_identification(emb[g_idx], g_lab, emb[p_idx], p_lab, k),
            "mean_matched": gap.mean_matched,
            "mean_best_unmatched": gap.mean_best_unmatched,
            "gap": gap.summary,
            "n_probes": len(probes),
        }
    return report
