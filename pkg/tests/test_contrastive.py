import math

import numpy as np
import pytest
import torch

from qgface.classification import ClassifierProxies
from qgface.contrastive import ProxyQueue, compensate, contrastive_loss, enqueue, scm_mask
from qgface.errors import ConfigurationError, InvalidInputError


def make_proxies(d, n, seed=0):
    return ClassifierProxies(d, n, generator=torch.Generator().manual_seed(seed)).double()


def test_enqueue_counts_and_fifo():
    p = make_proxies(4, 10)
    q = ProxyQueue(10, 4, dtype=torch.float64)
    enqueue(q, torch.randn(3, 4), torch.randn(3, 4), [1, 2, 3], p)
    assert q.filled == 6 and q.cursor == 6
    fq, fk = torch.randn(3, 4, dtype=torch.float64), torch.randn(3, 4, dtype=torch.float64)
    enqueue(q, fq, fk, [4, 5, 6], p)
    assert q.filled == 10 and q.cursor == 2
    # the two newest rows wrapped into slots 0 and 1
    assert torch.equal(q.features[0], fk[1]) and torch.equal(q.features[1], fk[2])
    assert q.labels[:2].tolist() == [5, 6]


def test_enqueue_keeps_label_proxy_correspondence():
    p = make_proxies(4, 5)
    q = ProxyQueue(8, 4, dtype=torch.float64)
    enqueue(q, torch.randn(2, 4), torch.randn(2, 4), [3, 1], p)
    for slot in range(q.filled):
        assert torch.equal(q.proxy_snapshots[slot], p.W.detach()[:, q.labels[slot]])


def test_enqueue_rejects_bad_labels():
    p = make_proxies(4, 5)
    q = ProxyQueue(8, 4)
    with pytest.raises(InvalidInputError):
        enqueue(q, torch.randn(1, 4), torch.randn(1, 4), [5], p)


def test_enqueue_detaches():
    p = make_proxies(4, 5)
    q = ProxyQueue(8, 4, dtype=torch.float64)
    f = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
    enqueue(q, f * 2, f * 3, [0, 1], p)
    assert not q.features.requires_grad and not q.proxy_snapshots.requires_grad


def test_compensation_identity_when_proxies_frozen():
    p = make_proxies(4, 5)
    q = ProxyQueue(8, 4, dtype=torch.float64)
    enqueue(q, torch.randn(3, 4), torch.randn(3, 4), [0, 2, 4], p)
    assert torch.equal(compensate(q, p), q.features[: q.filled])


def test_compensation_arithmetic():
    p = make_proxies(2, 1)
    with torch.no_grad():
        p.W.copy_(torch.tensor([[0.5], [0.0]], dtype=torch.float64))
    q = ProxyQueue(2, 2, dtype=torch.float64)
    q.push(torch.tensor([[1.0, 0.0]]), [0], p.W.detach().T)
    with torch.no_grad():
        p.W.copy_(torch.tensor([[0.7], [0.1]], dtype=torch.float64))
    out = compensate(q, p)
    assert out[0].tolist() == pytest.approx([1.2, 0.1])
    assert q.features[0].tolist() == [1.0, 0.0]


def test_compensation_shift_moves_only_matching_slots():
    p = make_proxies(4, 5)
    q = ProxyQueue(10, 4, dtype=torch.float64)
    enqueue(q, torch.randn(5, 4), torch.randn(5, 4), [0, 1, 2, 1, 3], p)
    delta = torch.tensor([0.5, -1.0, 0.25, 2.0], dtype=torch.float64)
    with torch.no_grad():
        p.W[:, 1] += delta
    out = compensate(q, p)
    stored = q.features[: q.filled]
    hit = q.labels[: q.filled] == 1
    assert torch.equal(out[~hit], stored[~hit])
    assert torch.allclose(out[hit] - stored[hit], delta.expand(int(hit.sum()), 4), atol=1e-15)


def test_compensate_empty_queue():
    assert compensate(ProxyQueue(4, 3), make_proxies(3, 2)).shape == (0, 3)


def test_scm_mask():
    assert scm_mask([2, 2, 2], 2).tolist() == [False] * 3
    assert scm_mask([0, 1, 3], 2).tolist() == [True] * 3
    assert scm_mask([0, 2, 1, 2, -1], 2).tolist() == [True, False, True, False, False]


def test_empty_contra_mask_gives_zero():
    q = ProxyQueue(4, 3)
    out = contrastive_loss(torch.randn(2, 3), torch.randn(2, 3), [0, 1], q, torch.zeros(2, dtype=torch.bool))
    assert float(out.loss.detach()) == 0.0 and out.num_pairs == 0


def test_empty_queue_with_pairs_is_configuration_error():
    q = ProxyQueue(4, 3)
    with pytest.raises(ConfigurationError):
        contrastive_loss(torch.randn(2, 3), torch.randn(2, 3), [0, 1], q, torch.ones(2, dtype=torch.bool))


def _unit(angle):
    return [math.cos(angle), math.sin(angle)]


def test_scalar_hand_value():
    # pos cos 0.8, one negative with cos 0.2, s = 2 -> -(1.6 - 0.4)
    q_vec = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    k_vec = torch.tensor([_unit(math.acos(0.8))], dtype=torch.float64)
    queue = ProxyQueue(1, 2, dtype=torch.float64)
    queue.push(torch.tensor([_unit(math.acos(0.2))], dtype=torch.float64), [1], torch.zeros(1, 2))
    out = contrastive_loss(q_vec, k_vec, [0], queue, torch.ones(1, dtype=torch.bool), s=2.0)
    assert float(out.loss.detach()) == pytest.approx(-1.2, abs=1e-12)
    assert out.mean_pos_sim == pytest.approx(0.8) and out.mean_neg_sim == pytest.approx(0.2)


def brute_force_loss(h_q, h_k, labels, feats, qlabels, mask, s, include_pos=False):
    total, count = 0.0, 0
    for p in range(len(h_q)):
        if not mask[p]:
            continue
        q = h_q[p] / np.linalg.norm(h_q[p])
        pos = q @ (h_k[p] / np.linalg.norm(h_k[p]))
        terms = [math.exp(s * pos)] if include_pos else []
        for j in range(len(feats)):
            if qlabels[j] != labels[p]:
                terms.append(math.exp(s * (q @ (feats[j] / np.linalg.norm(feats[j])))))
        if not terms:
            continue
        total += -math.log(math.exp(s * pos) / sum(terms))
        count += 1
    return total / count


@pytest.mark.parametrize("include_pos", [False, True])
def test_matches_brute_force(include_pos):
    rng = np.random.default_rng(5)
    B, Q, d, n = 4, 16, 6, 7
    p = make_proxies(d, n, seed=2)
    queue = ProxyQueue(Q, d, dtype=torch.float64)
    enqueue(queue, torch.tensor(rng.normal(size=(8, d))), torch.tensor(rng.normal(size=(8, d))),
            rng.integers(0, n, size=8), p)
    with torch.no_grad():
        p.W += torch.tensor(rng.normal(scale=0.3, size=(d, n)))
    h_q, h_k = rng.normal(size=(B, d)), rng.normal(size=(B, d))
    labels = rng.integers(0, n, size=B)
    mask = np.array([True, False, True, True])
    out = contrastive_loss(torch.tensor(h_q), torch.tensor(h_k), labels, queue, torch.tensor(mask),
                           s=4.0, proxies=p, include_positive_in_denominator=include_pos)
    comp = compensate(queue, p).numpy()
    want = brute_force_loss(h_q, h_k, labels, comp, queue.labels.numpy(), mask, 4.0, include_pos)
    assert float(out.loss.detach()) == pytest.approx(want, abs=1e-6)


def test_key_branch_is_stop_gradient():
    rng = np.random.default_rng(6)
    queue = ProxyQueue(8, 5, dtype=torch.float64)
    queue.push(torch.tensor(rng.normal(size=(8, 5))), rng.integers(0, 4, size=8), torch.zeros(8, 5))
    h_q = torch.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    h_k = torch.tensor(rng.normal(size=(3, 5)), requires_grad=True)
    out = contrastive_loss(h_q, h_k, [0, 1, 2], queue, torch.ones(3, dtype=torch.bool), s=3.0)
    out.loss.backward()
    assert h_k.grad is None or torch.count_nonzero(h_k.grad) == 0
    assert torch.count_nonzero(h_q.grad) > 0


def test_anchor_without_negatives_is_skipped():
    queue = ProxyQueue(2, 2, dtype=torch.float64)
    queue.push(torch.tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 0], torch.zeros(2, 2))
    out = contrastive_loss(torch.randn(2, 2, dtype=torch.float64), torch.randn(2, 2, dtype=torch.float64),
                           [0, 1], queue, torch.ones(2, dtype=torch.bool), s=1.0)
    assert out.num_pairs == 1


def test_loss_decreases_with_positive_similarity():
    queue = ProxyQueue(3, 2, dtype=torch.float64)
    queue.push(torch.tensor([_unit(1.0), _unit(2.0), _unit(-1.5)]), [1, 2, 3], torch.zeros(3, 2))
    q = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    losses = []
    for ang in np.linspace(math.pi, 0, 12):
        k = torch.tensor([_unit(ang)], dtype=torch.float64)
        losses.append(float(contrastive_loss(q, k, [0], queue, torch.ones(1, dtype=torch.bool), s=5.0).loss))
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_state_dict_roundtrip():
    p = make_proxies(3, 4)
    q = ProxyQueue(5, 3, dtype=torch.float64)
    enqueue(q, torch.randn(3, 3), torch.randn(3, 3), [0, 1, 3], p)
    q2 = ProxyQueue.from_state_dict(q.state_dict())
    assert torch.equal(q2.features, q.features) and q2.cursor == q.cursor and q2.filled == q.filled
