import math

import numpy as np
import pytest
import torch

from qgface.classification import (
    ClassifierProxies,
    adaface_logits,
    adaface_margins,
    classification_loss,
    gst,
    margin_target,
)
from qgface.errors import InvalidInputError


def proxies_from(W, s=64.0, m=0.4):
    p = ClassifierProxies(W.shape[0], W.shape[1], s=s, m=m).double()
    with torch.no_grad():
        p.W.copy_(torch.as_tensor(W, dtype=torch.float64))
    return p


@pytest.mark.parametrize("z,expected", [(0.0, (0.0, 0.4)), (-1.0, (0.4, 0.0)), (1.0, (-0.4, 0.8))])
def test_margins(z, expected):
    ga, gadd = adaface_margins(torch.tensor(z), 0.4)
    assert (float(ga), float(gadd)) == pytest.approx(expected)


def test_reduces_to_cosface_and_arcface():
    rng = np.random.default_rng(0)
    theta = torch.tensor(rng.uniform(0, math.pi, 2000))
    m = torch.tensor(rng.uniform(0.0, 1.0, 2000))
    cos = torch.cos(theta)
    ga, gadd = adaface_margins(torch.zeros_like(m), m)
    assert torch.allclose(margin_target(cos, ga, gadd), cos - m, atol=1e-6, rtol=0)
    ga, gadd = adaface_margins(-torch.ones_like(m), m)
    assert torch.allclose(margin_target(cos, ga, gadd), torch.cos(theta + m), atol=1e-6, rtol=0)


def test_logits_match_arccos_oracle():
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(7, 5))
    W = rng.normal(size=(5, 3))
    labels = rng.integers(0, 3, size=7)
    z_hat = rng.uniform(-1, 1, size=7)
    p = proxies_from(W)
    got = adaface_logits(torch.tensor(feats), labels, p, torch.tensor(z_hat)).detach().numpy()
    for i in range(7):
        for j in range(3):
            c = feats[i] @ W[:, j] / np.linalg.norm(feats[i]) / np.linalg.norm(W[:, j])
            theta = math.acos(c)
            if j == labels[i]:
                ga, gadd = -0.4 * z_hat[i], 0.4 * z_hat[i] + 0.4
                want = math.cos(theta + ga) - gadd
            else:
                want = c
            assert got[i, j] == pytest.approx(want, abs=1e-6)


def test_zero_feature_rejected():
    p = proxies_from(np.eye(3))
    with pytest.raises(InvalidInputError):
        adaface_logits(torch.zeros(1, 3, dtype=torch.float64), [0], p, torch.zeros(1))


def test_label_out_of_range():
    p = proxies_from(np.eye(3))
    with pytest.raises(InvalidInputError):
        adaface_logits(torch.ones(1, 3, dtype=torch.float64), [3], p, torch.zeros(1))


def test_empty_mask_gives_zero_loss_without_gradient():
    p = proxies_from(np.eye(3))
    f = torch.randn(4, 3, dtype=torch.float64, requires_grad=True)
    out = classification_loss(f, [0, 1, 2, 0], p, torch.zeros(4), torch.zeros(4, dtype=torch.bool))
    assert float(out.loss.detach()) == 0.0
    assert not out.loss.requires_grad
    assert torch.isnan(out.p_target).all()


def test_aligned_sample_hand_value():
    # feature on proxy 0 (theta = 0); proxy 1 at 60 degrees
    W = np.array([[1.0, 0.5], [0.0, math.sqrt(3) / 2]])
    p = proxies_from(W, s=64.0, m=0.4)
    out = classification_loss(torch.tensor([[2.0, 0.0]], dtype=torch.float64), [0], p,
                              torch.zeros(1), torch.ones(1, dtype=torch.bool))
    cos2 = 0.5
    want = -math.log(math.exp(64 * 0.6) / (math.exp(64 * 0.6) + math.exp(64 * cos2)))
    assert float(out.loss.detach()) == pytest.approx(want, rel=1e-9, abs=1e-12)


def test_orthogonal_uniform_case_is_log_n():
    # a feature orthogonal to every proxy, no margin: all logits 0 -> log n
    n = 5
    W = np.zeros((n + 1, n))
    W[:n, :n] = np.eye(n)
    feat = np.zeros((1, n + 1))
    feat[0, n] = 1.0
    p = proxies_from(W, m=0.0)
    out = classification_loss(torch.tensor(feat), [2], p, torch.zeros(1), torch.ones(1, dtype=torch.bool))
    logits = np.zeros(n)
    brute = -logits[2] + math.log(np.exp(logits).sum())
    assert float(out.loss.detach()) == pytest.approx(brute, abs=1e-9)
    assert brute == pytest.approx(math.log(n))


def test_softmax_rows_and_p_target():
    rng = np.random.default_rng(2)
    p = proxies_from(rng.normal(size=(6, 4)), s=8.0)
    f = torch.tensor(rng.normal(size=(5, 6)))
    out = classification_loss(f, [0, 1, 2, 3, 0], p, torch.zeros(5), torch.ones(5, dtype=torch.bool))
    probs = torch.softmax(out.logits, dim=1)
    assert torch.allclose(probs.sum(1), torch.ones(5, dtype=torch.float64), atol=1e-5)
    assert ((out.p_target > 0) & (out.p_target < 1)).all()


def test_masked_out_samples_get_zero_gradient():
    rng = np.random.default_rng(3)
    p = proxies_from(rng.normal(size=(6, 4)), s=16.0)
    f = torch.tensor(rng.normal(size=(6, 6)), requires_grad=True)
    mask = torch.tensor([True, False, True, False, False, True])
    out = classification_loss(f, [0, 1, 2, 3, 0, 1], p, torch.zeros(6), mask)
    out.loss.backward()
    assert torch.count_nonzero(f.grad[~mask]) == 0
    assert (f.grad[mask].abs().sum(1) > 0).all()


def test_loss_monotone_in_target_logit():
    logits = torch.tensor([[0.3, 0.1, -0.2]], dtype=torch.float64)
    prev = math.inf
    for t in np.linspace(-1, 1, 21):
        logits[0, 0] = t
        loss = float(torch.nn.functional.cross_entropy(64 * logits, torch.tensor([0])))
        assert loss <= prev
        prev = loss


def test_gst_reductions():
    p = torch.tensor([0.3, 0.7])
    assert torch.allclose(gst(p, torch.tensor([0.2, 0.5]), torch.zeros(2)), (p - 1).double())
    g = gst(torch.tensor([1.0 - 1e-12]), torch.tensor([0.3]), torch.tensor([0.2]))
    assert abs(float(g)) < 1e-9


def test_gst_degenerate_sine_flag():
    g, flags = gst(torch.tensor([0.4]), torch.tensor([1.0]), torch.tensor([0.3]), return_flags=True)
    assert flags.all()
    assert float(g) == pytest.approx(-0.6)


def _per_sample_loss(cos_target, cos_others, g_angle, g_add, s):
    sin_t = math.sqrt(max(0.0, 1 - cos_target**2))
    f = cos_target * math.cos(g_angle) - sin_t * math.sin(g_angle) - g_add
    logits = np.concatenate([[s * f], s * np.asarray(cos_others)])
    mx = logits.max()
    return -(logits[0] - mx - math.log(np.exp(logits - mx).sum()))


def test_gst_matches_finite_differences():
    rng = np.random.default_rng(4)
    s, m, h = 64.0, 0.4, 1e-6
    worst = 0.0
    for _ in range(200):
        cos_t = rng.uniform(-0.95, 0.95)
        others = rng.uniform(-1, 1, size=9)
        z = rng.uniform(-1, 1)
        ga, gadd = -m * z, m * z + m
        sin_t = math.sqrt(1 - cos_t**2)
        f = cos_t * math.cos(ga) - sin_t * math.sin(ga) - gadd
        logits = np.concatenate([[s * f], s * others])
        P = math.exp(logits[0] - logits.max()) / np.exp(logits - logits.max()).sum()
        fd = (_per_sample_loss(cos_t + h, others, ga, gadd, s)
              - _per_sample_loss(cos_t - h, others, ga, gadd, s)) / (2 * h)
        g = float(gst(torch.tensor(P), torch.tensor(cos_t), torch.tensor(ga)))
        worst = max(worst, abs(g - fd / s))
    assert worst <= 1e-4
