import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ecl import losses as L
from ecl.expertnet import ExpertOutputs
from ecl.ltdata import ClassPrior

SKEW = ClassPrior([0.9, 0.1], [0.5, 0.5], 1.0)


def _bernoulli_sym_kl(a, b):
    # KL(Bern(a)||Bern(b)) + KL(Bern(b)||Bern(a)) by the textbook formula
    kl_ab = a * math.log(a / b) + (1 - a) * math.log((1 - a) / (1 - b))
    kl_ba = b * math.log(b / a) + (1 - b) * math.log((1 - b) / (1 - a))
    return kl_ab + kl_ba


# --- cross-entropy ----------------------------------------------------------


@pytest.mark.parametrize("c", [2, 3, 7, 100])
def test_ce_uniform_is_log_c(c):
    assert L.ce_loss(np.zeros(c), c - 1) == pytest.approx(math.log(c), abs=1e-12)


def test_ce_extreme_logits():
    assert L.ce_loss([10.0, -10.0], 0) == pytest.approx(math.log1p(math.exp(-20)), rel=1e-9)
    assert L.ce_loss([10.0, -10.0], 0) == pytest.approx(2.061153618190204e-09, rel=1e-9)


def test_ce_matches_closed_form():
    rng = np.random.default_rng(0)
    z = rng.normal(size=6)
    y = 4
    expected = math.log(1 + sum(math.exp(z[j] - z[y]) for j in range(6) if j != y))
    assert L.ce_loss(z, y) == pytest.approx(expected, abs=1e-12)


def test_ce_rejects_bad_label():
    with pytest.raises(ValueError):
        L.ce_loss([0.0, 0.0], 2)
    with pytest.raises(ValueError):
        L.ce_loss([0.0, 0.0], -1)


# --- balanced CE and post-hoc adjustment ----------------------------------


def test_bc_worked_example():
    # adjusted logits [log 1.8, log 0.2] -> softmax puts 0.1 on class 1
    assert L.bc_loss([0.0, 0.0], 1, SKEW) == pytest.approx(-math.log(0.1), abs=1e-6)
    assert L.bc_loss([0.0, 0.0], 1, SKEW) == pytest.approx(2.302585, abs=1e-6)


def test_bc_equals_ce_without_gap():
    rng = np.random.default_rng(1)
    z = rng.normal(size=(8, 5))
    y = rng.integers(0, 5, 8)
    same = ClassPrior.balanced(5, tau_bc=3.0)
    assert L.bc_loss(z, y, same) == L.ce_loss(z, y)
    zero_tau = ClassPrior(SKEW.p_source, SKEW.p_target, 0.0)
    assert L.bc_loss([0.3, -1.0], 0, zero_tau) == L.ce_loss([0.3, -1.0], 0)


def test_bc_definitional_identity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        c = int(rng.integers(2, 8))
        p = rng.dirichlet(np.ones(c))
        prior = ClassPrior(p, np.full(c, 1 / c), float(rng.uniform(0, 2)))
        z = rng.normal(size=c)
        y = int(rng.integers(c))
        shifted = z + prior.tau_bc * (np.log(prior.p_source) - np.log(prior.p_target))
        assert L.bc_loss(z, y, prior) == L.ce_loss(shifted, y)


def test_bc_rejects_nonpositive_prior():
    with pytest.raises(ValueError):
        L.bc_loss([0.0, 0.0], 0, ([1.0, 0.0], [0.5, 0.5], 1.0))


def test_posthoc_examples():
    np.testing.assert_allclose(L.posthoc_adjust([0.0, 0.0], SKEW, 1.0), [0.1, 0.9], atol=1e-12)
    z = np.array([0.4, -2.0, 1.0])
    np.testing.assert_allclose(
        L.posthoc_adjust(z, ClassPrior([0.5, 0.3, 0.2], [1 / 3] * 3), 0.0), L.softmax(z)
    )
    np.testing.assert_allclose(
        L.posthoc_adjust(z, ClassPrior.balanced(3), 5.0), L.softmax(z), atol=1e-15
    )


def test_posthoc_undoes_training_shift():
    rng = np.random.default_rng(3)
    for _ in range(50):
        c = int(rng.integers(2, 10))
        prior = ClassPrior(rng.dirichlet(np.ones(c)), rng.dirichlet(np.ones(c)))
        tau = float(rng.uniform(0, 3))
        z = rng.normal(size=c) * 3
        shifted = z + tau * prior.log_gap
        probs = L.posthoc_adjust(shifted, prior, tau)
        assert probs.sum() == pytest.approx(1.0, abs=1e-9)
        assert probs.argmax() == L.softmax(z).argmax()


# --- BKT ----------------------------------------------------------------------


def test_head_probs_examples():
    np.testing.assert_allclose(L.head_probs([3.0, 3.0, 3.0]), [1 / 3] * 3, atol=1e-12)
    expected = [1 / (1 + math.exp(-2)), 1 - 1 / (1 + math.exp(-2))]
    np.testing.assert_allclose(L.head_probs([1.0, -1.0]), expected, atol=1e-6)
    np.testing.assert_allclose(L.head_probs([2.0, -2.0]), L.head_probs([1.0, -1.0]), atol=1e-15)
    np.testing.assert_allclose(expected, [0.8808, 0.1192], atol=1e-4)


@settings(max_examples=60, deadline=None)
@given(
    z=arrays(np.float64, st.integers(2, 12), elements=st.floats(-20, 20)),
    c=st.floats(0.01, 100),
)
def test_head_probs_scale_invariant(z, c):
    if z.std() < 1e-6:
        return
    np.testing.assert_allclose(L.head_probs(c * z), L.head_probs(z), atol=1e-8)


@settings(max_examples=60, deadline=None)
@given(z=arrays(np.float64, st.integers(2, 12), elements=st.floats(-50, 50)))
def test_head_probs_is_clamped_distribution(z):
    p = L.head_probs(z, 1e-6)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(p > 0)


def test_bkt_examples():
    assert L.bkt_weight([0.3, 0.7], [0.3, 0.7], 1) == pytest.approx(1.0)
    assert L.bkt_weight([0.5, 0.5], [0.1, 0.9], 0) == pytest.approx(
        math.log(0.1) / math.log(0.5), abs=1e-12
    )
    assert L.bkt_weight([0.5, 0.5], [0.1, 0.9], 0) == pytest.approx(3.3219, abs=1e-4)
    assert L.bkt_weight([0.5, 0.5], [0.9, 0.1], 0) == pytest.approx(0.1520, abs=1e-4)
    with pytest.raises(ValueError):
        L.bkt_weight([0.5, 0.5], [0.9, 0.1], 2)


@settings(max_examples=100, deadline=None)
@given(
    a=st.floats(1e-6, 1 - 1e-6),
    b=st.floats(1e-6, 1 - 1e-6),
    step=st.floats(1e-4, 0.2),
)
def test_bkt_monotonicity(a, b, step):
    a2 = min(a + step, 1 - 1e-6)
    b2 = min(b + step, 1 - 1e-6)
    if a2 > a:
        assert L.bkt_weight([b, 1 - b], [a2, 1 - a2], 0) < L.bkt_weight([b, 1 - b], [a, 1 - a], 0)
    if b2 > b:
        assert L.bkt_weight([b2, 1 - b2], [a, 1 - a], 0) > L.bkt_weight([b, 1 - b], [a, 1 - a], 0)


# --- distillation ----------------------------------------------------------


def test_kd_logit_worked_example():
    z = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    s = 1 / (1 + math.exp(-1))
    expected = _bernoulli_sym_kl(s, 1 - s) / 2
    assert expected == pytest.approx(0.4621, abs=1e-4)
    assert L.kd_logit_loss(z, np.ones(1), 1.0) == pytest.approx(expected, abs=1e-12)


def test_kd_logit_zero_for_identical_experts():
    z = np.tile(np.random.default_rng(0).normal(size=(1, 5, 4)), (3, 1, 1))
    assert abs(L.kd_logit_loss(z, np.ones(5))) < 1e-12


def test_kd_logit_linear_in_weights():
    rng = np.random.default_rng(4)
    z = rng.normal(size=(3, 6, 5))
    w = rng.uniform(0.1, 3, 6)
    assert L.kd_logit_loss(z, 2 * w) == pytest.approx(2 * L.kd_logit_loss(z, w), rel=1e-12)
    w2 = rng.uniform(0.1, 3, 6)
    assert L.kd_logit_loss(z, w + w2) == pytest.approx(
        L.kd_logit_loss(z, w) + L.kd_logit_loss(z, w2), rel=1e-12
    )


def test_kd_requires_two_experts():
    with pytest.raises(ValueError):
        L.kd_logit_loss(np.zeros((1, 2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        L.kd_feature_loss(np.zeros((1, 2, 3)))
    with pytest.raises(ValueError):
        L.kd_feature_loss([np.zeros((2, 3)), np.zeros((2, 4))])


def test_kd_feature_worked_example_and_permutation():
    v = np.array([[[1.0, 0.0]], [[0.0, 1.0]]])
    assert L.kd_feature_loss(v, 1.0) == pytest.approx(0.4621171572600098, abs=1e-12)
    rng = np.random.default_rng(5)
    v = rng.normal(size=(4, 3, 6))
    perm = [2, 0, 3, 1]
    assert L.kd_feature_loss(v[perm]) == pytest.approx(L.kd_feature_loss(v), rel=1e-12)
    assert abs(L.kd_feature_loss(np.tile(v[:1], (3, 1, 1)))) < 1e-12


def test_kd_against_bruteforce_sum():
    rng = np.random.default_rng(6)
    z = rng.normal(size=(3, 4, 5))
    w = rng.uniform(0.5, 2, (3, 4))
    tau = 2.0
    total = 0.0
    for k in range(3):
        for q in range(3):
            if k == q:
                continue
            for i in range(4):
                p = np.exp(z[k, i] / tau) / np.exp(z[k, i] / tau).sum()
                r = np.exp(z[q, i] / tau) / np.exp(z[q, i] / tau).sum()
                total += w[q, i] * tau**2 * np.sum(p * np.log(p / r))
    assert L.kd_logit_loss(z, w, tau) == pytest.approx(total / (4 * 3 * 2), rel=1e-12)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2, 4), elements=st.floats(-10, 10)))
def test_kd_nonnegative(z):
    assert L.kd_feature_loss(z) >= -1e-12


# --- contrastive --------------------------------------------------------------


def test_info_nce_uniform_similarities():
    q = np.array([1.0, 0.0, 0.0, 0.0])
    key = np.array([0.0, 1.0, 0.0, 0.0])
    queue = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0], [0.0, -1.0, 0.0, 0.0]])
    assert L.info_nce_loss(q, key, queue, 1.0) == pytest.approx(math.log(4), abs=1e-12)


def test_info_nce_worked_example():
    q = np.array([1.0, 0.0, 0.0])
    queue = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    expected = -math.log(math.e / (math.e + 2))
    assert L.info_nce_loss(q, q, queue, 1.0) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.5514, abs=1e-4)


def test_info_nce_monotone_in_positive_similarity():
    rng = np.random.default_rng(7)
    queue = rng.normal(size=(16, 4))
    queue /= np.linalg.norm(queue, axis=1, keepdims=True)
    q = np.array([1.0, 0.0, 0.0, 0.0])
    prev = np.inf
    for angle in np.linspace(np.pi, 0, 12):
        key = np.array([np.cos(angle), np.sin(angle), 0.0, 0.0])
        val = L.info_nce_loss(q, key, queue)
        assert 0 <= val < prev
        prev = val


def test_info_nce_rejects_unnormalized():
    with pytest.raises(ValueError):
        L.info_nce_loss([2.0, 0.0], [1.0, 0.0], np.eye(2))


# --- supervision and total -----------------------------------------------------


def _out(z_ref, z_cls):
    return ExpertOutputs(v=None, z_cls=np.atleast_2d(z_cls), z_ref=np.atleast_2d(z_ref))


def test_sup_loss_examples():
    z = np.array([[0.3, -0.2, 1.0]])
    prior = ClassPrior([0.6, 0.3, 0.1], [1 / 3] * 3)
    assert L.sup_loss([_out(z, z)], [2], prior) == pytest.approx(2 * L.bc_loss(z, [2], prior))
    assert L.sup_loss([_out(np.zeros(4), np.zeros(4))] * 3, [1], ClassPrior.balanced(4)) == (
        pytest.approx(2 * math.log(4))
    )
    # second expert's logits cancel the prior shift, leaving uniform adjusted logits
    cancel = np.array([math.log(0.5 / 0.9), math.log(0.5 / 0.1)])
    outs = [_out([0.0, 0.0], [0.0, 0.0]), _out(cancel, cancel)]
    expected = (2 * -math.log(0.1) + 2 * math.log(2)) / 2
    assert L.sup_loss(outs, [1], SKEW) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(2.9957, abs=1e-4)


def test_total_loss_examples():
    kd = L.KDConfig()
    assert (kd.alpha, kd.beta, kd.tau_kd, kd.tau_con) == (0.6, 1.0, 1.0, 1.0)
    bd = L.total_loss(1.0, 0.5, 0.5, 2.0, kd)
    assert bd.total == pytest.approx(3.6, abs=1e-12)
    assert L.total_loss(1.3, 0.5, 0.2, 2.0, L.KDConfig(alpha=0, beta=0)).total == 1.3
    assert L.total_loss(0, 0, 0, 0, kd).total == 0
    assert set(__import__("json").loads(bd.to_json())) == {
        "sup", "kd_logit", "kd_feature", "con", "total"
    }


def test_kdconfig_validation():
    with pytest.raises(ValueError):
        L.KDConfig(tau_kd=0)
    with pytest.raises(ValueError):
        L.KDConfig(prob_floor=0.5)
    with pytest.raises(ValueError):
        L.KDConfig(alpha=-1)
