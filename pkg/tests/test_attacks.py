from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from helpers import AffineSequenceModel
from sqat import attacks
from sqat.attacks import (Adam, AttackTarget, backward_error, changed_positions, cw_attack, cw_init,
                          deepfool, deepfool_linearize, deepfool_step, fgsm_targeted,
                          fgsm_untargeted, hinge_terms, select_target, single_token_target,
                          to_pixels)
from sqat.model import Generation


class FixedGradientModel:
    """Returns a preset input gradient for any objective."""

    def __init__(self, grad):
        self.grad = np.asarray(grad, dtype=np.float64)

    def generate(self, image):
        return Generation(np.array([0, 1]), np.zeros((2, 3)), "a")

    def input_gradient(self, image, request):
        return self.grad


def test_fgsm_sign_definition():
    m = FixedGradientModel([0.3, -0.2, 0.0])
    p = fgsm_untargeted(m, np.zeros(3))
    assert p.delta.tolist() == [1.0, -1.0, 0.0] and p.converged and p.iterations == 1


def test_fgsm_targeted_sign():
    m = FixedGradientModel([0.3, -0.2])
    p = fgsm_targeted(m, np.zeros(2), AttackTarget([0, 1]))
    assert p.delta.tolist() == [-1.0, 1.0]


def test_fgsm_zero_gradient_flagged():
    p = fgsm_untargeted(FixedGradientModel(np.zeros(4)), np.zeros(4))
    assert not p.delta.any() and not p.converged and p.info["degenerate"]


def test_fgsm_targeted_at_clean_labels_is_negated_untargeted():
    rng = np.random.default_rng(0)
    m = AffineSequenceModel.random(rng)
    x = rng.uniform(size=m.shape)
    u = fgsm_untargeted(m, x)
    t = fgsm_targeted(m, x, AttackTarget(m.generate(x).tokens))
    assert np.array_equal(t.delta, -u.delta)


def test_fgsm_untargeted_increases_loss_first_order():
    rng = np.random.default_rng(1)
    m = AffineSequenceModel.random(rng)
    x = rng.uniform(size=m.shape)
    from sqat.model import GradientRequest
    req = GradientRequest.cross_entropy(m.generate(x).tokens)
    g = m.input_gradient(x, req)
    assert np.sum(g * fgsm_untargeted(m, x).delta) == pytest.approx(np.abs(g).sum())


def test_changed_positions():
    assert changed_positions([1, 2, 3], [1, 5, 3]).tolist() == [False, True, False]
    assert changed_positions([1, 2], [1, 2, 3]).tolist() == [False, False, True]
    assert changed_positions([1, 2, 3], [1]).tolist() == [False, True, True]


def test_select_target_small():
    assert select_target([5, 4, 3], 1) == 0
    assert select_target([5, 4, 3], 3) == 2
    assert select_target([5, 4, 3], 1, exclude=[0]) == 1
    with pytest.raises(ValueError):
        select_target([5, 4, 3], 4)


def test_select_target_sort_oracle():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        row = rng.integers(-5, 6, size=31).astype(float)   # plenty of ties
        rank = int(rng.integers(1, 32))
        oracle = sorted(range(31), key=lambda k: (-row[k], k))[rank - 1]
        assert select_target(row, rank) == oracle


def _charset_model(rng, T=5, v=8, shape=(4, 4)):
    m = AffineSequenceModel.random(rng, T=T, v=v, shape=shape)
    m.b[:, list(m.charset.specials)] -= 100.0      # no specials in the clean decoding
    m.b[-1, m.charset.eos] += 200.0                 # except a final eos
    return m


def test_single_token_target():
    rng = np.random.default_rng(4)
    m = _charset_model(rng)
    x = rng.uniform(size=m.shape)
    g = m.generate(x)
    for s in range(20):
        tgt = single_token_target(m, x, np.random.default_rng(s), rank=3)
        t = tgt.position
        assert g.tokens[t] not in m.charset.specials
        diff = np.flatnonzero(tgt.labels != g.tokens)
        assert diff.tolist() == [t]
        assert tgt.labels[t] == select_target(g.logits[t], 3, exclude=m.charset.specials)


# -- DeepFool ----------------------------------------------------------------

def test_deepfool_step_lands_on_linear_boundary():
    # one step per position on an affine model: the chosen pair's logit gap closes
    rng = np.random.default_rng(5)
    for _ in range(100):
        m = AffineSequenceModel.random(rng, T=3, v=5, shape=(2, 6))
        x = rng.uniform(size=m.shape)
        g = m.generate(x)
        positions = list(range(len(g.tokens)))
        lins = deepfool_linearize(m, x, g.tokens, g.logits, positions, top_amount=2)
        for t in positions:
            k, r = deepfool_step(lins[t])
            F = m.logits(x + r)
            assert abs(F[t, k] - F[t, g.tokens[t]]) <= 1e-9


def test_deepfool_two_class_linear():
    w = np.array([[1.0, 2.0], [-1.0, 0.5]])
    m = AffineSequenceModel(w[None], np.array([[0.3, 0.0]]), (2,), eos=1)
    x = np.array([0.2, 0.1])
    g = m.generate(x)
    lins = deepfool_linearize(m, x, g.tokens, g.logits, [0])
    k, r = deepfool_step(lins[0])
    F = m.logits(x + r)
    assert abs(F[0, 0] - F[0, 1]) <= 1e-9


def test_deepfool_defaults_single_iteration():
    rng = np.random.default_rng(6)
    m = AffineSequenceModel.random(rng)
    x = rng.uniform(size=m.shape)
    p = deepfool(m, x)
    assert p.iterations == 1
    assert 0.0 <= p.info["changed_fraction"] <= 1.0
    g = m.generate(x)
    lins = deepfool_linearize(m, x, g.tokens, g.logits, range(len(g.tokens)))
    expected = sum(deepfool_step(lins[t])[1] for t in range(len(g.tokens)))
    np.testing.assert_allclose(p.delta, expected, atol=1e-14)


def test_deepfool_skips_flat_positions():
    rng = np.random.default_rng(7)
    m = AffineSequenceModel.random(rng, T=3, v=5)
    m.A[1] = 0.0
    m.b[:, m.charset.eos] = -100.0
    x = rng.uniform(size=m.shape)
    p = deepfool(m, x)
    assert (1, 1) in p.info["skipped"]


def test_deepfool_step_none_when_all_flat():
    lin = attacks.BoundaryLinearization(np.zeros(3), 1.0, 0, 0)
    assert deepfool_step([lin]) is None


# -- Backward error -----------------------------------------------------------

def test_be_target_is_current_output():
    rng = np.random.default_rng(8)
    m = AffineSequenceModel.random(rng)
    x = rng.uniform(size=m.shape)
    p = backward_error(m, x, AttackTarget(m.generate(x).tokens))
    assert not p.delta.any() and p.iterations == 0 and p.info["qp_calls"] == 0 and p.converged


def test_be_single_token_closed_form():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m = _charset_model(rng)
        x = rng.uniform(size=m.shape)
        g = m.generate(x)
        t = 1
        labels = g.tokens.copy()
        labels[t] = select_target(g.logits[t], 2, exclude=m.charset.specials)
        p = backward_error(m, x, AttackTarget(labels, t), alpha=1.0, iterations=1)
        orig, targ = g.tokens[t], labels[t]
        gvec = (m.A[t, orig] - m.A[t, targ]).reshape(m.shape)
        h = g.logits[t, targ] - g.logits[t, orig]
        closed = (h / np.sum(gvec * gvec)) * gvec     # projection onto g.delta <= h, h < 0
        np.testing.assert_allclose(p.delta, closed, rtol=0, atol=1e-8)
        F = m.logits(x + p.delta)
        assert abs(F[t, orig] - F[t, targ]) <= 1e-8


def test_be_reaches_target_with_margin():
    rng = np.random.default_rng(10)
    m = _charset_model(rng)
    x = rng.uniform(size=m.shape)
    g = m.generate(x)
    labels = g.tokens.copy()
    labels[0] = select_target(g.logits[0], 2, exclude=m.charset.specials)
    labels[2] = select_target(g.logits[2], 2, exclude=m.charset.specials)
    p = backward_error(m, x, AttackTarget(labels), alpha=1.0, iterations=5, margin=0.1)
    assert p.converged
    assert np.array_equal(m.generate(x + p.delta).tokens, labels)


def test_be_infeasible_qp_stops():
    # target and current logits share a gradient, so their gap cannot be closed
    rng = np.random.default_rng(11)
    m = _charset_model(rng)
    x = rng.uniform(size=m.shape)
    g = m.generate(x)
    labels = g.tokens.copy()
    labels[0] = select_target(g.logits[0], 2, exclude=m.charset.specials)
    m.A[0, labels[0]] = m.A[0, g.tokens[0]]
    p = backward_error(m, x, AttackTarget(labels))
    assert not p.converged and p.info["qp_status"] == "infeasible"


# -- Carlini-Wagner -----------------------------------------------------------

def test_to_pixels_zero():
    assert np.all(to_pixels(np.zeros((3, 3))) == 0.5)


def test_cw_init_bounds():
    x = np.array([[0.0, 1.0, 0.5, 1e-9]])
    x0 = cw_init(x, 0.002, np.random.default_rng(0))
    assert np.all(x0 > 0) and np.all(x0 < 1)
    assert np.all(np.isfinite(np.arctanh(2 * x0 - 1)))
    assert np.allclose(np.abs(x0[0, 2] - 0.5), 0.002)


def test_adam_matches_torch():
    rng = np.random.default_rng(1)
    w0 = rng.standard_normal(5)
    grads = rng.standard_normal((10, 5))
    p = torch.nn.Parameter(torch.tensor(w0))
    opt = torch.optim.Adam([p], lr=0.01, weight_decay=1e-3)
    ours = Adam(w0.shape, 0.01, 1e-3)
    w = w0.copy()
    for gr in grads:
        # gradient of a linear objective is the same at any point
        opt.zero_grad()
        p.grad = torch.tensor(gr)
        opt.step()
        w = ours.step(w, gr)
    np.testing.assert_allclose(w, p.detach().numpy(), rtol=0, atol=1e-12)


def test_hinge_terms():
    logits = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 4.0]])
    m, rival = hinge_terms(logits, np.array([0, 2]), targeted=False)
    assert m.tolist() == [1.0, -1.0] and rival.tolist() == [2, 1]
    m, _ = hinge_terms(logits, np.array([0, 2]), targeted=True)
    assert m.tolist() == [-1.0, 1.0]


def test_cw_untargeted_inactive_hinge_shrinks():
    rng = np.random.default_rng(12)
    m = _charset_model(rng)
    x = rng.uniform(0.2, 0.8, size=m.shape)
    g = m.generate(x)
    # stored labels already differ everywhere, so every hinge term is inactive
    stored = np.array([select_target(r, 2) for r in g.logits])
    p = cw_attack(m, x, "untargeted", AttackTarget(stored), c=0.05, eta=0.01,
                  lr=0.002, max_iters=30, patience=5)
    x0 = cw_init(x, 0.01, np.random.default_rng(0))
    assert np.sum(p.delta ** 2) < np.sum((x0 - x) ** 2)
    assert p.info["loss"] == pytest.approx(np.sum(p.delta ** 2))


def test_cw_targeted_reaches_target_and_verifies():
    rng = np.random.default_rng(13)
    m = _charset_model(rng)
    x = rng.uniform(0.3, 0.7, size=m.shape)
    tgt = single_token_target(m, x, np.random.default_rng(0), rank=2)
    p = cw_attack(m, x, "targeted", tgt, c=15.0, eta=0.002, lr=0.01, max_iters=200)
    assert p.converged and p.info["stop"] == "target_reached"
    assert np.array_equal(m.generate(x + p.delta).tokens, tgt.labels)


def test_cw_untargeted_converged_means_changed():
    rng = np.random.default_rng(14)
    m = _charset_model(rng)
    x = rng.uniform(0.3, 0.7, size=m.shape)
    clean = m.generate(x).tokens
    p = cw_attack(m, x, "untargeted", AttackTarget(clean), c=5.0, eta=0.002, lr=0.05, max_iters=100)
    changed = changed_positions(clean, m.generate(x + p.delta).tokens).any()
    assert p.converged == bool(changed)


def test_cw_bad_mode():
    with pytest.raises(ValueError):
        cw_attack(SimpleNamespace(), np.zeros(2), "sideways", AttackTarget([0]), 1.0, 0.1)


# -- invariants ---------------------------------------------------------------

@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31))
def test_fgsm_entries_are_signs(seed):
    rng = np.random.default_rng(seed)
    m = AffineSequenceModel.random(rng)
    x = rng.uniform(size=m.shape)
    assert set(np.unique(fgsm_untargeted(m, x).delta)) <= {-1.0, 0.0, 1.0}


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["targeted", "untargeted"]))
def test_cw_iterates_inside_unit_box(seed, mode):
    rng = np.random.default_rng(seed)
    m = _charset_model(rng)
    x = rng.uniform(size=m.shape)
    seen = []
    real = m.sequence_logits

    def spy(image, labels):
        seen.append(np.array(image))
        return real(image, labels)

    m.sequence_logits = spy
    tgt = (single_token_target(m, x, rng, rank=2) if mode == "targeted"
           else AttackTarget(m.generate(x).tokens))
    p = cw_attack(m, x, mode, tgt, c=1.0, eta=0.002, lr=0.05, max_iters=20, seed=seed)
    assert all(s.min() > 0 and s.max() < 1 for s in seen)
    assert np.isfinite(p.info["loss"])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.1, 1.0))
def test_be_is_alpha_weighted_sum(seed, alpha):
    rng = np.random.default_rng(seed)
    m = _charset_model(rng)
    x = rng.uniform(size=m.shape)
    tgt = single_token_target(m, x, rng, rank=2)
    steps = []
    real = attacks.qpsolve.solve

    def spy(problem, **kw):
        sol = real(problem, **kw)
        if sol.optimal:
            steps.append(sol.delta.reshape(m.shape))
        return sol

    attacks.qpsolve.solve = spy
    try:
        p = backward_error(m, x, tgt, alpha=alpha, iterations=3)
    finally:
        attacks.qpsolve.solve = real
    expected = alpha * sum(steps) if steps else np.zeros(m.shape)
    np.testing.assert_allclose(p.delta, expected, atol=1e-12)
