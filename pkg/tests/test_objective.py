import math
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from treerpo import autograd as ag
from treerpo.objective import (
    MODES,
    ChildRecord,
    ObjectiveConfig,
    ParentGroup,
    ScheduleConfig,
    distillation_loss,
    diversity_loss,
    lambda_schedule,
    negative_group_weights,
    policy_gradient_loss,
    positive_group_weights,
    reference_kl,
    target_distribution,
    tau_schedule,
    total_loss,
)
from treerpo.policy import SequenceState, compute_gradients

from conftest import make_model


def make_group(model, advantages, old_model=None, seed=0, k=3):
    """Parent with k masked positions and one child per advantage."""
    rng = np.random.default_rng(seed)
    V = model.vocab.size
    parent = SequenceState((0, 1), (V - 1,) * 4, 4, V - 1)
    positions = tuple(sorted(rng.choice(4, size=k, replace=False)))
    grid = (old_model or model).forward(parent)
    children = []
    for a in advantages:
        toks = tuple(int(rng.integers(0, V - 1)) for _ in positions)
        old = np.array([grid[2 + p, t] for p, t in zip(positions, toks)])
        children.append(ChildRecord(toks, old, float(a), Fraction(a)))
    return ParentGroup(parent, positions, children)


def numpy_logp(model, state):
    return np.log(model.forward(state)[:, model.vocab.output_ids])


def col(model, tok):
    return list(model.vocab.output_ids).index(tok)


# ----------------------------------------------------------------------
# schedules


def test_schedule_endpoints_exact():
    cfg = ScheduleConfig(T=500)
    assert tau_schedule(0, cfg) == 2.0 and tau_schedule(500, cfg) == 0.0
    assert lambda_schedule(0, cfg) == 0.0 and lambda_schedule(500, cfg) == 3e-3
    rev = ScheduleConfig(T=500, reverse=True)
    assert tau_schedule(0, rev) == 0.0 and tau_schedule(500, rev) == 2.0
    assert lambda_schedule(0, rev) == 3e-3 and lambda_schedule(500, rev) == 0.0


def test_schedule_formulas():
    cfg = ScheduleConfig(tau_max=1.5, sched_beta=0.5, lambda_max=0.1, gamma=2.0, T=10)
    t = 3
    assert tau_schedule(t, cfg) == pytest.approx(1.5 * (1 - 0.3) ** 0.5, rel=1e-15)
    assert lambda_schedule(t, cfg) == pytest.approx(0.1 * (math.exp(0.6) - 1) / (math.exp(2.0) - 1), rel=1e-14)


@settings(max_examples=30, deadline=None)
@given(T=st.integers(1, 2000), beta=st.floats(0.05, 1.0), gamma=st.floats(0.1, 10.0))
def test_schedules_monotone(T, beta, gamma):
    cfg = ScheduleConfig(sched_beta=beta, gamma=gamma, T=T)
    ts = np.linspace(0, T, 200)
    tau = [tau_schedule(t, cfg) for t in ts]
    lam = [lambda_schedule(t, cfg) for t in ts]
    assert all(b <= a for a, b in zip(tau, tau[1:]))
    assert all(b >= a for a, b in zip(lam, lam[1:]))


def test_schedule_clamps_out_of_range_with_warning():
    cfg = ScheduleConfig(T=10)
    with pytest.warns(UserWarning):
        assert tau_schedule(12, cfg) == 0.0
    with pytest.warns(UserWarning):
        assert lambda_schedule(-1, cfg) == 0.0


def test_schedule_validation():
    for bad in (dict(tau_max=0), dict(sched_beta=0), dict(sched_beta=1.5), dict(lambda_max=-1), dict(gamma=0), dict(T=0)):
        with pytest.raises(ValueError):
            ScheduleConfig(**bad)


# ----------------------------------------------------------------------
# group weights and targets


def test_positive_weights_are_softmax_over_positive_advantages():
    model = make_model()
    g = make_group(model, [Fraction(1, 2), Fraction(1, 6), Fraction(-1, 3), Fraction(-1, 3)])
    idx, w = positive_group_weights(g, 0.5)
    assert list(idx) == [0, 1]
    e = np.exp(np.array([0.5, 1 / 6]) / 0.5)
    np.testing.assert_allclose(w, e / e.sum(), rtol=1e-14)
    idx, w = negative_group_weights(g, 0.5)
    assert list(idx) == [2, 3]
    np.testing.assert_allclose(w, [0.5, 0.5])


def test_tau_zero_splits_mass_over_ties():
    model = make_model()
    g = make_group(model, [Fraction(1, 4), Fraction(1, 4), Fraction(-1, 2)])
    _, w = positive_group_weights(g, 0.0)
    np.testing.assert_array_equal(w, [0.5, 0.5])


def test_target_distribution_is_vote():
    model = make_model()
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)], seed=3)
    t = target_distribution(g, [0, 1], [0.25, 0.75], model.vocab.size)
    np.testing.assert_allclose(t.sum(1), 1.0)
    for i in range(g.k):
        expect = np.zeros(model.vocab.size)
        expect[g.children[0].tokens[i]] += 0.25
        expect[g.children[1].tokens[i]] += 0.75
        np.testing.assert_allclose(t[i], expect)


def test_group_validation():
    model = make_model()
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)])
    with pytest.raises(ValueError):
        ParentGroup(g.parent_state, g.positions[:1], g.children)
    bad = ChildRecord(g.children[0].tokens, np.zeros(g.k), 0.5)
    with pytest.raises(ValueError):
        ParentGroup(g.parent_state, g.positions, [bad])


# ----------------------------------------------------------------------
# loss terms against straight-line numpy


def test_policy_gradient_value_oracle():
    model, old = make_model(seed=1), make_model(seed=2)
    g = make_group(model, [Fraction(1, 3), Fraction(-1, 6), Fraction(-1, 6)], old_model=old)
    lp = numpy_logp(model, g.parent_state)
    eps = 0.2
    per_child = []
    for c in g.children:
        r = np.array([math.exp(lp[2 + p, col(model, t)]) for p, t in zip(g.positions, c.tokens)]) / c.old_probs
        per_child.append(np.mean(np.minimum(r * c.advantage, np.clip(r, 1 - eps, 1 + eps) * c.advantage)))
    assert policy_gradient_loss(g, model, eps).item() == pytest.approx(np.mean(per_child), rel=1e-12)


def test_reference_kl_oracle():
    model, ref = make_model(seed=1), make_model(seed=3)
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)])
    p, q = numpy_logp(model, g.parent_state), numpy_logp(ref, g.parent_state)
    rows = [2 + d for d in g.positions]
    expect = np.mean([(np.exp(p[r]) * (p[r] - q[r])).sum() for r in rows])
    assert reference_kl(g, model, ref).item() == pytest.approx(expect, rel=1e-12)
    assert reference_kl(g, model, model).item() == 0.0


def test_distillation_oracle():
    model = make_model(seed=1)
    g = make_group(model, [Fraction(1, 2), Fraction(1, 4), Fraction(-3, 4)], seed=5)
    lam, tau = 0.7, 0.3
    lp = numpy_logp(model, g.parent_state)
    e = np.exp(np.array([0.5, 0.25]) / tau)
    w = e / e.sum()
    kls = []
    for i, pos in enumerate(g.positions):
        tgt = np.zeros(model.vocab.size)
        tgt[g.children[0].tokens[i]] += w[0]
        tgt[g.children[1].tokens[i]] += w[1]
        kls.append(sum(tgt[v] * (math.log(tgt[v]) - lp[2 + pos, col(model, v)]) for v in range(len(tgt)) if tgt[v] > 0))
    assert distillation_loss(g, model, lam, tau).item() == pytest.approx(lam * np.mean(kls), rel=1e-12)


def test_diversity_mirrors_distillation():
    model = make_model(seed=4)
    for seed in range(10):
        advs = [Fraction(1, 2), Fraction(1, 6), Fraction(-1, 3), Fraction(-1, 3)]
        g = make_group(model, advs, seed=seed)
        mirror = make_group(model, [-a for a in advs], seed=seed)
        div = diversity_loss(mirror, model, 0.4, 0.8).item()
        assert div <= 0
        assert -div == pytest.approx(distillation_loss(g, model, 0.4, 0.8).item(), rel=1e-13)


def test_groups_without_positive_or_negative_children_are_skipped():
    model = make_model()
    g = make_group(model, [Fraction(0), Fraction(0)])
    assert distillation_loss(g, model, 1.0, 1.0).skipped
    assert diversity_loss(g, model, 1.0, 1.0).skipped
    out = total_loss(g, model, model, 3, ObjectiveConfig(ScheduleConfig(T=10)))
    assert out.skipped_groups == 1 and out.total == 0.0


# ----------------------------------------------------------------------
# identities and modes


@pytest.mark.parametrize("mode", MODES)
def test_total_loss_is_zero_at_identity(mode):
    model = make_model(seed=6)
    cfg = ObjectiveConfig(ScheduleConfig(T=50, reverse=mode == "reverse_schedule"))
    for seed in range(5):
        g = make_group(model, [Fraction(1, 3), Fraction(-1, 3), Fraction(0)], seed=seed)
        t = 50 if mode == "reverse_schedule" else 0
        out = total_loss(g, model, model.copy(), t, cfg, mode)
        assert abs(out.total) < 1e-10
        assert out.distill_term == 0.0 and out.kl_term == 0.0


def test_no_distill_drops_auxiliary_term():
    model, ref = make_model(seed=1), make_model(seed=2)
    cfg = ObjectiveConfig(ScheduleConfig(T=10, lambda_max=0.5))
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)])
    for t in range(11):
        out = total_loss(g, model, ref, t, cfg, "no_distill")
        assert out.distill_term == 0.0 and out.div_term == 0.0
        assert out.total == pytest.approx(-out.pg_term + 0.01 * out.kl_term, rel=1e-12)
    full = total_loss(g, model, ref, 10, cfg, "full")
    assert full.total == pytest.approx(-full.pg_term + 0.01 * full.kl_term + full.distill_term, rel=1e-12)
    assert full.distill_term > 0


def test_unknown_mode_rejected():
    model = make_model()
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)])
    with pytest.raises(ValueError):
        total_loss(g, model, model, 0, ObjectiveConfig(), "mystery")


def test_non_finite_loss_raises():
    model = make_model()
    g = make_group(model, [Fraction(1, 2), Fraction(-1, 2)])
    model.tensors["ln_f.g"].data = model.tensors["ln_f.g"].data * np.inf
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with np.errstate(all="ignore"), pytest.raises(ag.NumericError):
            total_loss(g, model, model.copy(), 0, ObjectiveConfig())


@pytest.mark.parametrize("mode", ["full", "no_distill", "diversity"])
def test_gradient_matches_finite_differences(mode):
    model, ref, old = make_model(seed=7), make_model(seed=8), make_model(seed=9)
    cfg = ObjectiveConfig(ScheduleConfig(T=10, lambda_max=0.5))
    g = make_group(model, [Fraction(1, 2), Fraction(1, 4), Fraction(-3, 4)], old_model=old, seed=2)
    grads = compute_gradients(model, total_loss(g, model, ref, 6, cfg, mode).graph)

    def value():
        with ag.no_grad():
            return total_loss(g, model, ref, 6, cfg, mode).total

    h = 1e-4
    for name in ("tok_emb", "block0.wv", "block1.w1", "ln_f.g"):
        arr = model.tensors[name].data
        idxs = list(np.ndindex(arr.shape))[:12]
        fd = np.zeros(len(idxs))
        for j, idx in enumerate(idxs):
            old_v = arr[idx]
            arr[idx] = old_v + h
            up = value()
            arr[idx] = old_v - h
            down = value()
            arr[idx] = old_v
            fd[j] = (up - down) / (2 * h)
        an = np.array([grads[name][idx] for idx in idxs])
        assert np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-4
