"""Losses and schedules for tree-structured policy optimisation.

All loss terms are evaluated on one parent group: a parent state and its B
children, which decode the same positions.  Every term is built as an
autograd graph so the total can be differentiated with
:func:`treerpo.policy.compute_gradients`.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from . import autograd as ag

MODES = ("full", "no_distill", "diversity", "reverse_schedule")

# log-probabilities are clamped here before entering a KL against a target
LOG_FLOOR = -1e4


@dataclass(frozen=True)
class ScheduleConfig:
    tau_max: float = 2.0
    sched_beta: float = 0.7
    lambda_max: float = 3e-3
    gamma: float = 3.0
    T: int = 1000
    reverse: bool = False

    def __post_init__(self):
        if self.tau_max <= 0:
            raise ValueError("tau_max must be positive")
        if not 0 < self.sched_beta <= 1:
            raise ValueError("sched_beta must lie in (0, 1]")
        if self.lambda_max < 0:
            raise ValueError("lambda_max must be nonnegative")
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        if self.T < 1:
            raise ValueError("T must be at least 1")


@dataclass(frozen=True)
class ObjectiveConfig:
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    beta_kl: float = 0.01
    clip_eps: float = 0.2


def _time(t, cfg):
    if t > cfg.T or t < 0:
        warnings.warn(f"training step {t} outside [0, {cfg.T}]; clamping", stacklevel=3)
        t = min(max(t, 0), cfg.T)
    return cfg.T - t if cfg.reverse else t


def tau_schedule(t, cfg):
    """Distillation temperature ``tau_max * (1 - t/T)**sched_beta``."""
    u = _time(t, cfg)
    return cfg.tau_max * (1.0 - u / cfg.T) ** cfg.sched_beta


def lambda_schedule(t, cfg):
    """Distillation weight ramping from 0 to ``lambda_max`` along an exponential."""
    u = _time(t, cfg)
    return cfg.lambda_max * math.expm1(cfg.gamma * u / cfg.T) / math.expm1(cfg.gamma)


# ----------------------------------------------------------------------
# groups


@dataclass
class ChildRecord:
    tokens: tuple
    old_probs: np.ndarray
    advantage: float
    advantage_exact: Fraction | None = None

    @property
    def sign(self):
        a = self.advantage_exact if self.advantage_exact is not None else self.advantage
        return (a > 0) - (a < 0)


@dataclass
class ParentGroup:
    parent_state: object
    positions: tuple
    children: list
    parent_id: int | None = None

    def __post_init__(self):
        self.positions = tuple(self.positions)
        k = len(self.positions)
        for c in self.children:
            if len(c.tokens) != k or len(c.old_probs) != k:
                raise ValueError("every child must decode the group's positions")
            if np.any(np.asarray(c.old_probs) <= 0) or np.any(np.asarray(c.old_probs) > 1):
                raise ValueError("cached old probabilities must lie in (0, 1]")

    @property
    def k(self):
        return len(self.positions)

    @property
    def advantages(self):
        return np.array([c.advantage for c in self.children])

    @property
    def all_zero(self):
        return all(c.sign == 0 for c in self.children)


def _softmax_weights(scores, tau):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return scores
    if tau == 0:
        top = scores == scores.max()
        return top / top.sum()
    z = (scores - scores.max()) / tau
    w = np.exp(z)
    return w / w.sum()


def positive_group_weights(group, tau):
    """Indices of positive-advantage children and their softmax(A/tau) weights.

    ``tau == 0`` puts equal mass on the children tied for the top advantage.
    An empty index array means the group has no positive child.
    """
    idx = np.array([i for i, c in enumerate(group.children) if c.sign > 0], dtype=np.int64)
    return idx, _softmax_weights([group.children[i].advantage for i in idx], tau)


def negative_group_weights(group, tau):
    """Mirror of :func:`positive_group_weights` over negative children, scored by |A|."""
    idx = np.array([i for i, c in enumerate(group.children) if c.sign < 0], dtype=np.int64)
    return idx, _softmax_weights([abs(group.children[i].advantage) for i in idx], tau)


def target_distribution(group, indices, weights, vocab_size):
    """Weighted vote over the selected children, one row per decoded position."""
    target = np.zeros((group.k, vocab_size))
    weights = np.asarray(weights, dtype=np.float64)
    for w, ci in zip(weights, indices):
        for i, tok in enumerate(group.children[ci].tokens):
            target[i, tok] += w
    return target / weights.sum()


# ----------------------------------------------------------------------
# loss terms


def _rows(model, group, log_probs):
    lp = model.log_probs(group.parent_state) if log_probs is None else log_probs
    P = group.parent_state.prompt_length
    return lp, [P + d for d in group.positions]


def policy_gradient_loss(group, model, clip_eps, log_probs=None):
    """Mean over children and positions of the clipped surrogate ``min(r A, clip(r) A)``.

    ``r`` is the per-position probability ratio against the cached old
    probability.
    """
    lp, rows = _rows(model, group, log_probs)
    terms = []
    for c in group.children:
        old = np.asarray(c.old_probs, dtype=np.float64)
        if np.any(old <= 0):
            raise ValueError("old probabilities must be positive")
        cols = [model.column(t) for t in c.tokens]
        logr = ag.gather(lp, rows, cols) - np.log(old)
        r = ag.exp(logr)
        A = float(c.advantage)
        terms.append(ag.minimum(r * A, ag.clip(r, 1.0 - clip_eps, 1.0 + clip_eps) * A).mean())
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    out = out * (1.0 / len(terms))
    out.name = "pg_term"
    return out


def reference_kl(group, model, model_ref, log_probs=None):
    """Mean over decoded positions of KL(pi_theta || pi_ref), full vocabulary."""
    lp, rows = _rows(model, group, log_probs)
    with ag.no_grad():
        ref = model_ref.log_probs(group.parent_state).data[rows]
    sel = ag.embedding(lp, rows)
    kl = (ag.exp(sel) * (sel - ref)).sum(axis=-1).mean()
    kl.name = "kl_term"
    return kl


def _kl_to_target(group, model, target, log_probs):
    lp, rows = _rows(model, group, log_probs)
    tgt = target[:, model.vocab.output_ids]
    with np.errstate(divide="ignore"):
        ent = np.where(tgt > 0, tgt * np.log(np.where(tgt > 0, tgt, 1.0)), 0.0).sum()
    sel = ag.clip(ag.embedding(lp, rows), LOG_FLOOR, 0.0)
    cross = (sel * tgt).sum()
    return (ent - cross) * (1.0 / group.k)


def _skipped():
    out = ag.Tensor(0.0)
    out.skipped = True
    return out


def distillation_loss(group, model, lambda_t, tau_t, log_probs=None):
    """``lambda_t`` times the mean KL(target || pi) over decoded positions.

    The target is the advantage-weighted vote of positive children.  A group
    with no positive child yields a constant 0 flagged ``skipped``.
    """
    idx, w = positive_group_weights(group, tau_t)
    if idx.size == 0:
        return _skipped()
    target = target_distribution(group, idx, w, model.vocab.size)
    out = _kl_to_target(group, model, target, log_probs) * float(lambda_t)
    out.name = "distill_term"
    return out


def diversity_loss(group, model, lambda_t, tau_t, log_probs=None):
    """Negated KL pushing away from the |A|-weighted vote of negative children."""
    idx, w = negative_group_weights(group, tau_t)
    if idx.size == 0:
        return _skipped()
    target = target_distribution(group, idx, w, model.vocab.size)
    out = _kl_to_target(group, model, target, log_probs) * (-float(lambda_t))
    out.name = "div_term"
    return out


@dataclass
class LossBreakdown:
    pg_term: float = 0.0
    kl_term: float = 0.0
    distill_term: float = 0.0
    div_term: float = 0.0
    total: float = 0.0
    skipped_groups: int = 0
    skipped_distill: int = 0
    lambda_t: float = 0.0
    tau_t: float = 0.0
    graph: object = field(default=None, repr=False)

    def as_record(self):
        return {k: v for k, v in self.__dict__.items() if k != "graph"}


def total_loss(group, model, model_ref, t, cfg, mode="full"):
    """Negated clipped surrogate + ``beta_kl`` * reference KL + schedule-weighted auxiliary term.

    ``mode`` selects the auxiliary term: ``full`` and ``reverse_schedule`` use
    the distillation loss (the schedule's ``reverse`` flag does the
    reversing), ``diversity`` uses the diversity loss and ``no_distill``
    drops it.  Groups whose children all have zero advantage contribute
    nothing and are counted as skipped.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    lam = lambda_schedule(t, cfg.schedule)
    tau = tau_schedule(t, cfg.schedule)
    out = LossBreakdown(lambda_t=lam, tau_t=tau)
    if group.all_zero:
        out.skipped_groups = 1
        out.skipped_distill = 1
        out.graph = ag.Tensor(0.0)
        return out

    lp = model.log_probs(group.parent_state)
    pg = policy_gradient_loss(group, model, cfg.clip_eps, log_probs=lp)
    kl = reference_kl(group, model, model_ref, log_probs=lp)
    total = -pg + kl * cfg.beta_kl
    out.pg_term = pg.item()
    out.kl_term = kl.item()

    aux = None
    if mode in ("full", "reverse_schedule"):
        aux = distillation_loss(group, model, lam, tau, log_probs=lp)
        out.distill_term = aux.item()
    elif mode == "diversity":
        aux = diversity_loss(group, model, lam, tau, log_probs=lp)
        out.div_term = aux.item()
    if aux is None or getattr(aux, "skipped", False):
        out.skipped_distill = 1
    else:
        total = total + aux

    for name in ("pg_term", "kl_term", "distill_term", "div_term"):
        if not math.isfinite(getattr(out, name)):
            raise ag.NumericError(f"non-finite {name}")
    total.name = "total"
    out.total = total.item()
    out.graph = total
    return out
