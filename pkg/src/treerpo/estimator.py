"""Transition-probability estimates between a parent state and a child.

``single_pass_log_prob`` reads every newly decoded token from one forward
pass on the parent.  ``exact_transition_prob`` marginalises over all
revelation orders of the k positions (one token per step), each step being
a fresh forward pass on the partially revealed context.  The ratio of the
two is bracketed by ``(1-eps)^k`` and ``exp(k eps / (1-eps))`` where
``eps`` is the largest confidence gap seen at the parent or along any path;
``check_bounds`` certifies that bracket instance by instance.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass

import numpy as np

from .policy import (
    InvalidCallError,
    PolicyConfig,
    PolicyModel,
    SequenceState,
    SharpenedModel,
    Vocabulary,
)

ENUMERATION_CAP = 7

# slack for floating-point rounding when comparing log-ratios with the bounds
BOUND_TOL = 1e-12


class EnumerationCapError(ValueError):
    """Exhaustive enumeration was requested for more positions than the cap allows."""


@dataclass(frozen=True)
class OrderDistribution:
    """How revelation orders are weighted.

    ``uniform``: every order equally likely.  ``greedy``: all mass on the
    order that always reveals the most confident remaining position next
    (ties to the lower position).  ``softmax``: the next position is drawn
    with probability proportional to ``exp(confidence / temperature)``.
    Confidences are row maxima at the current context.
    """

    kind: str = "uniform"
    temperature: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "greedy", "softmax"):
            raise ValueError(f"unknown order distribution {self.kind!r}")
        if self.kind == "softmax" and self.temperature <= 0:
            raise ValueError("softmax temperature must be positive")

    def log_weight(self, order, confidences):
        """Log Q(order); ``confidences(revealed)`` gives a ``{pos: conf}`` map."""
        k = len(order)
        if self.kind == "uniform":
            return -math.lgamma(k + 1)
        logw = 0.0
        revealed = frozenset()
        for pos in order:
            conf = confidences(revealed)
            remaining = sorted(conf)
            if self.kind == "greedy":
                best = min(remaining, key=lambda j: (-conf[j], j))
                if best != pos:
                    return -math.inf
            else:
                z = np.array([conf[j] for j in remaining]) / self.temperature
                z = z - z.max()
                logw += float(z[remaining.index(pos)] - np.log(np.exp(z).sum()))
            revealed = revealed | {pos}
        return logw


UNIFORM = OrderDistribution("uniform")
GREEDY = OrderDistribution("greedy")
SOFTMAX = OrderDistribution("softmax", 1.0)
ORDER_KINDS = (UNIFORM, GREEDY, SOFTMAX)


def _check_transition(parent, positions, tokens):
    positions = [int(p) for p in positions]
    tokens = [int(t) for t in tokens]
    if not positions:
        raise InvalidCallError("at least one decoded position is required")
    if len(positions) != len(tokens):
        raise InvalidCallError("positions and tokens differ in length")
    if len(set(positions)) != len(positions):
        raise InvalidCallError("duplicate positions")
    for p in positions:
        if parent.completion[p] != parent.mask_id:
            raise InvalidCallError(f"position {p} is already decoded in the parent")
    return positions, tokens


def single_pass_log_prob(model, parent, positions, tokens):
    """Sum of parent-state log-probabilities at the decoded tokens (one forward)."""
    positions, tokens = _check_transition(parent, positions, tokens)
    grid = model.forward(parent)
    P = parent.prompt_length
    with np.errstate(divide="ignore"):
        return float(sum(np.log(grid[P + d, y]) for d, y in zip(positions, tokens)))


def _context(parent, reveal):
    """Parent with ``reveal`` ({pos: token}) filled in; treated as a single block."""
    comp = list(parent.completion)
    for p, t in reveal.items():
        comp[p] = t
    return SequenceState(parent.prompt, tuple(comp), len(comp), parent.mask_id)


class _PathTable:
    """Forward passes keyed by the set of already-revealed transition positions."""

    def __init__(self, model, parent, positions, tokens):
        self.model, self.parent = model, parent
        self.target = dict(zip(positions, tokens))
        self.P = parent.prompt_length
        self._grids = {}

    def grid(self, revealed):
        g = self._grids.get(revealed)
        if g is None:
            g = self.model.forward(_context(self.parent, {p: self.target[p] for p in revealed}))
            self._grids[revealed] = g
        return g

    def prob(self, revealed, pos):
        return float(self.grid(revealed)[self.P + pos, self.target[pos]])

    def confidences(self, revealed):
        g = self.grid(revealed)
        return {j: float(g[self.P + j].max()) for j in self.target if j not in revealed}


def _cap(k, cap):
    if k > cap:
        raise EnumerationCapError(
            f"k={k} exceeds the enumeration cap {cap}: {math.factorial(k)} orders, "
            f"about {math.factorial(k) * k} forward passes"
        )


def _enumerate(model, parent, positions, tokens, Q, cap):
    positions, tokens = _check_transition(parent, positions, tokens)
    k = len(positions)
    _cap(k, cap)
    table = _PathTable(model, parent, positions, tokens)
    log_terms, log_ws = [], []
    for order in itertools.permutations(sorted(positions)):
        lw = Q.log_weight(order, table.confidences)
        log_ws.append(lw)
        if lw == -math.inf:
            continue
        revealed, lp = frozenset(), 0.0
        for pos in order:
            q = table.prob(revealed, pos)
            lp += math.log(q) if q > 0 else -math.inf
            revealed = revealed | {pos}
        log_terms.append(lw + lp)
    # path gap over every order and step: every (revealed set, next position) pair
    q_min = 1.0
    for r in range(k):
        for revealed in itertools.combinations(sorted(positions), r):
            rs = frozenset(revealed)
            for pos in positions:
                if pos not in rs:
                    q_min = min(q_min, table.prob(rs, pos))
    return _logsumexp(log_terms), 1.0 - q_min, _logsumexp(log_ws), table


def _logsumexp(xs):
    xs = [x for x in xs if x != -math.inf]
    if not xs:
        return -math.inf
    m = max(xs)
    return m + math.log(sum(math.exp(x - m) for x in xs))


def exact_transition_log_prob(model, parent, positions, tokens, Q=UNIFORM, cap=ENUMERATION_CAP):
    return _enumerate(model, parent, positions, tokens, Q, cap)[0]


def exact_transition_prob(model, parent, positions, tokens, Q=UNIFORM, cap=ENUMERATION_CAP):
    """Order-marginalised probability of revealing ``tokens`` at ``positions``."""
    return math.exp(exact_transition_log_prob(model, parent, positions, tokens, Q, cap))


def order_weight_total(model, parent, positions, tokens, Q, cap=ENUMERATION_CAP):
    """Sum of Q over all k! orders (should be 1)."""
    return math.exp(_enumerate(model, parent, positions, tokens, Q, cap)[2])


def confidence_gap(model, parent, positions, tokens, cap=ENUMERATION_CAP):
    """``(eps_parent, eps_path, eps)``; the path gap ranges over every order."""
    positions, tokens = _check_transition(parent, positions, tokens)
    _cap(len(positions), cap)
    _, eps_path, _, table = _enumerate(model, parent, positions, tokens, UNIFORM, cap)
    empty = frozenset()
    eps_parent = max(1.0 - table.prob(empty, p) for p in positions)
    return eps_parent, eps_path, max(eps_parent, eps_path)


@dataclass
class BoundReport:
    k: int
    p_exact: float
    p_hat: float
    log_ratio: float
    ratio: float
    eps_parent: float
    eps_path: float
    eps: float
    lower_bound: float
    upper_bound: float
    holds: bool
    degenerate: bool = False
    failed_side: str | None = None
    q_kind: str = "uniform"

    def as_record(self):
        return asdict(self)


def check_bounds(model, parent, positions, tokens, Q=UNIFORM, cap=ENUMERATION_CAP):
    """Exact and single-pass probabilities together with the confidence-gap bracket."""
    positions, tokens = _check_transition(parent, positions, tokens)
    k = len(positions)
    log_p, eps_path, _, table = _enumerate(model, parent, positions, tokens, Q, cap)
    empty = frozenset()
    f_star = [table.prob(empty, p) for p in positions]
    eps_parent = max(1.0 - f for f in f_star)
    eps = max(eps_parent, eps_path)
    with np.errstate(divide="ignore"):
        log_hat = float(np.sum(np.log(f_star)))
    report = dict(
        k=k,
        p_exact=math.exp(log_p),
        p_hat=math.exp(log_hat),
        eps_parent=eps_parent,
        eps_path=eps_path,
        eps=eps,
        q_kind=Q.kind,
    )
    if eps >= 1.0 or log_hat == -math.inf:
        return BoundReport(
            log_ratio=math.nan, ratio=math.nan, lower_bound=0.0, upper_bound=math.inf,
            holds=True, degenerate=True, **report,
        )
    log_ratio = log_p - log_hat
    log_lower = k * math.log1p(-eps)
    log_upper = k * eps / (1.0 - eps)
    failed = None
    if log_ratio < log_lower - BOUND_TOL:
        failed = "lower"
    elif log_ratio > log_upper + BOUND_TOL:
        failed = "upper"
    return BoundReport(
        log_ratio=log_ratio,
        ratio=math.exp(log_ratio),
        lower_bound=math.exp(log_lower),
        upper_bound=math.exp(log_upper) if log_upper < 700 else math.inf,
        holds=failed is None,
        failed_side=failed,
        **report,
    )


# ----------------------------------------------------------------------
# randomised instances


@dataclass
class Instance:
    model: object
    parent: SequenceState
    positions: tuple
    tokens: tuple


def random_instance(rng, k, V, token_source="mixed", sharpness=(0.5, 4.0)):
    """A random toy model, parent state and child reveal of ``k`` tokens.

    ``token_source`` chooses child tokens: ``model`` samples them from the
    parent-state rows, ``argmax`` takes the most likely token, ``uniform``
    picks any non-MASK token, ``mixed`` picks one of model/uniform at random.
    """
    vocab = Vocabulary.toy(V)
    prompt_len = int(rng.integers(1, 4))
    extra = int(rng.integers(0, 3))
    L = k + extra
    cfg = PolicyConfig(
        vocab_size=V,
        max_len=prompt_len + L,
        d_model=8,
        n_layers=2,
        n_heads=2,
        d_hidden=16,
        out_gain_init=float(rng.uniform(*sharpness)),
        seed=int(rng.integers(2**31)),
    )
    model = PolicyModel(cfg, vocab)
    out_ids = vocab.output_ids
    prompt = [int(t) for t in rng.choice(out_ids, size=prompt_len)]
    comp = [vocab.mask_id] * L
    # decode a few non-transition slots in the parent
    order = [int(i) for i in rng.permutation(L)]
    positions = tuple(sorted(order[:k]))
    for i in order[k:]:
        if rng.random() < 0.5:
            comp[i] = int(rng.choice(out_ids))
    parent = SequenceState(tuple(prompt), tuple(comp), L, vocab.mask_id)
    if token_source == "mixed":
        token_source = "model" if rng.random() < 0.5 else "uniform"
    if token_source == "uniform":
        tokens = tuple(int(rng.choice(out_ids)) for _ in positions)
    else:
        grid = model.forward(parent)
        rows = grid[[prompt_len + p for p in positions]]
        if token_source == "argmax":
            tokens = tuple(int(np.argmax(r)) for r in rows)
        else:
            tokens = tuple(int(rng.choice(V, p=r)) for r in rows)
    return Instance(model, parent, positions, tokens)


def sharpening_sweep(model, instance_set, temperatures, Q=UNIFORM):
    """Mean |log ratio| and mean eps per sharpening temperature.

    ``instance_set`` holds ``(parent, positions, tokens)`` triples, or
    :class:`Instance` objects carrying their own model (``model`` may then be
    ``None``).  Temperatures must be strictly descending.
    """
    temperatures = [float(t) for t in temperatures]
    if any(b >= a for a, b in zip(temperatures, temperatures[1:])) or min(temperatures) <= 0:
        raise ValueError("temperatures must be positive and strictly descending")
    rows = []
    for temp in temperatures:
        errs, epss = [], []
        for inst in instance_set:
            if isinstance(inst, Instance):
                base, parent, pos, tok = inst.model, inst.parent, inst.positions, inst.tokens
            else:
                base = model
                parent, pos, tok = inst
            m = base if temp == 1.0 else SharpenedModel(base, temp)
            rep = check_bounds(m, parent, pos, tok, Q)
            errs.append(abs(rep.log_ratio) if not rep.degenerate else math.inf)
            epss.append(rep.eps)
        rows.append((temp, float(np.mean(errs)), float(np.mean(epss))))
    return rows


def is_self_consistent(inst):
    """True when each child token is the argmax of its row in every revelation context."""
    table = _PathTable(inst.model, inst.parent, inst.positions, inst.tokens)
    for r in range(len(inst.positions)):
        for revealed in itertools.combinations(inst.positions, r):
            g = table.grid(frozenset(revealed))
            for pos in inst.positions:
                if pos not in revealed and int(np.argmax(g[table.P + pos])) != table.target[pos]:
                    return False
    return True


def self_consistent_instance(rng, k, V, max_tries=1000):
    """A random instance whose reveal is the model's greedy choice along every order.

    Sharpening such a model pushes every path probability towards 1, which
    is the regime the confidence/error relationship speaks about.
    """
    for _ in range(max_tries):
        inst = random_instance(rng, k, V, token_source="argmax")
        if is_self_consistent(inst):
            return inst
    raise RuntimeError(f"no self-consistent instance found in {max_tries} draws")
