"""B-ary rollout trees over denoising trajectories.

Each edge is one *tree step*: ``s = N/H`` consecutive denoise steps taken
from the parent state.  Leaf rewards come from a verifier and are averaged
bottom-up; the advantage of an edge is the child reward minus the parent
reward.  Rewards are kept as exact rationals so the averaging identities
hold with no rounding; float views are exposed alongside.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .objective import ChildRecord, ParentGroup
from .policy import ConfigurationError, SequenceState, denoise_step, masked_entropy


class SequencingError(RuntimeError):
    """An operation ran before the tree data it depends on was populated."""


class ContractError(ValueError):
    """An input violated a documented contract (e.g. a reward outside [0, 1])."""


@dataclass(frozen=True)
class TreeConfig:
    B: int
    H: int
    N: int
    L: int
    b: int

    @property
    def s(self):
        return self.N // self.H

    @property
    def k(self):
        """Tokens decoded per tree step."""
        return self.L // self.H

    @property
    def tokens_per_step(self):
        return self.L // self.N

    def check(self):
        ok, msg = validate_block_alignment(self)
        if not ok:
            raise ConfigurationError(msg)


def validate_block_alignment(cfg):
    """Return ``(True, "ok")`` or ``(False, diagnostic)`` naming the failed divisibility."""
    if cfg.B < 2:
        return False, f"branch factor B={cfg.B} must be at least 2"
    if cfg.H < 1:
        return False, f"tree height H={cfg.H} must be at least 1"
    if min(cfg.N, cfg.L, cfg.b) < 1:
        return False, "N, L and b must be positive"
    if cfg.L % cfg.b:
        return False, f"block length b={cfg.b} does not divide L={cfg.L}"
    blocks = cfg.L // cfg.b
    if blocks % cfg.H:
        return False, f"H={cfg.H} does not divide the number of blocks L/b={blocks}"
    if cfg.N % cfg.H:
        return False, f"H={cfg.H} does not divide the denoise step count N={cfg.N}"
    if cfg.L % cfg.N:
        return False, f"L={cfg.L} tokens are not a whole number per step over N={cfg.N} steps"
    if cfg.b % (cfg.L // cfg.N):
        return False, f"block length b={cfg.b} is not a whole number of steps at L/N={cfg.L // cfg.N} tokens per step"
    return True, "ok"


def tree_cost(cfg):
    """Tree steps, denoise steps and update-time forward passes for one prompt."""
    B, H = cfg.B, cfg.H
    tree_steps = B * (B**H - 1) // (B - 1)
    return {
        "tree_steps": tree_steps,
        "denoise_steps": tree_steps * cfg.N // H,
        "forward_passes_for_update": tree_steps,
    }


@dataclass(eq=False)
class TreeNode:
    state: SequenceState
    depth: int = 0
    node_id: int = 0
    parent: TreeNode | None = field(default=None, repr=False)
    children: list = field(default_factory=list, repr=False)
    decoded_positions: tuple = ()
    decoded_tokens: tuple = ()
    old_probs: np.ndarray | None = None
    reward_exact: Fraction | None = None
    advantage_exact: Fraction | None = None

    @property
    def is_leaf(self):
        return not self.children

    @property
    def reward(self):
        return None if self.reward_exact is None else float(self.reward_exact)

    @property
    def advantage(self):
        return None if self.advantage_exact is None else float(self.advantage_exact)


@dataclass
class RolloutTree:
    root: TreeNode
    config: TreeConfig
    prompt_id: object = None
    stats: dict = field(default_factory=dict)

    def nodes(self):
        """All nodes, parents before children (breadth-first)."""
        out, frontier = [], [self.root]
        while frontier:
            out.extend(frontier)
            frontier = [c for n in frontier for c in n.children]
        return out

    def leaves(self):
        return [n for n in self.nodes() if n.is_leaf]

    def internal_nodes(self):
        return [n for n in self.nodes() if not n.is_leaf]


def _expand(model_old, parent, cfg, temperature, rng, counts):
    state = parent.state
    for _ in range(cfg.s):
        state = denoise_step(model_old, state, cfg.tokens_per_step, temperature, rng)
        counts["denoise_steps"] += 1
    new = [i for i in parent.state.masked_positions() if state.completion[i] != state.mask_id]
    toks = [state.completion[i] for i in new]
    # one single-pass estimate per edge, on the parent state
    grid = model_old.forward(parent.state)
    counts["estimate_passes"] += 1
    P = state.prompt_length
    old = np.array([grid[P + i, t] for i, t in zip(new, toks)])
    counts["entropy_sum"] += masked_entropy(grid, [P + i for i in new])
    return TreeNode(
        state=state,
        depth=parent.depth + 1,
        parent=parent,
        decoded_positions=tuple(new),
        decoded_tokens=tuple(toks),
        old_probs=old,
    )


def build_tree(model_old, prompt, cfg, temperature, rng, prompt_id=None):
    """Expand every node at depth < H into B independent continuations.

    Siblings draw from independent generator streams spawned from ``rng``.
    """
    cfg.check()
    root = TreeNode(SequenceState.masked(prompt, cfg.L, cfg.b, model_old.vocab.mask_id))
    counts = {"denoise_steps": 0, "estimate_passes": 0, "entropy_sum": 0.0}
    frontier, next_id = [root], 1
    for _ in range(cfg.H):
        nxt = []
        for node in frontier:
            for child_rng in rng.spawn(cfg.B):
                child = _expand(model_old, node, cfg, temperature, child_rng, counts)
                child.node_id = next_id
                next_id += 1
                node.children.append(child)
                nxt.append(child)
        frontier = nxt
    counts["tree_steps"] = next_id - 1
    # mean old-policy entropy at the positions each edge decoded
    counts["entropy"] = counts.pop("entropy_sum") / counts["tree_steps"]
    return RolloutTree(root, cfg, prompt_id, counts)


def propagate_rewards(tree, verifier):
    """Score leaves with ``verifier`` and average rewards up to the root."""
    for node in reversed(tree.nodes()):
        if node.is_leaf:
            if not node.state.is_complete:
                raise SequencingError(f"leaf {node.node_id} is not fully decoded")
            r = float(verifier(node.state.completion))
            if not 0.0 <= r <= 1.0:
                raise ContractError(f"verifier returned {r} outside [0, 1]")
            node.reward_exact = Fraction(r)
        else:
            node.reward_exact = sum((c.reward_exact for c in node.children), Fraction(0)) / len(node.children)


def compute_advantages(tree):
    """Set ``A = R_child - R_parent`` on every edge; return one group per parent."""
    groups = []
    for node in tree.internal_nodes():
        if node.reward_exact is None or any(c.reward_exact is None for c in node.children):
            raise SequencingError("rewards have not been propagated")
        children = []
        for c in node.children:
            c.advantage_exact = c.reward_exact - node.reward_exact
            children.append(ChildRecord(c.decoded_tokens, c.old_probs, c.advantage, c.advantage_exact))
        groups.append(
            ParentGroup(
                parent_state=node.state,
                positions=node.children[0].decoded_positions,
                children=children,
                parent_id=node.node_id,
            )
        )
    return groups


def dump_tree(tree, fh):
    """One JSON record per node: id, parent, decoded tokens, reward, advantage, old_probs."""
    for node in tree.nodes():
        rec = {
            "id": node.node_id,
            "parent": None if node.parent is None else node.parent.node_id,
            "depth": node.depth,
            "positions": list(node.decoded_positions),
            "tokens": list(node.decoded_tokens),
            "reward": node.reward,
            "advantage": node.advantage,
            "old_probs": None if node.old_probs is None else [float(x) for x in node.old_probs],
        }
        fh.write(json.dumps(rec) + "\n")


def load_tree_records(fh):
    return [json.loads(line) for line in fh if line.strip()]
