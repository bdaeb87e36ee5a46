"""
Rollout trees on the copy task
==============================

Every node branches into B continuations, each continuation runs N/H
denoise steps, and leaves are scored by the task verifier.  Rewards are
averaged upward and each edge gets the advantage child minus parent.
"""

import numpy as np

from treerpo.policy import PolicyModel
from treerpo.tasks import VOCAB, TaskSpec, sample_instance
from treerpo.trainer import TrainConfig
from treerpo.tree import build_tree, compute_advantages, propagate_rewards, tree_cost

cfg = TrainConfig(task="copy", payload_len=8, L=8, N=4, b=4, alphabet="ab", B=3, H=2, out_gain_init=1.0)
spec = cfg.task_spec()
model = PolicyModel(cfg.policy_config(seed=0), VOCAB)
inst = sample_instance(spec, 0)
print("prompt:", VOCAB.decode(inst.prompt_tokens))

tree = build_tree(model, inst.prompt_tokens, cfg.tree_config(), 1.0, np.random.default_rng(1))
propagate_rewards(tree, inst.verifier)
groups = compute_advantages(tree)


def show(node, indent=""):
    text = VOCAB.decode(node.state.completion)
    adv = "" if node.advantage_exact is None else f"  A={str(node.advantage_exact):>6}"
    print(f"{indent}{text}  R={str(node.reward_exact):>5}{adv}")
    for child in node.children:
        show(child, indent + "    ")


show(tree.root)

# sibling advantages cancel exactly, because rewards are kept as fractions
print("\nsum of sibling advantages:", [str(sum(c.advantage_exact for c in g.children)) for g in groups])
print("cost of this tree:", tree_cost(cfg.tree_config()))
