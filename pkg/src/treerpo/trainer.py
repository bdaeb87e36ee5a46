"""Training loop, evaluation, bound certification and ablation runs.

One outer step: freeze a copy of the policy as the rollout policy, sample
a prompt, build its rollout tree, score and average rewards, then take
``mu`` Adam steps, each on one parent group drawn without replacement.
"""

from __future__ import annotations

import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, fields, replace

import numpy as np

from . import autograd as ag
from .estimator import ORDER_KINDS, check_bounds, random_instance, self_consistent_instance
from .objective import MODES, ObjectiveConfig, ScheduleConfig, lambda_schedule, tau_schedule, total_loss
from .policy import (
    ConfigurationError,
    PolicyConfig,
    PolicyModel,
    SequenceState,
    SharpenedModel,
    compute_gradients,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .tasks import VOCAB, TaskSpec, max_prompt_length, sample_instance
from .tree import TreeConfig, build_tree, compute_advantages, propagate_rewards, tree_cost

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """A non-finite loss stopped training; ``checkpoint`` holds the last good parameters."""

    def __init__(self, msg, checkpoint=None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    # task
    task: str = "copy"
    L: int = 16
    N: int = 8
    b: int = 8
    givens: int = 12
    n_numbers: int = 3
    max_operand: int = 9
    payload_len: int = 16
    alphabet: str = "abcdefgh"
    binary: bool = False
    # tree
    B: int = 4
    H: int = 2
    rollout_temperature: float = 1.0
    # schedules
    tau_max: float = 2.0
    sched_beta: float = 0.7
    lambda_max: float = 3e-3
    gamma: float = 3.0
    T: int = 100
    # objective
    clip_eps: float = 0.2
    beta_kl: float = 0.01
    mu: int = 4
    mode: str = "full"
    prompts_per_step: int = 1
    # optimiser
    lr: float = 3e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # model
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_hidden: int = 64
    out_gain_init: float = 0.0
    rel_pos: bool = False
    # supervised warm start before RL (0 disables it)
    warmstart_steps: int = 0
    warmstart_lr: float = 3e-3
    # run
    seed: int = 0
    out_dir: str | None = None
    checkpoint_every: int = 0

    def task_spec(self):
        return TaskSpec(
            kind=self.task, L=self.L, N=self.N, b=self.b, givens=self.givens,
            n_numbers=self.n_numbers, max_operand=self.max_operand,
            payload_len=self.payload_len, alphabet=self.alphabet, binary=self.binary,
        )

    def tree_config(self):
        return TreeConfig(B=self.B, H=self.H, N=self.N, L=self.L, b=self.b)

    def objective_config(self):
        sched = ScheduleConfig(
            tau_max=self.tau_max, sched_beta=self.sched_beta, lambda_max=self.lambda_max,
            gamma=self.gamma, T=self.T, reverse=self.mode == "reverse_schedule",
        )
        return ObjectiveConfig(schedule=sched, beta_kl=self.beta_kl, clip_eps=self.clip_eps)

    def policy_config(self, seed):
        spec = self.task_spec()
        return PolicyConfig(
            vocab_size=VOCAB.size, max_len=max_prompt_length(spec) + self.L,
            d_model=self.d_model, n_layers=self.n_layers, n_heads=self.n_heads,
            d_hidden=self.d_hidden, out_gain_init=self.out_gain_init, seed=seed,
            rel_pos=self.rel_pos,
        )

    def validate(self):
        try:
            self.task_spec()
            self.tree_config().check()
            self.objective_config()
        except ValueError as e:
            raise ConfigurationError(str(e)) from e
        if self.mode not in MODES:
            raise ConfigurationError(f"mode must be one of {MODES}")
        if self.mu < 1 or self.T < 1 or self.prompts_per_step < 1:
            raise ConfigurationError("mu, T and prompts_per_step must be at least 1")

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


class Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, model, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(g)
                self.v[name] = np.zeros_like(g)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p = model.tensors[name]
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def make_streams(seed):
    """Independent generators for init, prompts, rollout, group sampling and warm start."""
    ss = np.random.SeedSequence(seed)
    init, prompts, rollout, groups, warm = ss.spawn(5)
    return (
        int(init.generate_state(1)[0]),
        np.random.default_rng(prompts),
        np.random.default_rng(rollout),
        np.random.default_rng(groups),
        np.random.default_rng(warm),
    )


def masked_denoising_loss(model, inst, L, b, rng):
    """Cross-entropy on a random subset of masked answer slots.

    A masking ratio ``r ~ U(0, 1]`` is drawn, each completion slot is masked
    with probability ``r`` (at least one slot), and the loss is the mean
    negative log-likelihood of the solution tokens at the masked slots.  The
    visible slots are decoded with the solution, so the model also sees
    partially decoded contexts.
    """
    sol = inst.solution_tokens()
    r = 1.0 - rng.random()
    hide = rng.random(L) < r
    if not hide.any():
        hide[int(rng.integers(L))] = True
    mask_id = model.vocab.mask_id
    comp = tuple(mask_id if h else int(t) for h, t in zip(hide, sol))
    state = SequenceState(tuple(inst.prompt_tokens), comp, L, mask_id)
    lp = model.log_probs(state)
    P = state.prompt_length
    rows = [P + i for i in range(L) if hide[i]]
    cols = [model.column(sol[i]) for i in range(L) if hide[i]]
    return -ag.gather(lp, rows, cols).mean()


def warm_start(model, spec, steps, lr, rng):
    """Supervised masked-denoising steps on freshly sampled instances; returns the losses."""
    opt = Adam(lr)
    losses = []
    for _ in range(steps):
        inst = sample_instance(spec, rng)
        loss = masked_denoising_loss(model, inst, spec.L, spec.b, rng)
        opt.step(model, compute_gradients(model, loss))
        losses.append(loss.item())
    return losses


@dataclass
class TrainResult:
    model: PolicyModel
    metrics: list
    checkpoint: str | None = None


def _checkpoint_path(cfg, name):
    if not cfg.out_dir:
        return None
    os.makedirs(cfg.out_dir, exist_ok=True)
    return os.path.join(cfg.out_dir, name)


# warm-started parameters keyed by everything that determines them; ablation
# arms sharing a seed reuse one warm start
_WARM_CACHE = {}


def train(cfg, on_step=None):
    """Run ``cfg.T`` outer steps and return the trained model and metrics.

    Metrics go to ``out_dir/metrics.jsonl`` when ``out_dir`` is set.
    """
    cfg.validate()
    spec, tcfg, ocfg = cfg.task_spec(), cfg.tree_config(), cfg.objective_config()
    init_seed, prompt_rng, rollout_rng, group_rng, warm_rng = make_streams(cfg.seed)
    model = PolicyModel(cfg.policy_config(init_seed), VOCAB)
    if cfg.warmstart_steps:
        key = json.dumps([asdict(model.config), asdict(spec), cfg.warmstart_steps, cfg.warmstart_lr, cfg.seed])
        if key not in _WARM_CACHE:
            warm_start(model, spec, cfg.warmstart_steps, cfg.warmstart_lr, warm_rng)
            if len(_WARM_CACHE) >= 8:
                _WARM_CACHE.pop(next(iter(_WARM_CACHE)))
            _WARM_CACHE[key] = {k: v.copy() for k, v in model.parameters.items()}
        model.load_parameters(_WARM_CACHE[key])
    model_ref = model.copy()
    opt = Adam(cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
    metrics = []
    metrics_fh = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        metrics_fh = open(os.path.join(cfg.out_dir, "metrics.jsonl"), "w")
    extra = {"train_config": asdict(cfg)}
    try:
        for t in range(cfg.T):
            t0 = time.perf_counter()
            model_old = model.copy()
            trees, queues = [], []
            for j in range(cfg.prompts_per_step):
                inst = sample_instance(spec, prompt_rng)
                tree = build_tree(model_old, inst.prompt_tokens, tcfg, cfg.rollout_temperature, rollout_rng, prompt_id=(t, j))
                propagate_rewards(tree, inst.verifier)
                groups = compute_advantages(tree)
                live = [g for g in groups if not g.all_zero]
                trees.append((tree, len(groups), len(live)))
                if live:
                    queues.append([live[i] for i in group_rng.permutation(len(live))])
            t1 = time.perf_counter()

            sums = {"pg_term": 0.0, "kl_term": 0.0, "distill_term": 0.0, "div_term": 0.0, "total": 0.0}
            updates = 0
            good = {k: v.copy() for k, v in model.parameters.items()}
            for n in range(cfg.mu if queues else 0):
                # one group from every tree, each tree cycling through its groups without replacement
                batch = [q[n % len(q)] for q in queues]
                try:
                    grads = None
                    for group in batch:
                        lb = total_loss(group, model, model_ref, t, ocfg, cfg.mode)
                        g = compute_gradients(model, lb.graph)
                        grads = g if grads is None else {k: grads[k] + g[k] for k in grads}
                        for k in sums:
                            sums[k] += getattr(lb, k) / len(batch)
                except ag.NumericError as e:
                    model.load_parameters(good)
                    path = _checkpoint_path(cfg, "last_good.npz")
                    if path:
                        save_checkpoint(path, model, extra)
                    raise TrainingAborted(f"step {t}: {e}", path) from e
                opt.step(model, {k: v / len(batch) for k, v in grads.items()})
                updates += 1
            t2 = time.perf_counter()

            leaves = [n.reward for tree, _, _ in trees for n in tree.leaves()]
            stats = [tree.stats for tree, _, _ in trees]
            rec = {
                "step": t,
                "mean_tree_reward": float(np.mean(leaves)),
                "root_reward": [tree.root.reward for tree, _, _ in trees],
                "max_leaf_reward": float(max(leaves)),
                "entropy": float(np.mean([s["entropy"] for s in stats])),
                "tau": tau_schedule(t, ocfg.schedule),
                "lambda": lambda_schedule(t, ocfg.schedule),
                "updates": updates,
                "live_groups": sum(n_live for _, _, n_live in trees),
                "skipped_groups": sum(n - n_live for _, n, n_live in trees),
                "denoise_calls": sum(s["denoise_steps"] for s in stats),
                "estimate_passes": sum(s["estimate_passes"] for s in stats),
                **{k: (v / updates if updates else 0.0) for k, v in sums.items()},
                "rollout_seconds": t1 - t0,
                "update_seconds": t2 - t1,
            }
            metrics.append(rec)
            if metrics_fh:
                metrics_fh.write(json.dumps(rec) + "\n")
                metrics_fh.flush()
            if on_step:
                on_step(rec, model)
            if cfg.checkpoint_every and (t + 1) % cfg.checkpoint_every == 0 and t + 1 < cfg.T:
                path = _checkpoint_path(cfg, f"step_{t + 1:06d}.npz")
                if path:
                    save_checkpoint(path, model, extra)
    finally:
        if metrics_fh:
            metrics_fh.close()
    final = _checkpoint_path(cfg, "final.npz")
    if final:
        save_checkpoint(final, model, extra)
    return TrainResult(model, metrics, final)


TIMING_KEYS = ("rollout_seconds", "update_seconds")


def evaluate(model, spec, n_instances, temperature=0.0, seed=10_000):
    """pass@1: share of instances whose generated completion earns reward 1.

    ``model`` may be a checkpoint path.  Instance ``i`` uses seed ``seed + i``.
    """
    if n_instances < 1:
        raise ValueError("n_instances must be at least 1")
    if isinstance(model, (str, os.PathLike)):
        model = load_checkpoint(model)
    if model.vocab != VOCAB:
        raise ConfigurationError("checkpoint vocabulary does not match the task vocabulary")
    hits = 0
    for i in range(n_instances):
        inst = sample_instance(spec, seed + i)
        rng = np.random.default_rng(seed + i)
        state = generate(model, inst.prompt_tokens, spec.L, spec.N, spec.b, temperature, rng)
        hits += inst.verifier(state.completion) == 1.0
    return hits / n_instances


@dataclass
class BoundsConfig:
    n_instances: int = 1000
    k_min: int = 2
    k_max: int = 5
    v_min: int = 3
    v_max: int = 6
    seed: int = 0
    sharpen: float | None = None


def verify_bounds(cfg, kinds=ORDER_KINDS):
    """Check the ratio bracket on ``n_instances`` random draws for each order kind.

    Returns ``(reports, summary)``.  With ``sharpen`` set, instances are
    self-consistent and the model is sharpened by that temperature.
    """
    rng = np.random.default_rng(cfg.seed)
    reports = []
    for Q in kinds:
        for _ in range(cfg.n_instances):
            k = int(rng.integers(cfg.k_min, cfg.k_max + 1))
            V = int(rng.integers(cfg.v_min, cfg.v_max + 1))
            if cfg.sharpen is None:
                inst = random_instance(rng, k, V)
                model = inst.model
            else:
                inst = self_consistent_instance(rng, k, V)
                model = SharpenedModel(inst.model, cfg.sharpen)
            rep = check_bounds(model, inst.parent, inst.positions, inst.tokens, Q)
            rec = rep.as_record()
            rec["V"] = V
            reports.append(rec)
    finite = [r for r in reports if not r["degenerate"]]
    worst = max(finite, key=lambda r: abs(r["log_ratio"]), default=None)
    summary = {
        "count": len(reports),
        "violations": sum(1 for r in reports if not r["holds"]),
        "degenerate": len(reports) - len(finite),
        "max_abs_log_ratio": abs(worst["log_ratio"]) if worst else 0.0,
        "worst_instance_log_upper": (worst["k"] * worst["eps"] / (1 - worst["eps"])) if worst else 0.0,
    }
    return reports, summary


ABLATION_MODES = ("full", "no_distill", "diversity", "reverse_schedule")


def phase_mean(metrics, key, start, stop):
    vals = [m[key] for m in metrics[start:stop]]
    return float(np.mean(vals))


def summarize_run(metrics, final_frac=0.1, early_frac=0.2):
    """Final-phase reward/entropy and early-phase reward slope of one metrics stream."""
    T = len(metrics)
    n_final = max(1, int(round(final_frac * T)))
    n_early = min(T, max(2, int(round(early_frac * T))))
    rewards = np.array([m["mean_tree_reward"] for m in metrics])
    slope = float(np.polyfit(np.arange(n_early), rewards[:n_early], 1)[0]) if n_early >= 2 else 0.0
    return {
        "final_reward": phase_mean(metrics, "mean_tree_reward", T - n_final, T),
        "final_entropy": phase_mean(metrics, "entropy", T - n_final, T),
        "early_slope": slope,
    }


def ablate(cfg, seeds=(0,), modes=ABLATION_MODES):
    """Run every mode under identical seeds and budget.

    Returns ``(runs, table)``: ``runs[mode][seed]`` is a metrics list and
    ``table[mode]`` averages :func:`summarize_run` over seeds.
    """
    runs, table = {}, {}
    for mode in modes:
        runs[mode] = {}
        for seed in seeds:
            out_dir = os.path.join(cfg.out_dir, mode, f"seed{seed}") if cfg.out_dir else None
            res = train(replace(cfg, mode=mode, seed=seed, out_dir=out_dir))
            runs[mode][seed] = res.metrics
        per_seed = [summarize_run(m) for m in runs[mode].values()]
        table[mode] = {k: float(np.mean([s[k] for s in per_seed])) for k in per_seed[0]}
    return runs, table
