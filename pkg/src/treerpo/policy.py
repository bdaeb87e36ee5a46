"""A small bidirectional-transformer masked-diffusion policy.

The model reads ``prompt + completion`` where still-masked completion slots
hold the MASK token, and predicts a categorical distribution for every
position in one forward pass.  Decoding is block-wise: blocks of length
``b`` are filled left to right, and within the active block the most
confident masked positions are revealed first.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag


class ConfigurationError(ValueError):
    """Inconsistent shapes, lengths or divisibility in a configuration."""


class InvalidCallError(ValueError):
    """An operation was called on a state that cannot support it."""


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple
    mask_id: int
    pad_id: int

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        n = len(self.tokens)
        if n < 3:
            raise ConfigurationError("vocabulary needs at least 3 tokens")
        if not (0 <= self.mask_id < n and 0 <= self.pad_id < n):
            raise ConfigurationError("mask_id and pad_id must be valid indices")
        if self.mask_id == self.pad_id:
            raise ConfigurationError("mask_id and pad_id must differ")
        if len(set(self.tokens)) != n:
            raise ConfigurationError("duplicate tokens in vocabulary")

    @property
    def size(self):
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    @property
    def output_ids(self):
        """Token ids the policy may emit (everything except MASK)."""
        return np.array([i for i in range(self.size) if i != self.mask_id])

    def index(self, token):
        return self.tokens.index(token)

    def encode(self, text):
        lookup = {t: i for i, t in enumerate(self.tokens)}
        return [lookup[ch] for ch in text]

    def decode(self, ids):
        return "".join(self.tokens[i] for i in ids)

    @classmethod
    def toy(cls, size):
        """Vocabulary ``t0..t{size-3}`` plus PAD and MASK, for synthetic checks."""
        tokens = [f"t{i}" for i in range(size - 2)] + ["<pad>", "<mask>"]
        return cls(tuple(tokens), mask_id=size - 1, pad_id=size - 2)


@dataclass(frozen=True)
class SequenceState:
    """Prompt plus a completion whose masked slots hold ``mask_id``.

    Positions in the public API are completion-relative (``0..L-1``); the
    matching row of a distribution grid is ``len(prompt) + position``.
    """

    prompt: tuple
    completion: tuple
    block_length: int
    mask_id: int

    def __post_init__(self):
        object.__setattr__(self, "prompt", tuple(int(t) for t in self.prompt))
        object.__setattr__(self, "completion", tuple(int(t) for t in self.completion))
        L = len(self.completion)
        if self.block_length <= 0 or L % self.block_length != 0:
            raise ConfigurationError(
                f"block length {self.block_length} must divide completion length {L}"
            )
        # blocks before the first incomplete block must be fully decoded,
        # and nothing after it may be decoded
        active = self.active_block()
        if active is not None:
            b = self.block_length
            for j in range(active + 1, L // b):
                if any(t != self.mask_id for t in self.completion[j * b : (j + 1) * b]):
                    raise ConfigurationError(
                        f"block {j} has decoded slots while block {active} is incomplete"
                    )

    @classmethod
    def masked(cls, prompt, L, block_length, mask_id):
        return cls(tuple(prompt), (mask_id,) * L, block_length, mask_id)

    @property
    def length(self):
        return len(self.completion)

    @property
    def prompt_length(self):
        return len(self.prompt)

    @property
    def decoded_count(self):
        return sum(1 for t in self.completion if t != self.mask_id)

    @property
    def is_complete(self):
        return self.decoded_count == self.length

    def tokens(self):
        return np.array(self.prompt + self.completion, dtype=np.int64)

    def masked_positions(self):
        return [i for i, t in enumerate(self.completion) if t == self.mask_id]

    def active_block(self):
        """Index of the first block with a masked slot, or ``None`` when complete."""
        for i, t in enumerate(self.completion):
            if t == self.mask_id:
                return i // self.block_length
        return None

    def with_decoded(self, positions, tokens):
        comp = list(self.completion)
        for pos, tok in zip(positions, tokens):
            if comp[pos] != self.mask_id:
                raise InvalidCallError(f"position {pos} is already decoded")
            if tok == self.mask_id:
                raise InvalidCallError("cannot decode a slot to MASK")
            comp[pos] = int(tok)
        return SequenceState(self.prompt, tuple(comp), self.block_length, self.mask_id)


@dataclass
class PolicyConfig:
    vocab_size: int
    max_len: int = 64
    d_model: int = 32
    n_layers: int = 2
    n_heads: int = 2
    d_hidden: int = 64
    init_scale: float = 1.0
    out_gain_init: float = 0.0
    seed: int = 0
    rel_pos: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigurationError("d_model must be divisible by n_heads")
        if not 1 <= self.n_layers <= 4:
            raise ConfigurationError("n_layers must be between 1 and 4")


def init_parameters(cfg):
    """Scaled-uniform initialisation; the final gain is ``out_gain_init``."""
    rng = np.random.default_rng(cfg.seed)
    d, h, s = cfg.d_model, cfg.d_hidden, cfg.init_scale

    def unif(shape, fan_in):
        a = s * math.sqrt(3.0 / fan_in)
        return rng.uniform(-a, a, size=shape)

    params = {
        "tok_emb": unif((cfg.vocab_size, d), d),
        "pos_emb": unif((cfg.max_len, d), d),
    }
    for layer in range(cfg.n_layers):
        p = f"block{layer}."
        params[p + "ln1.g"] = np.ones(d)
        params[p + "ln1.b"] = np.zeros(d)
        for w in ("wq", "wk", "wv", "wo"):
            params[p + w] = unif((d, d), d)
        if cfg.rel_pos:
            params[p + "rel"] = np.zeros((2 * cfg.max_len - 1, cfg.n_heads))
        params[p + "ln2.g"] = np.ones(d)
        params[p + "ln2.b"] = np.zeros(d)
        params[p + "w1"] = unif((d, h), d)
        params[p + "c1"] = np.zeros(h)
        params[p + "w2"] = unif((h, d), h)
        params[p + "c2"] = np.zeros(d)
    params["ln_f.g"] = np.full(d, float(cfg.out_gain_init))
    return params


class PolicyModel:
    """Token + position embeddings, pre-norm attention blocks, tied output head.

    Parameters live in ``self.tensors`` as autograd leaves; ``parameters``
    exposes the underlying arrays.
    """

    def __init__(self, config, vocab, params=None):
        if config.vocab_size != vocab.size:
            raise ConfigurationError(
                f"config vocab_size {config.vocab_size} != vocabulary size {vocab.size}"
            )
        self.config = config
        self.vocab = vocab
        params = init_parameters(config) if params is None else params
        self.tensors = {k: ag.parameter(np.array(v, dtype=np.float64), name=k) for k, v in params.items()}
        self.forward_calls = 0
        self._out_ids = vocab.output_ids

    @property
    def parameters(self):
        return {k: t.data for k, t in self.tensors.items()}

    def copy(self):
        return PolicyModel(self.config, self.vocab, {k: v.copy() for k, v in self.parameters.items()})

    def load_parameters(self, params):
        for k, v in params.items():
            self.tensors[k].data = np.array(v, dtype=np.float64)

    # ------------------------------------------------------------------

    def _check(self, state):
        n = state.prompt_length + state.length
        if n > self.config.max_len:
            raise ConfigurationError(f"sequence length {n} exceeds max_len {self.config.max_len}")
        if state.mask_id != self.vocab.mask_id:
            raise ConfigurationError("state mask_id does not match the vocabulary")

    def logits(self, tokens):
        """Graph for the output logits over non-MASK tokens, shape ``(..., S, V-1)``."""
        cfg, P = self.config, self.tensors
        tokens = np.asarray(tokens, dtype=np.int64)
        S = tokens.shape[-1]
        lead = tokens.shape[:-1]
        nh, dh = cfg.n_heads, cfg.d_model // cfg.n_heads
        x = ag.embedding(P["tok_emb"], tokens) + ag.embedding(P["pos_emb"], np.arange(S))
        for layer in range(cfg.n_layers):
            p = f"block{layer}."
            a = ag.layer_norm(x, P[p + "ln1.g"], P[p + "ln1.b"])
            heads = []
            for w in ("wq", "wk", "wv"):
                t = ag.reshape(a @ P[p + w], lead + (S, nh, dh))
                heads.append(ag.transpose(t, tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2))))
            q, k, v = heads
            kt = ag.transpose(k, tuple(range(k.data.ndim - 2)) + (k.data.ndim - 1, k.data.ndim - 2))
            scores = (q @ kt) * (1.0 / math.sqrt(dh))
            if cfg.rel_pos:
                # learned per-head bias indexed by key offset j - i
                off = np.arange(S)[None, :] - np.arange(S)[:, None] + cfg.max_len - 1
                scores = scores + ag.transpose(ag.embedding(P[p + "rel"], off), (2, 0, 1))
            att = ag.softmax(scores)
            o = att @ v
            o = ag.transpose(o, tuple(range(len(lead))) + tuple(len(lead) + i for i in (1, 0, 2)))
            o = ag.reshape(o, lead + (S, cfg.d_model))
            x = x + o @ P[p + "wo"]
            m = ag.layer_norm(x, P[p + "ln2.g"], P[p + "ln2.b"])
            x = x + ag.gelu(m @ P[p + "w1"] + P[p + "c1"]) @ P[p + "w2"] + P[p + "c2"]
            x.name = f"block{layer}.out"
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        hf = xc * ag.reciprocal(ag.sqrt(var + 1e-5)) * P["ln_f.g"]
        head = ag.embedding(P["tok_emb"], self._out_ids)
        out = hf @ ag.transpose(head)
        out.name = "logits"
        return out

    def log_probs(self, state, temperature=1.0):
        """Log-probabilities over the non-MASK tokens, as a recorded graph ``(S, V-1)``."""
        self._check(state)
        z = self.logits(state.tokens())
        if temperature != 1.0:
            z = z * (1.0 / temperature)
        lp = ag.log_softmax(z)
        lp.name = "log_probs"
        return lp

    def expand(self, sub):
        """Scatter ``(..., V-1)`` values over non-MASK columns into a ``(..., V)`` array."""
        full = np.zeros(sub.shape[:-1] + (self.vocab.size,))
        full[..., self._out_ids] = sub
        return full

    def column(self, token):
        """Column of ``token`` inside the non-MASK output block."""
        if token == self.vocab.mask_id:
            raise InvalidCallError("MASK has no output column")
        return token if token < self.vocab.mask_id else token - 1

    def forward(self, state):
        """Distribution grid ``(P+L, V)``; the MASK column is identically zero."""
        self._check(state)
        self.forward_calls += 1
        with ag.no_grad():
            lp = ag.log_softmax(self.logits(state.tokens())).data
        return self.expand(np.exp(lp))


class SharpenedModel:
    """View of a policy whose logits are divided by ``temperature``."""

    def __init__(self, model, temperature):
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.model = model
        self.temperature = float(temperature)
        self.vocab = model.vocab
        self.config = model.config

    @property
    def forward_calls(self):
        return self.model.forward_calls

    def forward(self, state):
        self.model._check(state)
        self.model.forward_calls += 1
        with ag.no_grad():
            z = self.model.logits(state.tokens()).data / self.temperature
        z = z - z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        return self.model.expand(p / p.sum(axis=-1, keepdims=True))


# ----------------------------------------------------------------------
# decoding


def tempered_row(row, temperature):
    """Row raised to ``1/temperature`` and renormalised (zeros stay zero)."""
    with np.errstate(divide="ignore"):
        z = np.log(row) / temperature
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def sample_row(row, temperature, rng):
    """Temperature 0 is argmax (lowest index wins ties); otherwise inverse-CDF."""
    if temperature == 0:
        return int(np.argmax(row))
    p = tempered_row(row, temperature)
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def select_positions(grid, state, count):
    """The ``count`` most confident masked positions of the active block.

    Confidence is the row maximum; ties go to the lower position.
    """
    block = state.active_block()
    if block is None:
        raise InvalidCallError("no masked slots remain")
    b = state.block_length
    cand = [i for i in range(block * b, (block + 1) * b) if state.completion[i] == state.mask_id]
    if count > len(cand):
        raise InvalidCallError(
            f"asked to decode {count} tokens but the active block has {len(cand)} masked slots"
        )
    P = state.prompt_length
    conf = np.array([grid[P + i].max() for i in cand])
    order = np.lexsort((np.array(cand), -conf))
    return sorted(cand[j] for j in order[:count])


def denoise_step(model, state, tokens_to_decode, temperature, rng):
    """Reveal ``tokens_to_decode`` slots of the active block.

    Positions are ranked by untempered confidence; tokens are then drawn in
    ascending position order, one uniform draw per position.
    """
    if tokens_to_decode < 1:
        raise InvalidCallError("tokens_to_decode must be positive")
    if state.active_block() is None:
        raise InvalidCallError("no masked slots remain")
    grid = model.forward(state)
    positions = select_positions(grid, state, tokens_to_decode)
    P = state.prompt_length
    toks = [sample_row(grid[P + i], temperature, rng) for i in positions]
    return state.with_decoded(positions, toks)


def check_decoding_config(L, N, b):
    if L <= 0 or N <= 0 or b <= 0:
        raise ConfigurationError("L, N and b must be positive")
    if L % N:
        raise ConfigurationError(f"L={L} is not divisible by N={N}")
    if L % b:
        raise ConfigurationError(f"b={b} does not divide L={L}")
    if b % (L // N):
        raise ConfigurationError(
            f"each block of {b} tokens needs a whole number of steps at {L // N} tokens per step"
        )


def generate(model, prompt, L, N, b, temperature, rng):
    """Full block-wise generation: ``N`` denoise steps of ``L/N`` tokens each."""
    check_decoding_config(L, N, b)
    state = SequenceState.masked(prompt, L, b, model.vocab.mask_id)
    for _ in range(N):
        state = denoise_step(model, state, L // N, temperature, rng)
    return state


# ----------------------------------------------------------------------
# distribution utilities


def masked_entropy(grid, positions):
    """Mean Shannon entropy (nats) over the given grid rows."""
    positions = list(positions)
    if not positions:
        raise InvalidCallError("positions must be nonempty")
    rows = np.asarray(grid)[positions]
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(rows > 0, -rows * np.log(rows), 0.0)
    return float(terms.sum(axis=1).mean())


def positionwise_kl(grid_a, grid_b, positions):
    """Mean over rows of KL(a || b); ``inf`` when b has a zero where a does not."""
    positions = list(positions)
    if not positions:
        raise InvalidCallError("positions must be nonempty")
    a = np.asarray(grid_a)[positions]
    b = np.asarray(grid_b)[positions]
    if np.any((a > 0) & (b <= 0)):
        return math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(a > 0, a * (np.log(a) - np.log(b)), 0.0)
    return float(max(terms.sum(axis=1).mean(), 0.0))


# ----------------------------------------------------------------------
# gradients


def compute_gradients(model, loss):
    """Backpropagate a scalar loss graph into per-parameter gradient arrays.

    Parameter ``.grad`` slots are cleared afterwards so graphs do not leak
    into each other.
    """
    loss = ag.as_tensor(loss)
    ag.check_finite(loss)
    for t in model.tensors.values():
        t.grad = None
    if loss.requires_grad:
        loss.backward()
    grads = {}
    for name, t in model.tensors.items():
        g = np.zeros_like(t.data) if t.grad is None else np.array(t.grad)
        if not np.all(np.isfinite(g)):
            raise ag.NumericError(f"non-finite gradient for parameter {name}")
        grads[name] = g
        t.grad = None
    return grads


# ----------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, model, extra=None):
    """Write parameters (little-endian float64) plus a JSON header to ``.npz``."""
    meta = {
        "format": "treerpo-checkpoint",
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "vocab": {"tokens": list(model.vocab.tokens), "mask_id": model.vocab.mask_id, "pad_id": model.vocab.pad_id},
        "extra": extra or {},
    }
    arrays = {f"param/{k}": np.asarray(v, dtype="<f8") for k, v in model.parameters.items()}
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        if meta.get("format") != "treerpo-checkpoint":
            raise ConfigurationError(f"{path} is not a checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {meta['version']}")
        params = {k[len("param/"):]: np.array(data[k], dtype=np.float64) for k in data.files if k.startswith("param/")}
    v = meta["vocab"]
    vocab = Vocabulary(tuple(v["tokens"]), v["mask_id"], v["pad_id"])
    model = PolicyModel(PolicyConfig(**meta["config"]), vocab, params)
    model.checkpoint_extra = meta.get("extra", {})
    return model
