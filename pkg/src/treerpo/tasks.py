"""Synthetic tasks with verifiable rewards: 4x4 Sudoku, Countdown, copy, sort.

All tasks share one character-level vocabulary.  A completion is ``L``
tokens; answers shorter than ``L`` are right-padded with PAD.
"""

from __future__ import annotations

import ast
import json
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import numpy as np

from .policy import Vocabulary

PAD = "_"
MASK = "?"
SYMBOLS = "0123456789abcdefghnos+-*/()=:,.#"

VOCAB = Vocabulary(tuple(SYMBOLS) + (PAD, MASK), mask_id=len(SYMBOLS) + 1, pad_id=len(SYMBOLS))

KINDS = ("sudoku4", "countdown", "copy", "sort")


@dataclass
class TaskSpec:
    kind: str
    L: int = 16
    N: int = 8
    b: int = 8
    givens: int = 12
    n_numbers: int = 3
    max_operand: int = 9
    payload_len: int = 16
    alphabet: str = "abcdefgh"
    binary: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.kind == "sudoku4" and not 0 <= self.givens <= 16:
            raise ValueError("givens must be in [0, 16]")
        if self.kind in ("copy", "sort") and not 1 <= self.payload_len <= self.L:
            raise ValueError("payload_len must be in [1, L]")
        if self.kind == "sudoku4" and self.L < 16:
            raise ValueError("sudoku4 needs L >= 16")
        if self.kind == "countdown" and self.n_numbers < 2:
            raise ValueError("countdown needs at least two numbers")


@dataclass
class TaskInstance:
    kind: str
    prompt_tokens: list
    metadata: dict
    seed: int | None = None
    spec: TaskSpec | None = field(default=None, repr=False)

    def verifier(self, completion):
        return verify(completion, self)

    def solution_tokens(self):
        return encode_answer(self.metadata["solution"], self.spec.L if self.spec else len(self.metadata["solution"]))


def encode_answer(text, L):
    if len(text) > L:
        raise ValueError(f"answer {text!r} does not fit in {L} tokens")
    return VOCAB.encode(text + PAD * (L - len(text)))


def _text(completion):
    toks = [int(t) for t in completion]
    if any(t == VOCAB.mask_id for t in toks):
        return None
    return VOCAB.decode(toks)


# ----------------------------------------------------------------------
# sudoku


def _sudoku_valid(grid):
    rows = [grid[4 * r : 4 * r + 4] for r in range(4)]
    cols = [grid[c::4] for c in range(4)]
    boxes = [
        [grid[4 * (2 * br + i) + 2 * bc + j] for i in range(2) for j in range(2)]
        for br in range(2)
        for bc in range(2)
    ]
    return all(sorted(g) == [1, 2, 3, 4] for g in rows + cols + boxes)


def _sudoku_solutions(puzzle, limit=2):
    """Backtracking solver; ``puzzle`` uses 0 for blanks.  Stops after ``limit``."""
    grid = list(puzzle)
    found = []

    def ok(i, d):
        r, c = divmod(i, 4)
        if any(grid[4 * r + j] == d for j in range(4)):
            return False
        if any(grid[4 * j + c] == d for j in range(4)):
            return False
        br, bc = 2 * (r // 2), 2 * (c // 2)
        return all(grid[4 * (br + a) + bc + e] != d for a in range(2) for e in range(2))

    def solve():
        if len(found) >= limit:
            return
        try:
            i = grid.index(0)
        except ValueError:
            found.append(tuple(grid))
            return
        for d in range(1, 5):
            if ok(i, d):
                grid[i] = d
                solve()
                grid[i] = 0

    solve()
    return found


def _all_sudoku_grids():
    return _sudoku_solutions([0] * 16, limit=10_000)


_GRIDS = None


def _sample_sudoku(spec, rng):
    global _GRIDS
    if _GRIDS is None:
        _GRIDS = _all_sudoku_grids()
    solution = _GRIDS[int(rng.integers(len(_GRIDS)))]
    # remove cells one at a time, keeping the solution unique
    order = [int(i) for i in rng.permutation(16)]
    puzzle = list(solution)
    for i in order:
        if sum(1 for x in puzzle if x) <= spec.givens:
            break
        keep = puzzle[i]
        puzzle[i] = 0
        if len(_sudoku_solutions(puzzle)) != 1:
            puzzle[i] = keep
    text = "".join(str(x) if x else "." for x in puzzle)
    return VOCAB.encode("s:" + text + "="), {
        "puzzle": text,
        "givens": sum(1 for x in puzzle if x),
        "solution": "".join(map(str, solution)),
    }


def verify_sudoku4(completion, instance):
    """1 for a valid grid that keeps every given, 0.1 for any 16-digit grid, else 0."""
    text = _text(completion)
    if text is None:
        return 0.0
    body = text.rstrip(PAD)
    if len(body) != 16 or any(ch not in "1234" for ch in body):
        return 0.0
    grid = [int(ch) for ch in body]
    puzzle = instance.metadata["puzzle"]
    keeps = all(p == "." or p == ch for p, ch in zip(puzzle, body))
    if keeps and _sudoku_valid(grid):
        return 1.0
    return 0.0 if _binary(instance) else 0.1


# ----------------------------------------------------------------------
# countdown

_OPS = {ast.Add: lambda a, b: a + b, ast.Sub: lambda a, b: a - b, ast.Mult: lambda a, b: a * b}


def _eval_expr(node, used):
    if isinstance(node, ast.Expression):
        return _eval_expr(node.body, used)
    if isinstance(node, ast.Constant) and isinstance(node.value, int) and not isinstance(node.value, bool):
        used.append(node.value)
        return Fraction(node.value)
    if isinstance(node, ast.BinOp):
        a = _eval_expr(node.left, used)
        b = _eval_expr(node.right, used)
        if isinstance(node.op, ast.Div):
            if b == 0:
                raise ZeroDivisionError
            return a / b
        if type(node.op) in _OPS:
            return _OPS[type(node.op)](a, b)
    raise ValueError("unsupported expression")


def parse_countdown(text):
    """Value and operand list of an arithmetic expression, or ``None`` if it does not parse."""
    if not text or any(ch not in "0123456789+-*/()" for ch in text):
        return None
    try:
        tree = ast.parse(text, mode="eval")
        used = []
        value = _eval_expr(tree, used)
    except (SyntaxError, ValueError, ZeroDivisionError):
        return None
    return value, used


def verify_countdown(completion, instance):
    """1 when every number is used once and the value hits the target; 0.1 if it parses."""
    text = _text(completion)
    if text is None:
        return 0.0
    parsed = parse_countdown(text.rstrip(PAD))
    if parsed is None:
        return 0.0
    value, used = parsed
    meta = instance.metadata
    if sorted(used) == sorted(meta["numbers"]) and value == meta["target"]:
        return 1.0
    return 0.0 if _binary(instance) else 0.1


def _sample_countdown(spec, rng):
    while True:
        nums = [int(x) for x in rng.integers(1, spec.max_operand + 1, size=spec.n_numbers)]
        order = [nums[i] for i in rng.permutation(len(nums))]
        expr = str(order[0])
        value = Fraction(order[0])
        for x in order[1:]:
            op = "+-*"[int(rng.integers(3))]
            expr = f"({expr}){op}{x}" if op == "*" and any(c in expr for c in "+-") else f"{expr}{op}{x}"
            value = _OPS[{"+": ast.Add, "-": ast.Sub, "*": ast.Mult}[op]](value, Fraction(x))
        if value.denominator == 1 and value > 0 and len(expr) <= spec.L:
            break
    prompt = "n:" + ",".join(map(str, nums)) + "=" + str(int(value))
    return VOCAB.encode(prompt), {"numbers": nums, "target": int(value), "solution": expr}


# ----------------------------------------------------------------------
# copy / sort


def _fraction_match(completion, instance):
    target = VOCAB.encode(instance.metadata["solution"])
    comp = [int(t) for t in completion]
    if len(comp) < len(target):
        return 0.0
    hits = sum(1 for a, b in zip(comp, target) if a == b)
    frac = hits / len(target)
    if _binary(instance):
        return 1.0 if hits == len(target) else 0.0
    return frac


def verify_copy(completion, instance):
    """Fraction of answer positions equal to the payload."""
    return _fraction_match(completion, instance)


def verify_sort(completion, instance):
    """Fraction of answer positions equal to the sorted payload."""
    return _fraction_match(completion, instance)


def _sample_copy(spec, rng):
    letters = spec.alphabet
    payload = "".join(letters[int(i)] for i in rng.integers(len(letters), size=spec.payload_len))
    return VOCAB.encode("c:" + payload + "="), {"payload": payload, "solution": payload}


def _sample_sort(spec, rng):
    payload = "".join(str(int(d)) for d in rng.integers(10, size=spec.payload_len))
    return VOCAB.encode("o:" + payload + "="), {"payload": payload, "solution": "".join(sorted(payload))}


_SAMPLERS = {"sudoku4": _sample_sudoku, "countdown": _sample_countdown, "copy": _sample_copy, "sort": _sample_sort}
_VERIFIERS = {"sudoku4": verify_sudoku4, "countdown": verify_countdown, "copy": verify_copy, "sort": verify_sort}


def _binary(instance):
    return bool(instance.spec and instance.spec.binary)


def verify(completion, instance):
    return float(_VERIFIERS[instance.kind](completion, instance))


def sample_instance(spec, rng):
    """Draw a solvable instance; ``rng`` may be a Generator or an integer seed."""
    seed = None
    if not isinstance(rng, np.random.Generator):
        seed = int(rng)
        rng = np.random.default_rng(seed)
    prompt, meta = _SAMPLERS[spec.kind](spec, rng)
    inst = TaskInstance(spec.kind, prompt, meta, seed=seed, spec=spec)
    assert inst.verifier(inst.solution_tokens()) == 1.0
    return inst


def max_prompt_length(spec):
    """Upper bound on prompt length, used to size the model's position table."""
    if spec.kind == "sudoku4":
        return 19
    if spec.kind in ("copy", "sort"):
        return spec.payload_len + 3
    digits = len(str(spec.max_operand))
    return 2 + spec.n_numbers * digits + (spec.n_numbers - 1) + 1 + len(str(spec.max_operand**spec.n_numbers))


def dump_instances(path, instances):
    with open(path, "w") as fh:
        for inst in instances:
            rec = {
                "kind": inst.kind,
                "prompt": VOCAB.decode(inst.prompt_tokens),
                "metadata": inst.metadata,
                "seed": inst.seed,
                "spec": asdict(inst.spec) if inst.spec else None,
            }
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_instances(path):
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            spec = TaskSpec(**rec["spec"]) if rec.get("spec") else None
            out.append(TaskInstance(rec["kind"], VOCAB.encode(rec["prompt"]), rec["metadata"], rec.get("seed"), spec))
    return out
