"""Command-line entry point.

Subcommands: ``train``, ``eval``, ``verify-bounds``, ``ablate``, ``tree-cost``
and ``plot-data``.  Exit codes: 0 success, 1 configuration error, 2 numeric
abort, 3 bound violation.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, fields

from .policy import ConfigurationError
from .trainer import (
    ABLATION_MODES,
    BoundsConfig,
    TrainConfig,
    TrainingAborted,
    ablate,
    evaluate,
    train,
    verify_bounds,
)
from .tree import TreeConfig, tree_cost, validate_block_alignment

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BOUND = 0, 1, 2, 3

log = logging.getLogger("treerpo")


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; 2 is reserved for numeric aborts here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _parse_bool(text):
    low = str(text).lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {text!r}")


_CASTS = {"int": int, "float": float, "str": str, "bool": _parse_bool}


def _field_type(f):
    name = f.type if isinstance(f.type, str) else getattr(f.type, "__name__", "str")
    return _CASTS.get(name.split("|")[0].strip(), str)


def _add_config_flags(parser, skip=()):
    """One ``--key`` flag per TrainConfig field; unset flags stay ``None``."""
    for f in fields(TrainConfig):
        if f.name in skip:
            continue
        flags = [f"--{f.name}"]
        if "_" in f.name:
            flags.append(f"--{f.name.replace('_', '-')}")
        parser.add_argument(*flags, dest=f.name, type=_field_type(f), default=None, help=argparse.SUPPRESS)


def _load_config(args, skip=()):
    """Merge the JSON config file (if any) with command-line overrides.

    Fields named in ``skip`` are not read from ``args``.
    """
    data = {}
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigurationError(f"cannot read config {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a flat key-value object")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigurationError(f"config must be flat; nested values under {nested}")
    for f in fields(TrainConfig):
        v = None if f.name in skip else getattr(args, f.name, None)
        if v is not None:
            data[f.name] = v
    try:
        cfg = TrainConfig.from_dict(data)
    except TypeError as e:
        raise ConfigurationError(str(e)) from e
    cfg.validate()
    return cfg


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ----------------------------------------------------------------------
# subcommands


def cmd_train(args):
    cfg = _load_config(args)
    os.makedirs(cfg.out_dir, exist_ok=True)
    _write_json(os.path.join(cfg.out_dir, "config.json"), asdict(cfg))

    def report(rec, _model):
        if rec["step"] % max(1, cfg.T // 20) == 0 or rec["step"] == cfg.T - 1:
            log.info("step %d  reward %.3f  entropy %.3f", rec["step"], rec["mean_tree_reward"], rec["entropy"])

    res = train(cfg, on_step=report)
    print(json.dumps({"checkpoint": res.checkpoint, "steps": len(res.metrics),
                      "final_reward": res.metrics[-1]["mean_tree_reward"]}))
    return EXIT_OK


def cmd_eval(args):
    cfg = _load_config(args)
    spec = cfg.task_spec()
    if args.n < 1:
        raise ConfigurationError("--n must be at least 1")
    try:
        rate = evaluate(args.checkpoint, spec, args.n, temperature=args.temperature, seed=cfg.seed)
    except (OSError, KeyError, ValueError) as e:
        raise ConfigurationError(f"cannot evaluate {args.checkpoint}: {e}") from e
    out = {"checkpoint": args.checkpoint, "task": spec.kind, "n": args.n, "pass_at_1": rate}
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        _write_json(os.path.join(cfg.out_dir, "eval.json"), out)
    print(json.dumps(out))
    return EXIT_OK


def cmd_verify_bounds(args):
    bcfg = BoundsConfig(
        n_instances=args.n_instances, k_min=args.k_min, k_max=args.k_max,
        v_min=args.v_min, v_max=args.v_max, seed=args.seed, sharpen=args.sharpen,
    )
    if not (1 <= bcfg.k_min <= bcfg.k_max) or not (2 <= bcfg.v_min <= bcfg.v_max):
        raise ConfigurationError("need 1 <= k_min <= k_max and 2 <= v_min <= v_max")
    reports, summary = verify_bounds(bcfg)
    os.makedirs(args.out_dir, exist_ok=True)
    with open(os.path.join(args.out_dir, "bound_reports.jsonl"), "w") as fh:
        for r in reports:
            fh.write(json.dumps(r) + "\n")
    _write_json(os.path.join(args.out_dir, "bound_summary.json"), summary)
    print(json.dumps(summary))
    return EXIT_BOUND if summary["violations"] else EXIT_OK


def cmd_ablate(args):
    # --mode here lists the arms to run, not the config's single mode
    cfg = _load_config(args, skip=("mode",))
    modes = ABLATION_MODES if args.mode == "all" else tuple(m.strip() for m in args.mode.split(","))
    bad = [m for m in modes if m not in ABLATION_MODES]
    if bad:
        raise ConfigurationError(f"unknown modes {bad}")
    seeds = tuple(cfg.seed + i for i in range(args.n_seeds))
    _, table = ablate(cfg, seeds=seeds, modes=modes)
    _write_json(os.path.join(cfg.out_dir, "ablation.json"), {"seeds": list(seeds), "table": table})
    print(f"{'mode':<18}{'final_reward':>14}{'final_entropy':>15}{'early_slope':>13}")
    for mode, row in table.items():
        print(f"{mode:<18}{row['final_reward']:>14.4f}{row['final_entropy']:>15.4f}{row['early_slope']:>13.5f}")
    return EXIT_OK


def cmd_tree_cost(args):
    cfg = TreeConfig(B=args.B, H=args.H, N=args.N, L=args.L, b=args.b)
    ok, msg = validate_block_alignment(cfg)
    if not ok:
        raise ConfigurationError(msg)
    print(json.dumps({"B": cfg.B, "H": cfg.H, "N": cfg.N, "L": cfg.L, "b": cfg.b, **tree_cost(cfg)}))
    return EXIT_OK


PLOT_COLUMNS = ("step", "mean_tree_reward", "entropy", "tau", "lambda", "pg_term", "kl_term", "distill_term", "div_term")


def cmd_plot_data(args):
    rows = []
    for path in args.metrics:
        with open(path) as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    rows.append([path] + [rec.get(c, "") for c in PLOT_COLUMNS])
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(out)
        w.writerow(("run",) + PLOT_COLUMNS)
        w.writerows(rows)
    finally:
        if args.out:
            out.close()
    return EXIT_OK


def build_parser():
    p = _Parser(prog="treerpo", description="Tree-structured RL for toy masked diffusion models.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run the training loop")
    t.add_argument("--config", help="flat JSON file of TrainConfig keys")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--mode", required=True, choices=ABLATION_MODES)
    t.add_argument("--out-dir", "--out_dir", dest="out_dir", required=True)
    _add_config_flags(t, skip=("seed", "mode", "out_dir"))
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="pass@1 of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--config")
    e.add_argument("--n", type=int, default=100)
    e.add_argument("--temperature", type=float, default=0.0)
    e.add_argument("--seed", type=int, required=True, help="first instance seed")
    e.add_argument("--mode", choices=ABLATION_MODES, default=None)
    e.add_argument("--out-dir", "--out_dir", dest="out_dir", default=None)
    _add_config_flags(e, skip=("seed", "mode", "out_dir"))
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify-bounds", help="certify the ratio bracket on random instances")
    v.add_argument("--seed", type=int, required=True)
    v.add_argument("--out-dir", "--out_dir", dest="out_dir", required=True)
    v.add_argument("--n-instances", type=int, default=1000, help="per order kind")
    v.add_argument("--k-min", type=int, default=2)
    v.add_argument("--k-max", type=int, default=5)
    v.add_argument("--v-min", type=int, default=3)
    v.add_argument("--v-max", type=int, default=6)
    v.add_argument("--sharpen", type=float, default=None, help="sharpening temperature")
    v.set_defaults(func=cmd_verify_bounds)

    a = sub.add_parser("ablate", help="run all modes under shared seeds and budget")
    a.add_argument("--config")
    a.add_argument("--seed", type=int, required=True, help="first seed")
    a.add_argument("--mode", required=True, help="'all' or a comma-separated list of modes")
    a.add_argument("--out-dir", "--out_dir", dest="out_dir", required=True)
    a.add_argument("--n-seeds", type=int, default=3)
    _add_config_flags(a, skip=("seed", "mode", "out_dir"))
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("tree-cost", help="denoise-step and forward-pass counts for one tree")
    for name, default in (("B", 4), ("H", 2), ("N", 128), ("L", 256), ("b", 32)):
        c.add_argument(f"--{name}", type=int, default=default)
    c.set_defaults(func=cmd_tree_cost)

    d = sub.add_parser("plot-data", help="flatten metrics streams into CSV")
    d.add_argument("metrics", nargs="+")
    d.add_argument("--out")
    d.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigurationError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingAborted as e:
        print(f"numeric abort: {e}; last good checkpoint: {e.checkpoint}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
