"""Command-line entry point: ``cbalab [flags]`` or ``python -m cbalab``.

Exit codes: 0 success, 2 configuration error, 3 every seed failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .runner import RunConfig, emit_results, run_experiment

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    S = argparse.SUPPRESS
    p = argparse.ArgumentParser(
        prog="cbalab",
        description="Online continual learning runs with ER / DER++, with or without the bias adaptor.",
        argument_default=S,
    )
    p.add_argument("--config", help="JSON file of RunConfig fields; flags override it")
    p.add_argument("--method", choices=["er", "derpp"])
    p.add_argument("--cba", dest="use_cba", action="store_true", help="train with the bias adaptor")
    p.add_argument("--M", type=int, help="buffer capacity (default 500)")
    p.add_argument("--tasks", type=int, help="number of tasks (default 5)")
    p.add_argument("--blurry-K", "--K", dest="blurry_K", type=float, help="blurry stream: percent of each task moved elsewhere")
    p.add_argument("--epochs", type=int, help="passes per task; 1 = online (default)")
    p.add_argument("--batch", type=int, help="stream and buffer batch size (default 20)")
    p.add_argument("--alpha", type=float, help="classifier learning rate (default 0.03)")
    p.add_argument("--beta", type=float, help="adaptor learning rate (default 0.3)")
    p.add_argument("--seeds", type=_int_list, help="comma-separated seeds (default 0..9)")
    p.add_argument("--dataset", help="'synthetic' (default) or a dataset CSV path")
    p.add_argument("--task-order", dest="task_order", type=_int_list, help="task permutation, e.g. 0,1,2,4,3")
    p.add_argument("--eval-interval", dest="eval_interval", type=int, help="trace every N steps (default 5)")
    p.add_argument("--out", help="output directory (default ./results)")
    p.add_argument("--diag", action="store_true", help="write per-step diagnostics")
    p.add_argument("--widths", dest="backbone_widths", type=_int_list, help="backbone hidden widths (default 64)")
    p.add_argument("--cba-hidden", dest="cba_hidden", type=int, help="adaptor hidden width (default 256)")
    p.add_argument("--workers", type=int, help="parallel seed workers (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None) -> RunConfig:
    """Defaults, then the optional JSON config file, then flags. Exits 2 on bad input."""
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    args.pop("verbose", None)
    values: dict = {}
    path = args.pop("config", None)
    known = {f.name for f in fields(RunConfig)}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read config file {path}: {exc}")
        unknown = sorted(set(loaded) - known)
        if unknown:
            parser.error(f"unknown config keys {unknown}")
        values.update(loaded)
    values.update(args)
    try:
        cfg = RunConfig(**values)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        parser.error(str(exc))
    return cfg


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = parse_config(argv)
    except SystemExit as exc:
        return int(exc.code or 0) and EXIT_CONFIG
    result = run_experiment(cfg)
    try:
        out = emit_results(result)
    except OSError as exc:
        print(f"cbalab: cannot write results to {cfg.out}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    agg = result.aggregate()
    label = f"{cfg.method}{'-cba' if cfg.use_cba else ''}"
    print(f"{label}: ACC {agg['ACC'][0]:.2f} ± {agg['ACC'][1]:.2f}  FM {agg['FM'][0]:.2f} ± {agg['FM'][1]:.2f}"
          f"  ({len(result.succeeded)}/{len(result.seeds)} seeds) -> {out}")
    if not result.succeeded:
        return EXIT_RUNTIME
    return EXIT_OK
