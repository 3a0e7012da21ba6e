"""Command line entry point: ``python -m latentsteer <subcommand> ...``.

Failures exit with status 1 and print one JSON error line on stderr.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .harness import (METHODS, emit_heatmap, gen_scenario, gradcheck_suite, pretrain_toy, run_roc,
                      single_object_accuracy, steering_prompt)
from .model import DEFAULT_WEIGHTS, ModelConfig, init_weights, load_weights, save_weights
from .relevancy import relevancy_map
from .steering import SteeringConfig, load_config, steer

log = logging.getLogger("latentsteer")


def _config(path) -> SteeringConfig:
    return load_config(path) if path else SteeringConfig()


def cmd_pretrain(args) -> dict:
    weights = init_weights(ModelConfig(seed=args.seed))
    res = pretrain_toy(weights, steps=args.steps, seed=args.seed)
    digest = save_weights(res.weights, args.out)
    acc = single_object_accuracy(res.weights)
    return {"out": str(args.out), "sha256": digest, "final_loss": res.losses[-1],
            "single_object_accuracy": acc}


def _load_scenario(spec: str, cfg: ModelConfig, prompt_kind: str):
    path = Path(spec)
    if path.exists():
        record = json.loads(path.read_text())
        return gen_scenario(int(record["seed"]), cfg, record.get("prompt", prompt_kind))
    return gen_scenario(int(spec), cfg, prompt_kind)


def cmd_steer(args) -> dict:
    weights = load_weights(args.weights)
    config = _config(args.config)
    sc = _load_scenario(args.scenario, weights.config, args.prompt)
    prompt, mask = steering_prompt(sc, f"steer-{config.energy}")
    state = steer(sc.image, sc.question, prompt, weights, config, mask=mask)
    if args.trace_out:
        state.trace.to_csv(args.trace_out)
    if args.heatmap_out:
        emit_heatmap(state.attention.values, (weights.config.grid_h, weights.config.grid_w),
                     args.heatmap_out)
    return {"seed": sc.seed, "energies": state.trace.energies, "ratios": state.trace.ratios,
            "stop_reason": state.trace.stop_reason}


def cmd_roc(args) -> dict:
    weights = load_weights(args.weights)
    config = _config(args.config)
    methods = tuple(m.strip() for m in args.methods.split(",")) if args.methods else METHODS
    t0 = time.perf_counter()
    report = run_roc(weights, methods, args.n, config, prompt_kind=args.prompt)
    summary, records = report.write(args.report_out)
    log.info("roc finished in %.1fs", time.perf_counter() - t0)
    return {"summary": str(summary), "records": str(records),
            "accuracy": {m: report.accuracy(m) for m in methods}}


def cmd_gradcheck(args) -> dict:
    weights = load_weights(args.weights) if args.weights else None
    errors = gradcheck_suite(args.n, args.coords, weights=weights)
    return {"configs": args.n, "max_relative_error": max(errors)}


def cmd_heatmap(args) -> dict:
    src = Path(args.input)
    write_csv = True
    if src.suffix == ".csv":
        values = np.loadtxt(src, delimiter=",", ndmin=2)
        grid = values.shape
        # never overwrite the input with its own sibling CSV
        write_csv = Path(args.out).with_suffix(".csv").resolve() != src.resolve()
    else:
        weights = load_weights(args.weights)
        sc = _load_scenario(args.input, weights.config, args.prompt)
        values = relevancy_map(sc.image, sc.question, weights)
        grid = (weights.config.grid_h, weights.config.grid_w)
    pgm, csv_path = emit_heatmap(values, grid, args.out, write_csv)
    return {"pgm": str(pgm), "csv": str(csv_path) if csv_path else None}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentsteer", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("pretrain", help="pretrain the toy decoder on single-object scenes")
    s.add_argument("--steps", type=int, default=800)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("steer", help="optimize the latent for one scenario")
    s.add_argument("--weights", type=Path, default=DEFAULT_WEIGHTS)
    s.add_argument("--scenario", required=True, help="scenario seed or JSON file with a 'seed' key")
    s.add_argument("--prompt", default="box", choices=("box", "mask", "scribble", "point"))
    s.add_argument("--config", type=Path)
    s.add_argument("--trace-out", type=Path)
    s.add_argument("--heatmap-out", type=Path)
    s.set_defaults(func=cmd_steer)

    s = sub.add_parser("roc", help="referring object classification over seeded scenarios")
    s.add_argument("--weights", type=Path, default=DEFAULT_WEIGHTS)
    s.add_argument("--methods", default=",".join(METHODS))
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--prompt", default="box", choices=("box", "mask", "scribble", "point"))
    s.add_argument("--config", type=Path)
    s.add_argument("--report-out", type=Path, required=True)
    s.set_defaults(func=cmd_roc)

    s = sub.add_parser("gradcheck", help="latent gradient vs central differences")
    s.add_argument("--n", type=int, default=100)
    s.add_argument("--coords", type=int, default=8)
    s.add_argument("--weights", type=Path)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("heatmap", help="render a CSV map, or a scenario's relevancy map, as PGM")
    s.add_argument("--in", dest="input", required=True, help="CSV grid, or scenario seed with --weights")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--weights", type=Path, default=DEFAULT_WEIGHTS)
    s.add_argument("--prompt", default="box", choices=("box", "mask", "scribble", "point"))
    s.set_defaults(func=cmd_heatmap)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps(result, sort_keys=True))
    return 0
