"""Command-line entry point: generate / train / evaluate / accountant.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from fedsurv.config import ConfigError, load_config
from fedsurv.data import LoadError, SchemaError
from fedsurv.federation import RoundFailureError
from fedsurv.grid import InvalidRecordError
from fedsurv.metrics import calibration_curve, evaluate_predictions
from fedsurv.network import HazardNetwork, survival_curve
from fedsurv.privacy import (
    BdpLedger,
    CalibrationError,
    DEFAULT_MOMENT_ORDERS,
    DEFAULT_RDP_ORDERS,
    bdp_finalize,
    bdp_step_cost,
    calibrate_sigma,
    composed_epsilon,
)
from fedsurv.runner import prepare_bundle, run_experiment
from fedsurv.synthetic import SyntheticSpec, generate_synthetic, write_dataset

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def _cmd_generate(args: argparse.Namespace) -> int:
    with open(args.spec) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{args.spec}: expected a mapping")
    spec = SyntheticSpec.from_dict(raw)
    pairs = generate_synthetic(spec)
    paths = write_dataset(pairs, spec, args.out)
    print(f"wrote {len(pairs)} records to {paths['data']}")
    print(f"ground truth: {paths['truth']}")
    print(f"schema: {paths['schema']}")
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    seeds = (args.seed_override,) if args.seed_override is not None else None
    run_dir = run_experiment(
        config,
        out_dir=args.out,
        seeds=seeds,
        scenario_filter=args.scenario,
    )
    print(f"results in {run_dir}")
    return EXIT_OK


def _cmd_evaluate(args: argparse.Namespace) -> int:
    run_dir = Path(args.run)
    resolved = run_dir / "resolved_config.yaml"
    if not resolved.exists():
        raise ConfigError(f"{run_dir} has no resolved_config.yaml")
    with open(resolved) as fh:
        raw = yaml.safe_load(fh)
    from fedsurv.config import config_from_dict

    config = config_from_dict(raw)
    seed = args.seed if args.seed is not None else config.seeds[0]
    model_path = run_dir / f"seed_{seed}" / f"model_{args.scenario}.npz"
    if not model_path.exists():
        raise ConfigError(f"no persisted model at {model_path}")
    model = HazardNetwork.from_npz(model_path)

    bundle = prepare_bundle(config, seed)
    censor = bundle.censoring_estimate()
    split = bundle.pooled(args.split)
    out_dir = Path(args.out) if args.out else run_dir / f"seed_{seed}"
    out_dir.mkdir(parents=True, exist_ok=True)

    if split.n == 0:
        payload = {"split": args.split, "scenario": args.scenario, "absent": True}
        print(f"{args.split} split is empty; nothing to evaluate")
    else:
        curves = survival_curve(model.forward_batch(split.x))
        horizons = (
            np.asarray(config.eval.horizons, dtype=float)
            if config.eval.horizons
            else None
        )
        report = evaluate_predictions(
            curves, bundle.grid, split.times, split.events, censor, horizons
        )
        per_client = {}
        for client in bundle.clients:
            part = getattr(client, args.split if args.split != "oot" else "oot")
            if part is None or part.n == 0:
                continue
            c_curves = survival_curve(model.forward_batch(part.x))
            per_client[client.name] = evaluate_predictions(
                c_curves, bundle.grid, part.times, part.events, censor, horizons
            ).to_dict()
        payload = {
            "split": args.split,
            "scenario": args.scenario,
            "seed": seed,
            "absent": False,
            "pooled": report.to_dict(),
            "per_client": per_client,
        }
        cal = calibration_curve(curves, bundle.grid, split.times, split.events)
        cal_path = out_dir / f"evaluate_{args.scenario}_{args.split}_calibration.csv"
        with open(cal_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["time", "km", "km_lo", "km_hi", "model_mean"])
            for row in cal.rows():
                writer.writerow(
                    [
                        repr(row["time"]),
                        repr(row["km"]),
                        repr(row["km_lo"]),
                        repr(row["km_hi"]),
                        repr(row["model_mean"]),
                    ]
                )
        print(f"calibration: {cal_path}")

    out_path = out_dir / f"evaluate_{args.scenario}_{args.split}.json"
    with open(out_path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"metrics: {out_path}")
    return EXIT_OK


def _cmd_accountant(args: argparse.Namespace) -> int:
    writer = csv.writer(sys.stdout, lineterminator="\n")
    writer.writerow(
        ["regime", "sigma", "q", "steps", "delta", "epsilon", "order", "note"]
    )
    spend = composed_epsilon(
        args.q, args.sigma, args.steps, args.delta, DEFAULT_RDP_ORDERS
    )
    writer.writerow(
        [
            "classical",
            repr(args.sigma),
            repr(args.q),
            args.steps,
            repr(args.delta),
            repr(spend.epsilon),
            int(spend.order),
            "",
        ]
    )

    ledger = BdpLedger(lambdas=DEFAULT_MOMENT_ORDERS)
    deltas = np.full(max(2, args.mc_samples), args.bdp_delta)
    for _ in range(args.steps):
        ledger.step(deltas, args.q, args.sigma, args.gamma)
    bdp_spend = bdp_finalize(ledger, args.beta, args.gamma)
    writer.writerow(
        [
            "bayesian",
            repr(args.sigma),
            repr(args.q),
            args.steps,
            repr(args.beta + args.gamma),
            repr(bdp_spend.epsilon),
            int(bdp_spend.order),
            f"delta_profile={args.bdp_delta!r}",
        ]
    )

    for target in args.targets:
        sigma = calibrate_sigma(target, args.delta, args.q, args.steps)
        achieved = composed_epsilon(args.q, sigma, args.steps, args.delta)
        writer.writerow(
            [
                "calibration",
                repr(sigma),
                repr(args.q),
                args.steps,
                repr(args.delta),
                repr(achieved.epsilon),
                int(achieved.order),
                f"target={target!r}",
            ]
        )
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedsurv",
        description="Federated survival training and privacy budgeting",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic dataset")
    gen.add_argument("--spec", required=True, help="synthetic spec YAML")
    gen.add_argument("--out", required=True, help="output directory")
    gen.set_defaults(func=_cmd_generate)

    train = sub.add_parser("train", help="run the experiment grid")
    train.add_argument("--config", required=True, help="experiment config YAML")
    train.add_argument("--out", default=None, help="override output directory")
    train.add_argument("--seed-override", type=int, default=None)
    train.add_argument(
        "--scenario",
        default=None,
        help="comma list like federated-bayesian to filter the grid",
    )
    train.set_defaults(func=_cmd_train)

    ev = sub.add_parser("evaluate", help="re-evaluate a persisted model")
    ev.add_argument("--run", required=True, help="run directory from train")
    ev.add_argument("--scenario", required=True)
    ev.add_argument("--seed", type=int, default=None)
    ev.add_argument("--split", choices=("train", "test", "oot"), default="test")
    ev.add_argument("--out", default=None)
    ev.set_defaults(func=_cmd_evaluate)

    acc = sub.add_parser("accountant", help="print a budget table as CSV")
    acc.add_argument("--q", type=float, required=True)
    acc.add_argument("--sigma", type=float, required=True)
    acc.add_argument("--steps", type=int, required=True)
    acc.add_argument("--delta", type=float, default=1e-5)
    acc.add_argument("--beta", type=float, default=5e-6)
    acc.add_argument("--gamma", type=float, default=5e-6)
    acc.add_argument("--mc-samples", type=int, default=10)
    acc.add_argument(
        "--bdp-delta",
        type=float,
        default=0.0,
        help="constant squared-deviation profile for the bayesian table",
    )
    acc.add_argument(
        "--targets",
        type=float,
        nargs="*",
        default=(0.5, 1.0, 2.0, 10.0),
        help="target epsilons for sigma calibration rows",
    )
    acc.set_defaults(func=_cmd_accountant)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, SchemaError, InvalidRecordError, ValueError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RoundFailureError, CalibrationError, LoadError, RuntimeError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
