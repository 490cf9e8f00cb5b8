"""Experiment orchestration: dataset preparation, the scenario grid, and
machine-readable result bundles.

Layout per run:

    <output_dir>/<name>/
        resolved_config.yaml
        summary.csv                  one row per scenario (mean +- std)
        per_client_ci.csv            per-seed, per-client test concordance
        win_rates.csv                federated bayesian vs classical, if both ran
        loss_curves.csv
        calibration.csv
        seed_<s>/
            rounds.jsonl             one line per (scenario, round)
            metrics.json
            ledger.csv
            model_<scenario>.npz
"""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from fedsurv.config import ExperimentConfig, config_from_dict
from fedsurv.data import (
    DatasetSchema,
    FeatureEncoder,
    Scaler,
    SplitSpec,
    partition_by_region,
    read_rows,
)
from fedsurv.federation import (
    ClientState,
    FederationConfig,
    FederationResult,
    run_centralized,
    run_federated,
)
from fedsurv.grid import TimeGrid, discretize_dataset
from fedsurv.metrics import (
    KmCurve,
    MetricReport,
    calibration_curve,
    default_eval_times,
    evaluate_predictions,
    kaplan_meier,
)
from fedsurv.network import HazardNetwork, survival_curve
from fedsurv.privacy import calibrate_sigma
from fedsurv.rng import derive_rng
from fedsurv.synthetic import SyntheticSpec, generate_synthetic

# ---------------------------------------------------------------------------
# dataset preparation


@dataclass
class SplitArrays:
    x: np.ndarray
    survived: np.ndarray
    failed: np.ndarray
    times: np.ndarray
    events: np.ndarray

    @property
    def n(self) -> int:
        return self.x.shape[0]


@dataclass
class ClientData:
    name: str
    train: SplitArrays
    test: SplitArrays
    oot: SplitArrays | None


@dataclass
class DataBundle:
    grid: TimeGrid
    clients: list[ClientData]

    def pooled(self, split: str) -> SplitArrays:
        parts = [getattr(c, split) for c in self.clients]
        parts = [p for p in parts if p is not None and p.n > 0]
        if not parts:
            return SplitArrays(
                np.zeros((0, self.clients[0].train.x.shape[1])),
                np.zeros((0, self.grid.n_intervals), dtype=np.int8),
                np.zeros((0, self.grid.n_intervals), dtype=np.int8),
                np.zeros(0),
                np.zeros(0, dtype=int),
            )
        return SplitArrays(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.survived for p in parts]),
            np.concatenate([p.failed for p in parts]),
            np.concatenate([p.times for p in parts]),
            np.concatenate([p.events for p in parts]),
        )

    def censoring_estimate(self) -> KmCurve | None:
        train = self.pooled("train")
        if np.all(train.events == 1):
            return None
        return kaplan_meier(train.times, 1 - train.events)


def _split_arrays(
    records: list, grid: TimeGrid, scaler: Scaler | None
) -> SplitArrays:
    if not records:
        d = 0
        return SplitArrays(
            np.zeros((0, d)),
            np.zeros((0, grid.n_intervals), dtype=np.int8),
            np.zeros((0, grid.n_intervals), dtype=np.int8),
            np.zeros(0),
            np.zeros(0, dtype=int),
        )
    x = np.stack([r.covariates for r in records])
    if scaler is not None:
        x = scaler.transform(x)
    times = np.array([r.time for r in records])
    events = np.array([r.event for r in records], dtype=int)
    survived, failed = discretize_dataset(times, events, grid)
    return SplitArrays(x, survived, failed, times, events)


def prepare_bundle(config: ExperimentConfig, seed: int) -> DataBundle:
    """Load or generate data, partition by region, split per client, fit the
    scaler on pooled training records only, and discretize."""
    if config.synthetic is not None:
        spec_fields = {**config.synthetic.__dict__, "seed": seed}
        spec = SyntheticSpec(**spec_fields)
        pairs = generate_synthetic(spec)
        grid = spec.grid()
        date_lookup = None
    else:
        schema = DatasetSchema.from_yaml(config.csv.schema)
        rows = read_rows(config.csv.path, schema)
        encoder = FeatureEncoder(schema)
        # vocabulary from in-time rows only would need the split first; fit on
        # rows not past the cutoff to keep out-of-time data out of the vocab
        cutoff = SplitSpec(
            config.split.train_fraction, config.split.oot_cutoff, seed
        ).cutoff_days()
        fit_rows = [
            r
            for r in rows
            if cutoff is None or r.date_days is None or r.date_days <= cutoff
        ]
        encoder.fit(fit_rows if fit_rows else rows)
        x = encoder.transform(rows)
        from fedsurv.grid import SurvivalRecord

        pairs = [
            (row.region, SurvivalRecord(x[i], row.time, row.event))
            for i, row in enumerate(rows)
        ]
        date_lookup = {
            id(pairs[i][1]): rows[i].date_days for i in range(len(rows))
        }
        horizon = math.ceil(max(row.time for row in rows))
        grid = TimeGrid.monthly(int(horizon))

    by_region = partition_by_region(pairs, min_client_size=config.min_client_size)
    split_spec = SplitSpec(
        train_fraction=config.split.train_fraction,
        oot_cutoff=config.split.oot_cutoff,
        seed=seed,
    )

    from fedsurv.data import split_records

    partitioned: dict[str, tuple[list, list, list]] = {}
    for region in sorted(by_region):
        records = by_region[region]
        dates = (
            [date_lookup.get(id(r)) for r in records] if date_lookup else None
        )
        rng = derive_rng(seed, "split", region)
        partitioned[region] = split_records(records, split_spec, rng, dates)

    train_pool = [r for splits in partitioned.values() for r in splits[0]]
    scaler = Scaler.fit(np.stack([r.covariates for r in train_pool]))

    clients = []
    for region in sorted(partitioned):
        train, test, oot = partitioned[region]
        clients.append(
            ClientData(
                name=region,
                train=_split_arrays(train, grid, scaler),
                test=_split_arrays(test, grid, scaler),
                oot=_split_arrays(oot, grid, scaler) if oot else None,
            )
        )
    return DataBundle(grid=grid, clients=clients)


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class ScenarioResult:
    scenario: str
    seed: int
    sigma: float | None
    model: HazardNetwork
    federation: FederationResult
    test: MetricReport
    test_per_client: dict[str, MetricReport]
    oot: MetricReport | None

    def metrics_dict(self) -> dict:
        return {
            "sigma": self.sigma,
            "test": self.test.to_dict(),
            "test_per_client": {
                k: v.to_dict() for k, v in self.test_per_client.items()
            },
            "oot": self.oot.to_dict() if self.oot is not None else None,
            "train_loss_rounds": [
                float(np.mean(list(r.train_loss.values())))
                for r in self.federation.rounds
            ],
        }


def _resolve_sigma(
    config: ExperimentConfig, bundle: DataBundle, mode: str
) -> float:
    """Explicit sigma wins; otherwise calibrate for the most exposed client
    (largest subsampling rate / step count) so every ledger meets the target."""
    if config.privacy.sigma is not None:
        return float(config.privacy.sigma)
    fed = config.federation
    target = config.privacy.target_epsilon
    if mode == "centralized":
        sizes = [bundle.pooled("train").n]
    else:
        sizes = [c.train.n for c in bundle.clients]
    sigma = 0.0
    for n in sizes:
        q = min(1.0, fed.batch_size / n)
        steps = fed.rounds * fed.local_epochs * math.ceil(n / fed.batch_size)
        sigma = max(
            sigma,
            calibrate_sigma(target, config.privacy.delta, q, steps),
        )
    return sigma


def run_scenario(
    bundle: DataBundle,
    config: ExperimentConfig,
    mode: str,
    regime: str,
    seed: int,
) -> ScenarioResult:
    grid = bundle.grid
    d = bundle.clients[0].train.x.shape[1]
    dims = (d, *config.hidden_layers, grid.n_intervals)
    model0 = HazardNetwork.initialize(dims, derive_rng(seed, "init"))

    fed_cfg = FederationConfig(
        rounds=config.federation.rounds,
        local_epochs=config.federation.local_epochs,
        participation=config.federation.participation,
        batch_size=config.federation.batch_size,
        learning_rate=config.federation.learning_rate,
        optimizer=config.federation.optimizer,
        regime=regime,
        weighting=config.federation.weighting,
    )
    dp = None
    bdp = None
    sigma = None
    if regime != "none":
        sigma = _resolve_sigma(config, bundle, mode)
        dp = config.privacy.resolved_dp(sigma)
        bdp = config.privacy.bdp

    if mode == "centralized":
        pooled = bundle.pooled("train")
        result = run_centralized(
            pooled.x, pooled.survived, pooled.failed, fed_cfg, model0, dp, bdp, seed
        )
    else:
        clients = [
            ClientState(
                client_id=c.name,
                x=c.train.x,
                survived=c.train.survived,
                failed=c.train.failed,
            )
            for c in bundle.clients
        ]
        result = run_federated(clients, fed_cfg, model0, dp, bdp, seed)

    censor = bundle.censoring_estimate()
    horizons = (
        np.asarray(config.eval.horizons, dtype=float)
        if config.eval.horizons
        else None
    )

    def report_for(split: SplitArrays) -> MetricReport:
        curves = survival_curve(result.model.forward_batch(split.x))
        h = horizons
        if h is None:
            h = default_eval_times(
                grid, split.times, split.events, config.eval.upper_quantile
            )
        return evaluate_predictions(
            curves, grid, split.times, split.events, censor, h
        )

    pooled_test = bundle.pooled("test")
    test_report = report_for(pooled_test)
    per_client = {
        c.name: report_for(c.test) for c in bundle.clients if c.test.n > 0
    }
    pooled_oot = bundle.pooled("oot")
    oot_report = report_for(pooled_oot) if pooled_oot.n > 0 else None

    return ScenarioResult(
        scenario=f"{mode}-{regime}",
        seed=seed,
        sigma=sigma,
        model=result.model,
        federation=result,
        test=test_report,
        test_per_client=per_client,
        oot=oot_report,
    )


# ---------------------------------------------------------------------------
# run bundle on disk


def _write_rounds(path: Path, results: list[ScenarioResult]) -> None:
    with open(path, "w") as fh:
        for res in results:
            for report in res.federation.rounds:
                line = {"scenario": res.scenario, **report.to_dict()}
                fh.write(json.dumps(line, sort_keys=True) + "\n")


def _write_ledgers(path: Path, results: list[ScenarioResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "seed",
                "scenario",
                "client",
                "regime",
                "fallback",
                "sigma",
                "epsilon",
                "delta",
                "order",
                "epsilon_linear",
                "delta_linear",
            ]
        )
        for res in results:
            for name in sorted(res.federation.spends):
                spend = res.federation.spends[name]
                writer.writerow(
                    [
                        res.seed,
                        res.scenario,
                        name,
                        spend.regime,
                        int(spend.fallback),
                        _fmt(res.sigma),
                        _fmt(spend.epsilon),
                        _fmt(spend.delta),
                        _fmt(spend.order),
                        _fmt(spend.epsilon_linear),
                        _fmt(spend.delta_linear),
                    ]
                )


def _fmt(value) -> str:
    if value is None:
        return ""
    value = float(value)
    if math.isinf(value):
        return "inf"
    return repr(value)


def run_seed(config: ExperimentConfig, seed: int, run_dir: Path) -> dict:
    """All scenarios for one seed; writes the seed directory, returns the
    metrics payload."""
    bundle = prepare_bundle(config, seed)
    seed_dir = run_dir / f"seed_{seed}"
    seed_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for mode, regime in config.scenarios():
        results.append(run_scenario(bundle, config, mode, regime, seed))

    _write_rounds(seed_dir / "rounds.jsonl", results)
    _write_ledgers(seed_dir / "ledger.csv", results)
    payload = {
        "seed": seed,
        "scenarios": {res.scenario: res.metrics_dict() for res in results},
    }
    with open(seed_dir / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for res in results:
        res.model.to_npz(seed_dir / f"model_{res.scenario}.npz")

    # plot-ready calibration series for the pooled test split
    pooled_test = bundle.pooled("test")
    calib_rows = []
    for res in results:
        curves = survival_curve(res.model.forward_batch(pooled_test.x))
        cal = calibration_curve(
            curves, bundle.grid, pooled_test.times, pooled_test.events
        )
        for row in cal.rows():
            calib_rows.append({"seed": seed, "scenario": res.scenario, **row})
    return {"metrics": payload, "calibration": calib_rows}


def _run_seed_worker(raw_config: dict, seed: int, run_dir: str) -> dict:
    return run_seed(config_from_dict(raw_config), seed, Path(run_dir))


def run_experiment(
    config: ExperimentConfig,
    out_dir: str | None = None,
    seeds: tuple[int, ...] | None = None,
    scenario_filter: str | None = None,
) -> Path:
    """Run the scenario grid across seeds and write the results bundle.

    Returns the run directory. Set FEDSURV_WORKERS > 1 to run seeds in
    parallel processes (results are identical to the serial order).
    """
    if scenario_filter:
        wanted = {s.strip() for s in scenario_filter.split(",") if s.strip()}
        modes = tuple(
            m for m in config.modes if any(w.startswith(m) for w in wanted)
        )
        regimes = tuple(
            r for r in config.regimes if any(w.endswith(r) for w in wanted)
        )
        if not modes or not regimes:
            raise ValueError(f"scenario filter {scenario_filter!r} matches nothing")
        config = ExperimentConfig(
            **{
                **{f: getattr(config, f) for f in config.__dataclass_fields__},
                "modes": modes,
                "regimes": regimes,
            }
        )
    if seeds is not None:
        config = ExperimentConfig(
            **{
                **{f: getattr(config, f) for f in config.__dataclass_fields__},
                "seeds": tuple(seeds),
            }
        )

    base = Path(out_dir) if out_dir else Path(config.output_dir)
    run_dir = base / config.name
    run_dir.mkdir(parents=True, exist_ok=True)

    from fedsurv.config import write_resolved

    write_resolved(config, run_dir / "resolved_config.yaml")

    workers = int(os.environ.get("FEDSURV_WORKERS", "1"))
    raw = config.to_dict()
    if workers > 1 and len(config.seeds) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_seed_worker, raw, seed, str(run_dir))
                for seed in config.seeds
            ]
            outputs = [f.result() for f in futures]
    else:
        outputs = [run_seed(config, seed, run_dir) for seed in config.seeds]

    _write_summary(run_dir, config, outputs)
    return run_dir


def _scenario_rows(outputs: list[dict]) -> dict[str, dict[str, list[float]]]:
    rows: dict[str, dict[str, list[float]]] = {}
    for out in outputs:
        for scenario, payload in out["metrics"]["scenarios"].items():
            slot = rows.setdefault(
                scenario,
                {"test_ci": [], "test_ibs": [], "oot_ci": [], "oot_ibs": []},
            )
            test = payload["test"]
            if test["mean_c_index"] is not None:
                slot["test_ci"].append(test["mean_c_index"])
            slot["test_ibs"].append(test["ibs"])
            if payload["oot"]:
                if payload["oot"]["mean_c_index"] is not None:
                    slot["oot_ci"].append(payload["oot"]["mean_c_index"])
                slot["oot_ibs"].append(payload["oot"]["ibs"])
    return rows


def _write_summary(run_dir: Path, config: ExperimentConfig, outputs: list[dict]) -> None:
    rows = _scenario_rows(outputs)

    def stats(values: list[float]) -> tuple[str, str]:
        if not values:
            return "", ""
        arr = np.asarray(values)
        return repr(float(arr.mean())), repr(float(arr.std()))

    with open(run_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [
                "scenario",
                "seeds",
                "test_ci_mean",
                "test_ci_std",
                "test_ibs_mean",
                "test_ibs_std",
                "oot_ci_mean",
                "oot_ci_std",
                "oot_ibs_mean",
                "oot_ibs_std",
            ]
        )
        for scenario in sorted(rows):
            slot = rows[scenario]
            writer.writerow(
                [
                    scenario,
                    len(config.seeds),
                    *stats(slot["test_ci"]),
                    *stats(slot["test_ibs"]),
                    *stats(slot["oot_ci"]),
                    *stats(slot["oot_ibs"]),
                ]
            )

    with open(run_dir / "loss_curves.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "scenario", "round", "mean_train_loss"])
        for out in outputs:
            seed = out["metrics"]["seed"]
            for scenario in sorted(out["metrics"]["scenarios"]):
                losses = out["metrics"]["scenarios"][scenario]["train_loss_rounds"]
                for i, loss in enumerate(losses):
                    writer.writerow([seed, scenario, i, repr(loss)])

    with open(run_dir / "calibration.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["seed", "scenario", "time", "km", "km_lo", "km_hi", "model_mean"]
        )
        for out in outputs:
            for row in out["calibration"]:
                writer.writerow(
                    [
                        row["seed"],
                        row["scenario"],
                        repr(row["time"]),
                        repr(row["km"]),
                        repr(row["km_lo"]),
                        repr(row["km_hi"]),
                        repr(row["model_mean"]),
                    ]
                )

    with open(run_dir / "per_client_ci.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["seed", "scenario", "client", "test_ci"])
        for out in outputs:
            seed = out["metrics"]["seed"]
            for scenario in sorted(out["metrics"]["scenarios"]):
                per_client = out["metrics"]["scenarios"][scenario][
                    "test_per_client"
                ]
                for client in sorted(per_client):
                    ci = per_client[client]["mean_c_index"]
                    writer.writerow(
                        [seed, scenario, client, "" if ci is None else repr(ci)]
                    )

    _write_win_rates(run_dir, outputs)


def _write_win_rates(run_dir: Path, outputs: list[dict]) -> None:
    """Client-level federated comparison of the two private regimes."""
    rows = []
    for out in outputs:
        seed = out["metrics"]["seed"]
        scenarios = out["metrics"]["scenarios"]
        classical = scenarios.get("federated-classical")
        bayesian = scenarios.get("federated-bayesian")
        if not classical or not bayesian:
            continue
        for client in sorted(classical["test_per_client"]):
            ci_c = classical["test_per_client"][client]["mean_c_index"]
            ci_b = bayesian["test_per_client"].get(client, {}).get("mean_c_index")
            if ci_c is None or ci_b is None:
                continue
            rows.append((seed, client, ci_c, ci_b, int(ci_b > ci_c)))
    if not rows:
        return
    with open(run_dir / "win_rates.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["seed", "client", "ci_classical", "ci_bayesian", "bayesian_wins"]
        )
        for seed, client, ci_c, ci_b, win in rows:
            writer.writerow([seed, client, repr(ci_c), repr(ci_b), win])
