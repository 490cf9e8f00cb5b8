"""Synthetic survival data with known discrete hazards and client shifts.

Each client draws standard-normal covariates; the true per-interval hazard is

    h_t(x) = sigmoid(base_logit + client_shift_k + w . x + trend_t)

with a shared weight vector w and a mild linear time trend. Event intervals
follow the implied geometric-like law (hazards continue past the window with
the last interval's value, so every subject eventually defaults); censoring
exposure is Bernoulli(censoring_rate) with uniform censor times over the
window. Ground-truth parameters are reproducible from the spec alone.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from fedsurv.data import DatasetSchema
from fedsurv.grid import SurvivalRecord, TimeGrid
from fedsurv.rng import derive_rng


@dataclass(frozen=True)
class SyntheticSpec:
    n_clients: int = 8
    records_per_client: tuple[int, ...] | int = 5000
    n_features: int = 10
    client_shifts: tuple[float, ...] | None = None  # log-odds shifts a_k
    shift_spread: float = 0.3  # used when client_shifts is None
    censoring_rate: float = 0.3
    n_intervals: int = 24
    interval_width: float = 1.0
    base_logit: float = -3.0
    signal_scale: float = 1.0  # std of w . x across the population
    time_trend: float = 0.5  # logit drift from first to last interval
    seed: int = 42

    def __post_init__(self) -> None:
        if self.n_clients < 1 or self.n_features < 1 or self.n_intervals < 1:
            raise ValueError("counts must be >= 1")
        if not 0 <= self.censoring_rate < 1:
            raise ValueError("censoring rate must be in [0, 1)")
        counts = self.counts()
        if len(counts) != self.n_clients or any(c < 1 for c in counts):
            raise ValueError("per-client sample counts must be >= 1 per client")
        if self.client_shifts is not None and len(self.client_shifts) != self.n_clients:
            raise ValueError("one shift per client required")

    def counts(self) -> tuple[int, ...]:
        if isinstance(self.records_per_client, int):
            return (self.records_per_client,) * self.n_clients
        return tuple(int(c) for c in self.records_per_client)

    def grid(self) -> TimeGrid:
        return TimeGrid.monthly(self.n_intervals, self.interval_width)

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown synthetic spec fields: {sorted(unknown)}")
        payload = dict(raw)
        for key in ("records_per_client", "client_shifts"):
            if isinstance(payload.get(key), list):
                payload[key] = tuple(payload[key])
        return cls(**payload)


@dataclass(frozen=True)
class GroundTruth:
    weights: np.ndarray
    client_shifts: np.ndarray
    base_logit: float
    time_trend_per_interval: np.ndarray
    boundaries: tuple[float, ...]

    def hazard_matrix(self, x: np.ndarray, client: int) -> np.ndarray:
        """True hazards, shape (n, T)."""
        x = np.atleast_2d(x)
        logits = (
            self.base_logit
            + self.client_shifts[client]
            + x @ self.weights
        )
        return expit(logits[:, None] + self.time_trend_per_interval[None, :])

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "client_shifts": self.client_shifts.tolist(),
            "base_logit": self.base_logit,
            "time_trend_per_interval": self.time_trend_per_interval.tolist(),
            "boundaries": list(self.boundaries),
        }


def ground_truth(spec: SyntheticSpec) -> GroundTruth:
    """Deterministic true parameters for a spec (independent of sampling)."""
    rng = derive_rng(spec.seed, "truth")
    w = rng.normal(0.0, 1.0, size=spec.n_features)
    norm = np.linalg.norm(w)
    if norm > 0:
        w = w * (spec.signal_scale / norm)
    if spec.client_shifts is not None:
        shifts = np.asarray(spec.client_shifts, dtype=float)
    elif spec.n_clients == 1:
        shifts = np.zeros(1)
    else:
        shifts = np.linspace(-spec.shift_spread, spec.shift_spread, spec.n_clients)
    if spec.n_intervals == 1:
        trend = np.zeros(1)
    else:
        trend = spec.time_trend * np.arange(spec.n_intervals) / (spec.n_intervals - 1)
    return GroundTruth(
        weights=w,
        client_shifts=shifts,
        base_logit=spec.base_logit,
        time_trend_per_interval=trend,
        boundaries=spec.grid().boundaries,
    )


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[str, SurvivalRecord]]:
    """Draw the full multi-client dataset as (region, record) pairs."""
    truth = ground_truth(spec)
    grid = spec.grid()
    width = spec.interval_width
    horizon = grid.horizon
    out: list[tuple[str, SurvivalRecord]] = []
    for k, count in enumerate(spec.counts()):
        rng = derive_rng(spec.seed, "client", k)
        region = f"client_{k:02d}"
        x = rng.normal(0.0, 1.0, size=(count, spec.n_features))
        hazards = truth.hazard_matrix(x, k)

        # event interval: first u < h within the window, else geometric
        # continuation at the final hazard
        draws = rng.uniform(size=(count, spec.n_intervals))
        hit = draws < hazards
        has_event = hit.any(axis=1)
        interval = np.where(has_event, hit.argmax(axis=1) + 1, 0)
        survivors = ~has_event
        if np.any(survivors):
            tail_p = np.clip(hazards[survivors, -1], 1e-12, 1.0)
            extra = rng.geometric(tail_p)
            interval[survivors] = spec.n_intervals + extra
        in_interval = rng.uniform(size=count)
        event_times = (interval - 1 + in_interval) * width

        exposed = rng.uniform(size=count) < spec.censoring_rate
        censor_times = np.where(exposed, rng.uniform(0.0, horizon, size=count), np.inf)
        censored = censor_times < event_times
        times = np.where(censored, censor_times, event_times)
        events = (~censored).astype(int)

        for i in range(count):
            out.append(
                (region, SurvivalRecord(x[i], float(times[i]), int(events[i])))
            )
    return out


def synthetic_schema(spec: SyntheticSpec) -> DatasetSchema:
    return DatasetSchema(
        features={f"x{i}": "numeric" for i in range(spec.n_features)},
        time_column="time",
        event_column="event",
        region_column="region",
    )


def write_dataset(
    pairs: list[tuple[str, SurvivalRecord]],
    spec: SyntheticSpec,
    out_dir,
) -> dict[str, Path]:
    """Persist data.csv plus the ground-truth and schema sidecars.

    Float fields use repr (shortest round-trip), so identical specs produce
    byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_features = spec.n_features
    data_path = out / "data.csv"
    with open(data_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            [f"x{i}" for i in range(n_features)] + ["time", "event", "region"]
        )
        for region, record in pairs:
            writer.writerow(
                [repr(float(v)) for v in record.covariates]
                + [repr(float(record.time)), str(record.event), region]
            )
    truth_path = out / "ground_truth.json"
    with open(truth_path, "w") as fh:
        json.dump(ground_truth(spec).to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    schema_path = out / "schema.yaml"
    synthetic_schema(spec).to_yaml(schema_path)
    return {"data": data_path, "truth": truth_path, "schema": schema_path}
