"""CSV ingestion, encoding, standardization, region partitioning and splits."""

from __future__ import annotations

import csv
import datetime as _dt
import logging
from dataclasses import dataclass, field

import numpy as np
import yaml

from fedsurv.grid import SurvivalRecord

logger = logging.getLogger(__name__)

OTHER_BUCKET = "__other__"
DATE_REFERENCE = _dt.date(1970, 1, 1)


class SchemaError(ValueError):
    """The schema or a file's header does not satisfy the data contract."""


class LoadError(RuntimeError):
    """Too many malformed rows to trust the file."""


@dataclass(frozen=True)
class DatasetSchema:
    """Column roles: features (numeric or categorical), the time/event pair,
    the region partition key, and an optional origination-date column used
    for out-of-time splitting. ``drop`` lists leakage-prone columns to skip.
    """

    features: dict[str, str]
    time_column: str
    event_column: str
    region_column: str
    date_column: str | None = None
    drop: tuple[str, ...] = ()
    min_category_count: int = 10

    def __post_init__(self) -> None:
        if not self.features:
            raise SchemaError("schema declares no feature columns")
        bad = {k: v for k, v in self.features.items() if v not in ("numeric", "categorical")}
        if bad:
            raise SchemaError(f"unknown feature kinds: {bad}")
        reserved = {self.time_column, self.event_column, self.region_column}
        if len(reserved) != 3:
            raise SchemaError("time, event and region columns must be distinct")
        overlap = reserved & set(self.features)
        if overlap:
            raise SchemaError(f"feature columns overlap role columns: {overlap}")
        dropped = set(self.drop) & set(self.features)
        if dropped:
            object.__setattr__(
                self,
                "features",
                {k: v for k, v in self.features.items() if k not in dropped},
            )
            if not self.features:
                raise SchemaError("all feature columns are dropped")

    @classmethod
    def from_yaml(cls, path) -> "DatasetSchema":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        try:
            return cls(
                features={str(k): str(v) for k, v in raw["features"].items()},
                time_column=raw["time_column"],
                event_column=raw["event_column"],
                region_column=raw["region_column"],
                date_column=raw.get("date_column"),
                drop=tuple(raw.get("drop", ())),
                min_category_count=int(raw.get("min_category_count", 10)),
            )
        except KeyError as exc:
            raise SchemaError(f"schema file missing key: {exc}") from exc

    def to_yaml(self, path) -> None:
        payload = {
            "features": dict(self.features),
            "time_column": self.time_column,
            "event_column": self.event_column,
            "region_column": self.region_column,
            "date_column": self.date_column,
            "drop": list(self.drop),
            "min_category_count": self.min_category_count,
        }
        with open(path, "w") as fh:
            yaml.safe_dump(payload, fh, sort_keys=False)


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    oot_cutoff: str | float | None = None  # ISO date or days-from-reference
    seed: int = 42

    def __post_init__(self) -> None:
        if not 0 < self.train_fraction < 1:
            raise ValueError("train fraction must be in (0, 1)")

    def cutoff_days(self) -> float | None:
        if self.oot_cutoff is None:
            return None
        if isinstance(self.oot_cutoff, str):
            return float(parse_date_days(self.oot_cutoff))
        return float(self.oot_cutoff)


@dataclass
class RawRow:
    """One parsed CSV row before encoding."""

    region: str
    values: dict[str, str]
    time: float
    event: int
    date_days: float | None


def parse_date_days(text: str) -> int:
    """ISO-8601 date to days from the reference epoch."""
    return (_dt.date.fromisoformat(text.strip()) - DATE_REFERENCE).days


def read_rows(path, schema: DatasetSchema) -> list[RawRow]:
    """Parse a CSV against the schema.

    Malformed rows are logged with their line numbers; more than 1% of them
    fails the load.
    """
    rows: list[RawRow] = []
    bad: list[int] = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        header = set(reader.fieldnames or ())
        required = {schema.time_column, schema.event_column, schema.region_column}
        required |= set(schema.features)
        if schema.date_column:
            required.add(schema.date_column)
        missing = required - header
        if missing:
            raise SchemaError(f"columns missing from {path}: {sorted(missing)}")
        for line_no, record in enumerate(reader, start=2):
            try:
                t = float(record[schema.time_column])
                event = int(float(record[schema.event_column]))
                if t < 0 or event not in (0, 1):
                    raise ValueError("bad time/event")
                date_days = None
                if schema.date_column:
                    raw_date = record[schema.date_column].strip()
                    if raw_date:
                        date_days = float(parse_date_days(raw_date))
                rows.append(
                    RawRow(
                        region=record[schema.region_column].strip(),
                        values={k: record[k] for k in schema.features},
                        time=t,
                        event=event,
                        date_days=date_days,
                    )
                )
            except (ValueError, KeyError):
                bad.append(line_no)
    if bad:
        logger.warning("%s: %d malformed row(s), lines %s", path, len(bad), bad[:20])
        if len(bad) > 0.01 * max(1, len(bad) + len(rows)):
            raise LoadError(f"{path}: {len(bad)} malformed rows exceed the 1% budget")
    return rows


class FeatureEncoder:
    """Numeric passthrough (missing imputed to 0) plus one-hot categoricals
    with an explicit bucket for rare and unseen categories.

    Fit only on training rows to keep category vocabularies leak-free.
    """

    def __init__(self, schema: DatasetSchema):
        self.schema = schema
        self.categories: dict[str, list[str]] = {}
        self.feature_names: list[str] = []
        self._fitted = False

    def fit(self, rows: list[RawRow]) -> "FeatureEncoder":
        counts: dict[str, dict[str, int]] = {
            name: {}
            for name, kind in self.schema.features.items()
            if kind == "categorical"
        }
        for row in rows:
            for name in counts:
                value = row.values.get(name, "").strip()
                counts[name][value] = counts[name].get(value, 0) + 1
        self.categories = {
            name: sorted(
                v
                for v, c in per_col.items()
                if c >= self.schema.min_category_count and v != ""
            )
            for name, per_col in counts.items()
        }
        self.feature_names = []
        for name, kind in self.schema.features.items():
            if kind == "numeric":
                self.feature_names.append(name)
            else:
                for cat in self.categories[name]:
                    self.feature_names.append(f"{name}={cat}")
                self.feature_names.append(f"{name}={OTHER_BUCKET}")
        self._fitted = True
        return self

    def transform(self, rows: list[RawRow]) -> np.ndarray:
        if not self._fitted:
            raise RuntimeError("encoder must be fit before transform")
        out = np.zeros((len(rows), len(self.feature_names)))
        for r, row in enumerate(rows):
            c = 0
            for name, kind in self.schema.features.items():
                if kind == "numeric":
                    raw = row.values.get(name, "").strip()
                    try:
                        out[r, c] = float(raw) if raw else 0.0
                    except ValueError:
                        out[r, c] = 0.0  # unparseable numeric -> imputed
                    c += 1
                else:
                    cats = self.categories[name]
                    value = row.values.get(name, "").strip()
                    slot = cats.index(value) if value in cats else len(cats)
                    out[r, c + slot] = 1.0
                    c += len(cats) + 1
        return out


def load_csv(path, schema: DatasetSchema) -> list[tuple[str, SurvivalRecord]]:
    """Parse and encode a whole file (encoder fit on the same file).

    Experiment pipelines that need leak-free encoding fit the encoder on
    training rows only; this convenience entry point covers one-shot loads.
    """
    rows = read_rows(path, schema)
    if not rows:
        raise LoadError(f"{path}: no parseable rows")
    encoder = FeatureEncoder(schema).fit(rows)
    x = encoder.transform(rows)
    return [
        (row.region, SurvivalRecord(x[i], row.time, row.event))
        for i, row in enumerate(rows)
    ]


# ---------------------------------------------------------------------------
# standardization


@dataclass(frozen=True)
class Scaler:
    mean: np.ndarray
    std: np.ndarray  # zero-variance columns carry std 1 (passthrough)

    @classmethod
    def fit(cls, x: np.ndarray) -> "Scaler":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[0] == 0:
            raise ValueError("cannot fit a scaler on an empty set")
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        keep = std > 0
        mean = np.where(keep, mean, 0.0)
        std = np.where(keep, std, 1.0)
        return cls(mean=mean, std=std)

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.mean) / self.std


def standardize(
    train_records: list[SurvivalRecord], all_records: list[SurvivalRecord]
) -> tuple[list[SurvivalRecord], Scaler]:
    """Fit per-feature mean/std on the training records only and apply the
    transform to every record; constant features pass through unscaled."""
    if not train_records:
        raise ValueError("training set is empty")
    scaler = Scaler.fit(np.stack([r.covariates for r in train_records]))
    scaled = [
        SurvivalRecord(scaler.transform(r.covariates), r.time, r.event)
        for r in all_records
    ]
    return scaled, scaler


# ---------------------------------------------------------------------------
# partitioning and splits


def partition_by_region(
    pairs: list[tuple[str, SurvivalRecord]],
    min_client_size: int = 1000,
    merge_label: str = "rest",
) -> dict[str, list[SurvivalRecord]]:
    """Group records by region; regions under the size threshold merge into
    a single residual client. Logs per-client sizes and event rates."""
    by_region: dict[str, list[SurvivalRecord]] = {}
    for region, record in pairs:
        by_region.setdefault(region, []).append(record)
    out: dict[str, list[SurvivalRecord]] = {}
    rest: list[SurvivalRecord] = []
    for region in sorted(by_region):
        records = by_region[region]
        if len(records) < min_client_size and len(by_region) > 1:
            rest.extend(records)
        else:
            out[region] = records
    if rest:
        out.setdefault(merge_label, []).extend(rest)
    for region in sorted(out):
        records = out[region]
        rate = float(np.mean([r.event for r in records]))
        logger.info("client %s: n=%d event_rate=%.3f", region, len(records), rate)
    return out


def split_records(
    records: list[SurvivalRecord],
    spec: SplitSpec,
    rng: np.random.Generator,
    date_days: list[float | None] | None = None,
) -> tuple[list[SurvivalRecord], list[SurvivalRecord], list[SurvivalRecord]]:
    """(train, test, oot): records dated past the cutoff go to the
    out-of-time bucket, the rest split train/test with the caller's stream.
    The three buckets are disjoint and exhaustive."""
    cutoff = spec.cutoff_days()
    oot: list[SurvivalRecord] = []
    in_time: list[SurvivalRecord] = []
    for i, record in enumerate(records):
        day = date_days[i] if date_days is not None else None
        if cutoff is not None and day is not None and day > cutoff:
            oot.append(record)
        else:
            in_time.append(record)
    n = len(in_time)
    n_train = int(round(spec.train_fraction * n))
    order = rng.permutation(n)
    train = [in_time[i] for i in sorted(order[:n_train])]
    test = [in_time[i] for i in sorted(order[n_train:])]
    return train, test, oot
