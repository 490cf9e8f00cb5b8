"""Experiment configuration: YAML in, fully-resolved defaults out."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from fedsurv.federation import REGIMES, FederationConfig
from fedsurv.privacy import BdpConfig, DpConfig
from fedsurv.synthetic import SyntheticSpec

MODES = ("centralized", "federated")


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


@dataclass(frozen=True)
class CsvSource:
    path: str
    schema: str


@dataclass(frozen=True)
class PrivacySettings:
    clip_norm: float = 1.0
    delta: float = 1e-5
    sigma: float | None = None  # explicit noise multiplier wins over target
    target_epsilon: float | None = 10.0
    bdp: BdpConfig = field(default_factory=BdpConfig)

    def resolved_dp(self, sigma: float) -> DpConfig:
        return DpConfig(
            clip_norm=self.clip_norm, noise_multiplier=sigma, delta=self.delta
        )


@dataclass(frozen=True)
class SplitSettings:
    train_fraction: float = 0.8
    oot_cutoff: str | float | None = None


@dataclass(frozen=True)
class EvalSettings:
    horizons: tuple[float, ...] | None = None  # None -> data-driven default
    upper_quantile: float = 0.95


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    synthetic: SyntheticSpec | None = None
    csv: CsvSource | None = None
    hidden_layers: tuple[int, ...] = (128, 64, 64, 32, 32)
    federation: FederationConfig = field(default_factory=FederationConfig)
    modes: tuple[str, ...] = MODES
    regimes: tuple[str, ...] = ("none", "classical", "bayesian")
    privacy: PrivacySettings = field(default_factory=PrivacySettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    eval: EvalSettings = field(default_factory=EvalSettings)
    seeds: tuple[int, ...] = (42, 43, 44, 45, 46)
    min_client_size: int = 1000
    output_dir: str = "runs"

    def __post_init__(self) -> None:
        if (self.synthetic is None) == (self.csv is None):
            raise ConfigError("exactly one dataset source (synthetic or csv) required")
        if not self.seeds:
            raise ConfigError("at least one seed required")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise ConfigError(f"unknown regime {regime!r}")
        needs_privacy = any(r != "none" for r in self.regimes)
        if needs_privacy:
            if self.privacy.sigma is None and self.privacy.target_epsilon is None:
                raise ConfigError(
                    "private regimes need privacy.sigma or privacy.target_epsilon"
                )
            if self.privacy.sigma is not None and self.privacy.sigma <= 0:
                raise ConfigError("privacy.sigma must be positive")
            try:
                self.privacy.bdp.validate()
            except ValueError as exc:
                raise ConfigError(f"privacy.bdp: {exc}") from exc

    def scenarios(self) -> list[tuple[str, str]]:
        return [(mode, regime) for mode in self.modes for regime in self.regimes]

    def to_dict(self) -> dict:
        payload = {
            "name": self.name,
            "dataset": (
                {"synthetic": asdict(self.synthetic)}
                if self.synthetic is not None
                else {"csv": asdict(self.csv)}
            ),
            "model": {"hidden": list(self.hidden_layers)},
            "federation": asdict(self.federation),
            "modes": list(self.modes),
            "regimes": list(self.regimes),
            "privacy": {
                "clip_norm": self.privacy.clip_norm,
                "delta": self.privacy.delta,
                "sigma": self.privacy.sigma,
                "target_epsilon": self.privacy.target_epsilon,
                "bdp": asdict(self.privacy.bdp),
            },
            "split": asdict(self.split),
            "eval": {
                "horizons": (
                    list(self.eval.horizons) if self.eval.horizons else None
                ),
                "upper_quantile": self.eval.upper_quantile,
            },
            "seeds": list(self.seeds),
            "min_client_size": self.min_client_size,
            "output_dir": self.output_dir,
        }
        return payload


def _tupled(value, cast=float):
    if value is None:
        return None
    return tuple(cast(v) for v in value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a parsed YAML mapping, applying defaults."""
    try:
        dataset = raw.get("dataset", {})
        synthetic = None
        csv_source = None
        if "synthetic" in dataset:
            synthetic = SyntheticSpec.from_dict(dataset["synthetic"])
        if "csv" in dataset:
            csv_source = CsvSource(**dataset["csv"])

        fed_raw = dict(raw.get("federation", {}))
        fed_raw.pop("regime", None)  # regimes are scenario-level
        federation = FederationConfig(**fed_raw)

        priv_raw = dict(raw.get("privacy", {}))
        bdp_raw = dict(priv_raw.pop("bdp", {}))
        if "lambda_grid" in bdp_raw:
            bdp_raw["lambda_grid"] = tuple(int(v) for v in bdp_raw["lambda_grid"])
        privacy = PrivacySettings(bdp=BdpConfig(**bdp_raw), **priv_raw)

        eval_raw = dict(raw.get("eval", {}))
        eval_settings = EvalSettings(
            horizons=_tupled(eval_raw.get("horizons")),
            upper_quantile=float(eval_raw.get("upper_quantile", 0.95)),
        )

        return ExperimentConfig(
            name=str(raw.get("name", "experiment")),
            synthetic=synthetic,
            csv=csv_source,
            hidden_layers=_tupled(
                raw.get("model", {}).get("hidden", (128, 64, 64, 32, 32)), int
            ),
            federation=federation,
            modes=tuple(raw.get("modes", MODES)),
            regimes=tuple(raw.get("regimes", ("none", "classical", "bayesian"))),
            privacy=privacy,
            split=SplitSettings(**raw.get("split", {})),
            eval=eval_settings,
            seeds=tuple(int(s) for s in raw.get("seeds", (42, 43, 44, 45, 46))),
            min_client_size=int(raw.get("min_client_size", 1000)),
            output_dir=str(raw.get("output_dir", "runs")),
        )
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return config_from_dict(raw)


def write_resolved(config: ExperimentConfig, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)
