"""Survival evaluation: Kaplan-Meier, time-dependent concordance, IPCW Brier
scores, expected credit loss, and calibration curves.

Conventions (documented once, used throughout):

* predicted survival is a step function, right-continuous at interval ends:
  S(t | x) = prod_{l : tau_l <= t} (1 - h_l(x));
* concordance ties in predicted survival count 0.5 per pair;
* the censoring-survival estimate is evaluated left-continuously at event
  times and right-continuously at horizons, with values below ``G_FLOOR``
  clamped (counted and logged).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from fedsurv.grid import TimeGrid

logger = logging.getLogger(__name__)

G_FLOOR = 1e-4


# ---------------------------------------------------------------------------
# Kaplan-Meier


@dataclass(frozen=True)
class KmCurve:
    """Product-limit estimate: step function dropping at observed times."""

    times: np.ndarray  # unique observed times, ascending
    survival: np.ndarray  # estimate just after each time
    at_risk: np.ndarray
    events: np.ndarray
    greenwood: np.ndarray  # cumulative sum d / (r (r - d)) per time

    def eval(self, t: np.ndarray | float) -> np.ndarray | float:
        """Right-continuous evaluation S(t)."""
        idx = np.searchsorted(self.times, t, side="right") - 1
        return self._pick(idx)

    def eval_left(self, t: np.ndarray | float) -> np.ndarray | float:
        """Left limit S(t-): drops strictly before t only."""
        idx = np.searchsorted(self.times, t, side="left") - 1
        return self._pick(idx)

    def _pick(self, idx):
        scalar = np.isscalar(idx) or np.ndim(idx) == 0
        idx = np.atleast_1d(idx)
        out = np.where(idx < 0, 1.0, self.survival[np.clip(idx, 0, None)])
        return float(out[0]) if scalar else out

    def confidence_band(self, z: float = 1.959963984540054) -> tuple[np.ndarray, np.ndarray]:
        """Greenwood plug-in band S +- z * S * sqrt(cumsum), clipped to [0, 1].

        The variance term is infinite once the estimate reaches zero; the
        band collapses to the point there.
        """
        with np.errstate(invalid="ignore"):
            se = np.where(
                self.survival > 0, self.survival * np.sqrt(self.greenwood), 0.0
            )
        return (
            np.clip(self.survival - z * se, 0.0, 1.0),
            np.clip(self.survival + z * se, 0.0, 1.0),
        )


def kaplan_meier(times: np.ndarray, events: np.ndarray) -> KmCurve:
    """Product-limit estimator of the survival function.

    Pass reversed indicators (1 - events) to estimate the censoring
    distribution. All-censored input yields the constant-1 curve.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if times.size == 0:
        raise ValueError("need at least one observation")
    if np.any(times < 0):
        raise ValueError("times must be >= 0")

    order = np.argsort(times, kind="stable")
    times = times[order]
    events = events[order]
    uniq, start = np.unique(times, return_index=True)
    n = times.size
    # at risk at u: subjects with observed time >= u
    at_risk = n - start
    d = np.add.reduceat(events, start)

    with np.errstate(divide="ignore", invalid="ignore"):
        factors = 1.0 - d / at_risk
        survival = np.cumprod(factors)
        gw_terms = np.where(
            at_risk > d, d / (at_risk * (at_risk - d).astype(float)), np.inf
        )
        gw_terms = np.where(d > 0, gw_terms, 0.0)
    return KmCurve(
        times=uniq,
        survival=survival,
        at_risk=at_risk.astype(int),
        events=d.astype(int),
        greenwood=np.cumsum(gw_terms),
    )


# ---------------------------------------------------------------------------
# predicted-survival step lookup


def survival_at(curves: np.ndarray, grid: TimeGrid, t: float) -> np.ndarray:
    """Predicted S(t | x) for every subject from discrete curves (n, T)."""
    curves = np.atleast_2d(curves)
    bounds = np.asarray(grid.boundaries)
    l = int(np.searchsorted(bounds[1:], t, side="right"))
    if l == 0:
        return np.ones(curves.shape[0])
    return curves[:, min(l, grid.n_intervals) - 1]


# ---------------------------------------------------------------------------
# concordance


def _pair_contributions(
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-event concordance contributions (numerator, denominator) keyed by
    the event subject's time; horizons then select events with T_i <= t*."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    curves = np.atleast_2d(curves)
    ev_idx = np.flatnonzero(events == 1)
    nums = np.zeros(ev_idx.size)
    dens = np.zeros(ev_idx.size)
    for pos, i in enumerate(ev_idx):
        s_all = survival_at(curves, grid, times[i])
        later = times > times[i]
        if not np.any(later):
            continue
        s_i = s_all[i]
        s_j = s_all[later]
        nums[pos] = np.sum(s_j > s_i) + 0.5 * np.sum(s_j == s_i)
        dens[pos] = s_j.size
    return times[ev_idx], nums, dens


def c_index_at(
    horizon: float,
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
) -> float | None:
    """Time-dependent concordance at one horizon.

    Admissible pairs: i with an event at T_i <= horizon against every j with
    T_j > T_i; concordant when the model gives i the lower predicted
    survival at T_i. Returns None when no admissible pair exists.
    """
    ev_times, nums, dens = _pair_contributions(curves, grid, times, events)
    sel = ev_times <= horizon
    total = dens[sel].sum()
    if total == 0:
        return None
    return float(nums[sel].sum() / total)


def c_index_profile(
    horizons: np.ndarray,
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
) -> list[float | None]:
    """c_index_at over many horizons, sharing the per-event pass."""
    ev_times, nums, dens = _pair_contributions(curves, grid, times, events)
    out: list[float | None] = []
    for t in horizons:
        sel = ev_times <= t
        total = dens[sel].sum()
        out.append(float(nums[sel].sum() / total) if total > 0 else None)
    return out


def mean_c_index(
    horizons: np.ndarray,
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
) -> tuple[float | None, int]:
    """Arithmetic mean of defined per-horizon values; also returns how many
    horizons were undefined (excluded)."""
    values = c_index_profile(horizons, curves, grid, times, events)
    defined = [v for v in values if v is not None]
    undefined = len(values) - len(defined)
    if undefined:
        logger.info("mean_c_index: %d undefined horizon(s) excluded", undefined)
    if not defined:
        return None, undefined
    return float(np.mean(defined)), undefined


# ---------------------------------------------------------------------------
# Brier


def brier_at(
    horizon: float,
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
    censoring: KmCurve | None,
) -> float:
    """Censoring-weighted squared error at one horizon.

    Subjects with an event by the horizon contribute S(t*|x)^2 weighted by
    1/G(T_i-); survivors contribute (1 - S(t*|x))^2 weighted by 1/G(t*).
    ``censoring=None`` means no censoring (G identically 1).
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    s_star = survival_at(curves, grid, horizon)
    died = (times <= horizon) & (events == 1)
    alive = times > horizon

    if censoring is None:
        g_event = np.ones(int(died.sum()))
        g_star = 1.0
    else:
        g_event = np.asarray(censoring.eval_left(times[died]), dtype=float)
        g_star = float(censoring.eval(horizon))

    clamped = int(np.sum(g_event < G_FLOOR)) + int(g_star < G_FLOOR)
    if clamped:
        logger.warning(
            "brier_at(t*=%s): clamped %d censoring weight(s) below %g",
            horizon,
            clamped,
            G_FLOOR,
        )
    g_event = np.maximum(g_event, G_FLOOR)
    g_star = max(g_star, G_FLOOR)

    total = float(np.sum(s_star[died] ** 2 / g_event))
    total += float(np.sum((1.0 - s_star[alive]) ** 2) / g_star)
    return total / times.size


def integrated_brier(horizons: np.ndarray, brier_values: np.ndarray) -> float:
    """Trapezoid rule over (horizon, BS) pairs, normalized by the span."""
    t = np.asarray(horizons, dtype=float)
    bs = np.asarray(brier_values, dtype=float)
    if t.size < 2:
        raise ValueError("need at least two horizons")
    if not np.all(np.diff(t) > 0):
        raise ValueError("horizons must be strictly increasing")
    panels = 0.5 * (bs[1:] + bs[:-1]) * np.diff(t)
    return float(panels.sum() / (t[-1] - t[0]))


# ---------------------------------------------------------------------------
# expected credit loss


def expected_credit_loss(
    hazards: np.ndarray,
    lgd: np.ndarray,
    ead: np.ndarray,
    mode: str = "unconditional",
) -> float:
    """Lifetime loss: sum_t P(default in interval t) * LGD_t * EAD_t.

    The default probability is the unconditional S_{t-1} * h_t (S_0 = 1);
    ``mode="conditional"`` uses the raw hazard instead.
    """
    h = np.asarray(hazards, dtype=float)
    lgd = np.asarray(lgd, dtype=float)
    ead = np.asarray(ead, dtype=float)
    if h.shape != lgd.shape or h.shape != ead.shape:
        raise ValueError("hazards, lgd and ead must share a length")
    if np.any(lgd < 0) or np.any(ead < 0):
        raise ValueError("lgd and ead must be nonnegative")
    if mode == "unconditional":
        prior_survival = np.concatenate(([1.0], np.cumprod(1.0 - h)[:-1]))
        p_default = prior_survival * h
    elif mode == "conditional":
        p_default = h
    else:
        raise ValueError(f"unknown mode {mode!r}")
    logger.debug("expected_credit_loss mode=%s", mode)
    return float(np.sum(p_default * lgd * ead))


# ---------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class CalibrationCurve:
    """Observed vs predicted survival on a shared time grid (plot-ready)."""

    times: np.ndarray
    km: np.ndarray
    km_lo: np.ndarray
    km_hi: np.ndarray
    model_mean: np.ndarray

    def rows(self) -> list[dict]:
        return [
            {
                "time": float(t),
                "km": float(k),
                "km_lo": float(lo),
                "km_hi": float(hi),
                "model_mean": float(m),
            }
            for t, k, lo, hi, m in zip(
                self.times, self.km, self.km_lo, self.km_hi, self.model_mean
            )
        ]


def calibration_curve(
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
    eval_times: np.ndarray | None = None,
) -> CalibrationCurve:
    """Mean predicted survival against the Kaplan-Meier estimate with its
    Greenwood 95% band, at the grid's interval ends by default."""
    if eval_times is None:
        eval_times = np.asarray(grid.boundaries[1:])
    km = kaplan_meier(times, events)
    lo_steps, hi_steps = km.confidence_band()
    idx = np.searchsorted(km.times, eval_times, side="right") - 1

    def pick(values: np.ndarray) -> np.ndarray:
        return np.where(idx < 0, 1.0, values[np.clip(idx, 0, None)])

    model_mean = np.array(
        [float(np.mean(survival_at(curves, grid, t))) for t in eval_times]
    )
    return CalibrationCurve(
        times=np.asarray(eval_times, dtype=float),
        km=pick(km.survival),
        km_lo=pick(lo_steps),
        km_hi=pick(hi_steps),
        model_mean=model_mean,
    )


# ---------------------------------------------------------------------------
# report


def default_eval_times(
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
    upper_quantile: float = 0.95,
) -> np.ndarray:
    """Interval ends restricted to [first event time, upper quantile of
    observed times]; falls back to all ends up to the last observation when
    the restriction leaves fewer than two horizons."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    ends = np.asarray(grid.boundaries[1:])
    if np.any(events == 1):
        t_min = float(times[events == 1].min())
    else:
        t_min = float(ends[0])
    t_max = float(np.quantile(times, upper_quantile))
    chosen = ends[(ends >= t_min) & (ends <= t_max)]
    if chosen.size < 2:
        chosen = ends[ends <= times.max()]
    if chosen.size < 2:
        chosen = ends[:2]
    return chosen


@dataclass
class MetricReport:
    """Per-horizon and aggregate discrimination/accuracy figures."""

    horizons: list[float]
    c_index: list[float | None]
    mean_c: float | None
    undefined_horizons: int
    brier: list[float]
    ibs: float
    n_subjects: int
    n_events_by_horizon: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "horizons": self.horizons,
            "c_index": self.c_index,
            "mean_c_index": self.mean_c,
            "undefined_horizons": self.undefined_horizons,
            "brier": self.brier,
            "ibs": self.ibs,
            "n_subjects": self.n_subjects,
            "n_events_by_horizon": self.n_events_by_horizon,
        }


def evaluate_predictions(
    curves: np.ndarray,
    grid: TimeGrid,
    times: np.ndarray,
    events: np.ndarray,
    censoring: KmCurve | None,
    horizons: np.ndarray | None = None,
) -> MetricReport:
    """Full metric sweep for one prediction set."""
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if horizons is None:
        horizons = default_eval_times(grid, times, events)
    horizons = np.asarray(horizons, dtype=float)

    c_values = c_index_profile(horizons, curves, grid, times, events)
    defined = [v for v in c_values if v is not None]
    mean_c = float(np.mean(defined)) if defined else None
    bs = np.array(
        [brier_at(t, curves, grid, times, events, censoring) for t in horizons]
    )
    ibs = integrated_brier(horizons, bs) if horizons.size >= 2 else float(bs[0])
    n_by_h = [int(np.sum((times <= t) & (events == 1))) for t in horizons]
    return MetricReport(
        horizons=[float(t) for t in horizons],
        c_index=c_values,
        mean_c=mean_c,
        undefined_horizons=len(c_values) - len(defined),
        brier=[float(b) for b in bs],
        ibs=float(ibs),
        n_subjects=int(times.size),
        n_events_by_horizon=n_by_h,
    )
