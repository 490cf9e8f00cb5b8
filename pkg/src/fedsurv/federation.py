"""Simulated cross-silo training: client sampling, private local updates,
weighted aggregation, and per-client privacy ledgers.

Clients execute sequentially in id order with per-(seed, client, round,
purpose) random streams, so runs are bit-reproducible and safe to parallelise
without changing results. Aggregation is pure post-processing and never
touches a ledger.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from fedsurv.network import (
    HazardNetwork,
    batch_nll,
    per_sample_gradients,
)
from fedsurv.optim import AdamState, DivergenceError, adam_step, sgd_step
from fedsurv.privacy import (
    BdpConfig,
    BdpLedger,
    DpConfig,
    PrivacySpend,
    RdpLedger,
    _replacement_deviations,
    bdp_finalize,
    rdp_to_dp,
    sanitize_batch,
)
from fedsurv.rng import derive_rng

logger = logging.getLogger(__name__)

REGIMES = ("none", "classical", "bayesian")
# below this many records a client cannot support replacement estimation and
# falls back to the closed-form classical accountant
FALLBACK_MIN_RECORDS = 100


class RoundFailureError(RuntimeError):
    def __init__(self, round_index: int, client_id: str, message: str):
        super().__init__(f"round {round_index}, client {client_id}: {message}")
        self.round_index = round_index
        self.client_id = client_id


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 5
    participation: float = 1.0
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    regime: str = "none"
    weighting: str = "samples"

    def __post_init__(self) -> None:
        if self.rounds < 1 or self.local_epochs < 0 or self.batch_size < 1:
            raise ValueError("rounds >= 1, epochs >= 0, batch size >= 1 required")
        if not 0 < self.participation <= 1:
            raise ValueError("participation must be in (0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown privacy regime {self.regime!r}")
        if self.weighting not in ("samples", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")


@dataclass
class ClientState:
    """One silo: encoded covariates, discretized targets, and its ledger."""

    client_id: str
    x: np.ndarray
    survived: np.ndarray
    failed: np.ndarray
    ledger: RdpLedger | BdpLedger | None = None
    fallback: bool = False
    linear_epsilon: float = 0.0
    linear_delta: float = 0.0

    def __post_init__(self) -> None:
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.survived = np.atleast_2d(np.asarray(self.survived))
        self.failed = np.atleast_2d(np.asarray(self.failed))
        if not (len(self.x) == len(self.survived) == len(self.failed)):
            raise ValueError("covariates and targets must align")
        if len(self.x) == 0:
            raise ValueError(f"client {self.client_id} has no records")

    @property
    def n_records(self) -> int:
        return self.x.shape[0]


@dataclass
class RoundReport:
    round_index: int
    participants: list[str]
    train_loss: dict[str, float]
    epsilon: dict[str, float]
    epsilon_linear: dict[str, float]
    delta: dict[str, float]
    weights: dict[str, float]
    checksum: str

    def to_dict(self) -> dict:
        return {
            "round": self.round_index,
            "participants": self.participants,
            "train_loss": self.train_loss,
            "epsilon": _jsonable(self.epsilon),
            "epsilon_linear": _jsonable(self.epsilon_linear),
            "delta": self.delta,
            "weights": self.weights,
            "checksum": self.checksum,
        }


def _jsonable(values: dict[str, float]) -> dict[str, float | None]:
    return {k: (None if math.isinf(v) else v) for k, v in values.items()}


@dataclass
class ClientSpend:
    """Final per-client guarantee in both accounting modes."""

    client_id: str
    regime: str
    epsilon: float
    delta: float
    order: float | None
    epsilon_linear: float
    delta_linear: float
    fallback: bool


@dataclass
class FederationResult:
    model: HazardNetwork
    rounds: list[RoundReport]
    spends: dict[str, ClientSpend]


def sample_clients(
    n_clients: int, participation: float, rng: np.random.Generator
) -> list[int]:
    """floor(p * K) distinct client indices (at least one), sorted."""
    if n_clients < 1:
        raise ValueError("need at least one client")
    if not 0 < participation <= 1:
        raise ValueError("participation must be in (0, 1]")
    size = max(1, int(math.floor(participation * n_clients)))
    chosen = rng.choice(n_clients, size=size, replace=False)
    return sorted(int(c) for c in chosen)


def _init_ledger(regime: str, client: ClientState, bdp: BdpConfig | None) -> None:
    client.fallback = regime == "bayesian" and client.n_records < FALLBACK_MIN_RECORDS
    if regime == "none":
        client.ledger = None
    elif regime == "classical" or client.fallback:
        client.ledger = RdpLedger()
    else:
        lambdas = bdp.lambda_grid if bdp is not None else BdpConfig().lambda_grid
        client.ledger = BdpLedger(lambdas=tuple(lambdas))


def _spend_from_costs(
    regime: str,
    ledger: RdpLedger | BdpLedger | None,
    costs: np.ndarray | None,
    dp: DpConfig | None,
    bdp: BdpConfig | None,
) -> PrivacySpend:
    """Convert a cost vector (on the ledger's order grid) to a guarantee."""
    if regime == "none" or ledger is None:
        return PrivacySpend(epsilon=math.inf, delta=0.0, regime="none")
    if isinstance(ledger, RdpLedger):
        view = RdpLedger(ledger.orders, costs.copy(), ledger.steps)
        return rdp_to_dp(view, dp.delta if dp else DpConfig().delta)
    cfg = bdp if bdp is not None else BdpConfig()
    view = BdpLedger(ledger.lambdas, costs.copy(), ledger.steps)
    return bdp_finalize(view, cfg.beta, cfg.gamma)


def local_train(
    client: ClientState,
    model: HazardNetwork,
    config: FederationConfig,
    dp: DpConfig | None = None,
    bdp: BdpConfig | None = None,
    round_index: int = 0,
    base_seed: int = 42,
) -> tuple[HazardNetwork, float, PrivacySpend]:
    """Run the client's local epochs from a broadcast model.

    Returns the updated model, the mean per-record train loss, and the
    privacy spent by this round alone (converted from the ledger increment).
    Regime "none" skips clipping, noise and ledger updates entirely.
    """
    regime = config.regime
    if regime != "none" and dp is None:
        raise ValueError("private regimes need a DpConfig")
    if regime != "none" and client.ledger is None:
        _init_ledger(regime, client, bdp)
    use_classical = regime == "classical" or (regime == "bayesian" and client.fallback)
    if regime == "bayesian" and not client.fallback and bdp is None:
        raise ValueError("bayesian regime needs a BdpConfig")
    # noise_multiplier 0 is a test-only mode: no noise is injected and no
    # finite budget exists, so ledger accounting is skipped
    account = dp is not None and dp.noise_multiplier > 0

    work = model.copy()
    params = work.params
    opt_state = AdamState.zeros(params.size) if config.optimizer == "adam" else None
    shuffle_rng = derive_rng(base_seed, "shuffle", client.client_id, round_index)
    noise_rng = derive_rng(base_seed, "noise", client.client_id, round_index)
    mc_rng = derive_rng(base_seed, "mc", client.client_id, round_index)

    n = client.n_records
    batch_size = min(config.batch_size, n)
    q = config.batch_size / n if regime != "none" else 0.0
    cost_before = None if client.ledger is None else client.ledger.costs.copy()

    total_loss = 0.0
    total_records = 0
    for _ in range(config.local_epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            bx = client.x[idx]
            bs = client.survived[idx]
            bf = client.failed[idx]
            loss = batch_nll(work, bx, bs, bf)
            if not math.isfinite(loss):
                raise RoundFailureError(round_index, client.client_id, "loss diverged")
            total_loss += loss
            total_records += idx.size

            if regime == "none":
                grad = per_sample_gradients(work, bx, bs, bf).mean(axis=0)
            else:
                per_sample = per_sample_gradients(work, bx, bs, bf)
                if use_classical:
                    grad = sanitize_batch(
                        per_sample, dp.clip_norm, dp.noise_multiplier, noise_rng
                    )
                    if account:
                        client.ledger.step(q, dp.noise_multiplier)
                else:
                    pool = np.setdiff1d(np.arange(n), idx, assume_unique=False)
                    if pool.size == 0:
                        raise RoundFailureError(
                            round_index,
                            client.client_id,
                            "empty replacement pool (batch covers the dataset)",
                        )
                    deltas = _replacement_deviations(
                        per_sample,
                        work,
                        client.x[pool],
                        client.survived[pool],
                        client.failed[pool],
                        bdp.mc_samples,
                        dp.clip_norm,
                        mc_rng,
                    )
                    if account:
                        # deviations in clip-norm units so the moment ratio
                        # matches the injected noise std sigma * C
                        client.ledger.step(
                            deltas / dp.clip_norm**2, q, dp.noise_multiplier, bdp.gamma
                        )
                        client.ledger.worst_case_delta = (
                            2.0 * dp.clip_norm / idx.size
                        ) ** 2
                    grad = sanitize_batch(
                        per_sample,
                        dp.clip_norm,
                        dp.noise_multiplier,
                        noise_rng,
                        noise_std=dp.noise_multiplier * dp.clip_norm,
                    )
            try:
                if opt_state is not None:
                    params[:] = adam_step(
                        params, grad, opt_state, config.learning_rate
                    )
                else:
                    params[:] = sgd_step(params, grad, config.learning_rate)
            except DivergenceError as exc:
                raise RoundFailureError(round_index, client.client_id, str(exc))

    mean_loss = total_loss / total_records if total_records else 0.0
    if client.ledger is None:
        spend = PrivacySpend(epsilon=0.0, delta=0.0, regime="none")
    else:
        increment = client.ledger.costs - cost_before
        spend = _spend_from_costs(regime, client.ledger, increment, dp, bdp)
    return work, mean_loss, spend


def aggregate(updates: list[tuple[HazardNetwork, int]]) -> HazardNetwork:
    """Parameter-wise average weighted by record counts."""
    if not updates:
        raise ValueError("nothing to aggregate")
    dims = updates[0][0].layer_dims
    if any(m.layer_dims != dims for m, _ in updates):
        raise ValueError("model shapes do not match")
    total = float(sum(n for _, n in updates))
    params = np.zeros_like(updates[0][0].params)
    for model, n in updates:
        params += (n / total) * model.params
    return HazardNetwork(dims, params)


def run_federated(
    clients: list[ClientState],
    config: FederationConfig,
    model: HazardNetwork,
    dp: DpConfig | None = None,
    bdp: BdpConfig | None = None,
    seed: int = 42,
) -> FederationResult:
    """The full round loop: sample, broadcast, locally train, aggregate."""
    if not clients:
        raise ValueError("need at least one client")
    for client in clients:
        _init_ledger(config.regime, client, bdp)
        client.linear_epsilon = 0.0
        client.linear_delta = 0.0

    reports: list[RoundReport] = []
    global_model = model.copy()
    for round_index in range(config.rounds):
        rng = derive_rng(seed, "sample", round_index)
        chosen = sample_clients(len(clients), config.participation, rng)
        updates: list[tuple[HazardNetwork, int]] = []
        losses: dict[str, float] = {}
        for ci in chosen:
            client = clients[ci]
            updated, loss, round_spend = local_train(
                client, global_model, config, dp, bdp, round_index, seed
            )
            weight = client.n_records if config.weighting == "samples" else 1
            updates.append((updated, weight))
            losses[client.client_id] = loss
            if config.regime != "none":
                client.linear_epsilon += round_spend.epsilon
                client.linear_delta += round_spend.delta
        global_model = aggregate(updates)

        total_weight = float(sum(n for _, n in updates))
        spends_now = {
            clients[ci].client_id: _current_spend(clients[ci], config.regime, dp, bdp)
            for ci in chosen
        }
        reports.append(
            RoundReport(
                round_index=round_index,
                participants=[clients[ci].client_id for ci in chosen],
                train_loss=losses,
                epsilon={k: s.epsilon for k, s in spends_now.items()},
                epsilon_linear={
                    clients[ci].client_id: clients[ci].linear_epsilon for ci in chosen
                },
                delta={k: s.delta for k, s in spends_now.items()},
                weights={
                    clients[ci].client_id: n / total_weight
                    for (_, n), ci in zip(updates, chosen)
                },
                checksum=global_model.checksum(),
            )
        )
        logger.info(
            "round %d: %d client(s), mean loss %.4f",
            round_index,
            len(chosen),
            float(np.mean(list(losses.values()))),
        )

    spends = {
        c.client_id: ClientSpend(
            client_id=c.client_id,
            regime=config.regime,
            epsilon=_current_spend(c, config.regime, dp, bdp).epsilon,
            delta=_current_spend(c, config.regime, dp, bdp).delta,
            order=_current_spend(c, config.regime, dp, bdp).order,
            epsilon_linear=c.linear_epsilon,
            delta_linear=c.linear_delta,
            fallback=c.fallback,
        )
        for c in clients
    }
    return FederationResult(model=global_model, rounds=reports, spends=spends)


def _current_spend(
    client: ClientState, regime: str, dp: DpConfig | None, bdp: BdpConfig | None
) -> PrivacySpend:
    if client.ledger is None:
        return PrivacySpend(epsilon=math.inf, delta=0.0, regime="none")
    return _spend_from_costs(regime, client.ledger, client.ledger.costs, dp, bdp)


def run_centralized(
    x: np.ndarray,
    survived: np.ndarray,
    failed: np.ndarray,
    config: FederationConfig,
    model: HazardNetwork,
    dp: DpConfig | None = None,
    bdp: BdpConfig | None = None,
    seed: int = 42,
) -> FederationResult:
    """Same machinery on a single pooled client (the baseline)."""
    pooled = ClientState(client_id="pooled", x=x, survived=survived, failed=failed)
    cfg = FederationConfig(
        rounds=config.rounds,
        local_epochs=config.local_epochs,
        participation=1.0,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        optimizer=config.optimizer,
        regime=config.regime,
        weighting=config.weighting,
    )
    return run_federated([pooled], cfg, model, dp, bdp, seed)
