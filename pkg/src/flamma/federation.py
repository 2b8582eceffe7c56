"""Round orchestration for FLamma and the FedAvg / FedProx / q-FFL baselines.

One FLamma round:

1. on refresh rounds, score the clients that trained since the last refresh
   and pick the top-K by contribution (otherwise keep the cached selection);
2. the server sets the decay factor from the selected clients' optima;
3. each selected client best-responds with an integer epoch count and runs
   decay-scaled SGD;
4. the server aggregates with data-share weights renormalized over the
   selection and records utilities and metrics.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import analysis
from .datasets import Dataset, Partition, client_weights, split_holdout
from .game import (
    ClientGameParams,
    GameState,
    best_response_tau,
    clamp_contribution,
    client_utility,
    optimal_gamma,
    quantize_tau,
    server_utility,
)
from .learner import Batch, ModelSpec, init_params, local_train, loss

log = logging.getLogger(__name__)

ALGORITHMS = ("flamma", "fedavg", "fedprox", "qffl")

# independent RNG streams derived from the run seed
_COST_STREAM = 101
_SELECT_STREAM = 202
_INIT_STREAM = 303
_HOLDOUT_STREAM = 404

# client_id, model before the step, stochastic gradient
ClientStepHook = Callable[[int, np.ndarray, np.ndarray], None]


@dataclass
class FederationConfig:
    algorithm: str = "flamma"
    num_clients: int = 20
    clients_per_round: int = 10
    total_rounds: int = 100
    lr: float = 0.05
    tau_fixed: int = 5
    tau_min: int = 1
    tau_max: int = 10
    cost_coeff_range: tuple[float, float] = (0.05, 0.5)
    gamma_min: float = 0.01
    refresh_interval: int = 10
    qffl_q: float = 1.0
    prox_mu: float = 0.01
    batch_size: int = 32
    model: str = "logistic"
    hidden_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        self.cost_coeff_range = tuple(float(v) for v in self.cost_coeff_range)
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.num_clients < 1 or not 1 <= self.clients_per_round <= self.num_clients:
            raise ValueError("need 1 <= clients_per_round <= num_clients")
        if self.total_rounds < 1:
            raise ValueError("total_rounds must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.tau_min < 0 or self.tau_max < 1 or self.tau_min > self.tau_max:
            raise ValueError(f"invalid epoch bounds tau_min={self.tau_min}, tau_max={self.tau_max}")
        if self.tau_fixed < 0:
            raise ValueError("tau_fixed must be non-negative")
        lo, hi = self.cost_coeff_range
        if len(self.cost_coeff_range) != 2 or not 0 < lo <= hi:
            raise ValueError(f"cost_coeff_range must be 0 < low <= high, got {self.cost_coeff_range}")
        if not 0 <= self.gamma_min < 1:
            raise ValueError("gamma_min must lie in [0, 1)")
        if self.refresh_interval < 1:
            raise ValueError("refresh_interval must be >= 1")
        if self.qffl_q < 0 or self.prox_mu < 0:
            raise ValueError("qffl_q and prox_mu must be non-negative")
        if self.batch_size < 1 or self.hidden_dim < 1:
            raise ValueError("batch_size and hidden_dim must be positive")
        if self.model not in ("logistic", "mlp"):
            raise ValueError(f"unknown model {self.model!r}")


@dataclass
class RoundRecord:
    """Telemetry for one round.

    ``per_client_accuracy`` holds fractions in [0, 1]; ``accuracy_variance`` is
    their population variance in percentage points squared. Baselines play no
    game, so their ``client_utilities`` and ``contributions`` are empty and
    ``server_utility`` is 0.
    """

    round: int
    algorithm: str
    gamma: float
    selected: list[int]
    epochs_chosen: dict[int, int]
    global_accuracy: float
    per_client_accuracy: dict[int, float]
    accuracy_variance: float
    client_utilities: dict[int, float]
    server_utility: float
    global_loss: float
    contributions: dict[int, float] = field(default_factory=dict)


@dataclass
class Client:
    client_id: int
    spec: ModelSpec
    train: Batch
    holdout: Optional[Batch]
    weight: float
    cost_coeff: float


@dataclass
class FederationState:
    global_w: np.ndarray
    game: GameState = field(default_factory=GameState)
    local_models: dict[int, np.ndarray] = field(default_factory=dict)
    trained_since_refresh: set[int] = field(default_factory=set)
    selection: Optional[list[int]] = None


def compute_contribution(local, global_w) -> float:
    """``1 - ||local - global|| / ||global||`` clamped to [0, 1].

    A zero global model yields 1.0 when the local model is also identical to
    it and 0.0 otherwise.
    """
    local = np.asarray(local, dtype=float)
    global_w = np.asarray(global_w, dtype=float)
    if local.shape != global_w.shape:
        raise ValueError(f"shape mismatch {local.shape} vs {global_w.shape}")
    ref = np.linalg.norm(global_w)
    if ref == 0:
        log.debug("zero global model; degenerate contribution rule applied")
        return 1.0 if np.array_equal(local, global_w) else 0.0
    return clamp_contribution(1.0 - np.linalg.norm(local - global_w) / ref)


def is_refresh_round(round: int, refresh_interval: int) -> bool:
    return (round - 1) % refresh_interval == 0


def select_clients(
    contributions: dict[int, float],
    k: int,
    round: int,
    refresh_interval: int = 10,
    cached: Optional[Sequence[int]] = None,
) -> list[int]:
    """Top-``k`` clients by contribution (lower id wins ties), refreshed every ``refresh_interval`` rounds."""
    if not contributions:
        raise ValueError("no contributions to select from")
    if not 1 <= k <= len(contributions):
        raise ValueError(f"cannot select {k} of {len(contributions)} clients")
    if cached is not None and not is_refresh_round(round, refresh_interval):
        return list(cached)
    ranked = sorted(contributions, key=lambda cid: (-contributions[cid], cid))
    return sorted(ranked[:k])


def update_gamma(params: Sequence[ClientGameParams], round: int, gamma_min: float = 0.01) -> float:
    """Mean of the selected clients' optimal decay factors; 1.0 on the first round."""
    if round == 1:
        return 1.0
    if not params:
        raise ValueError("no selected clients")
    mean = float(np.mean([optimal_gamma(p.contribution, p.cost_coeff, round, gamma_min) for p in params]))
    return min(max(mean, gamma_min), 1.0)


def aggregate(locals_: Sequence[np.ndarray], weights: Sequence[float]) -> np.ndarray:
    """Weighted mean of local models; weights are renormalized to sum to 1."""
    if len(locals_) == 0 or len(locals_) != len(weights):
        raise ValueError(f"{len(locals_)} models but {len(weights)} weights")
    stack = np.stack([np.asarray(w, dtype=float) for w in locals_])
    wts = np.asarray(weights, dtype=float)
    if np.any(wts < 0) or wts.sum() <= 0:
        raise ValueError("aggregation weights must be non-negative with positive sum")
    return np.tensordot(wts / wts.sum(), stack, axes=1)


def qffl_aggregate(global_w, locals_: Sequence[np.ndarray], losses: Sequence[float], q: float, lr: float) -> np.ndarray:
    """q-FFL server step with Lipschitz estimate ``L = 1/lr``.

    ``delta_k = L*(w - w_k)``, ``h_k = q*F_k**(q-1)*||delta_k||**2 + L*F_k**q``,
    ``w_new = w - sum(F_k**q * delta_k) / sum(h_k)``.
    """
    if q < 0:
        raise ValueError("q must be non-negative")
    if len(locals_) == 0 or len(locals_) != len(losses):
        raise ValueError(f"{len(locals_)} models but {len(losses)} losses")
    if any(not f > 0 for f in losses):
        raise ValueError("q-FFL needs strictly positive losses")
    global_w = np.asarray(global_w, dtype=float)
    L = 1.0 / lr
    num = np.zeros_like(global_w)
    den = 0.0
    for w_k, f in zip(locals_, losses):
        delta = L * (global_w - np.asarray(w_k, dtype=float))
        num += f**q * delta
        den += q * f ** (q - 1) * (delta @ delta) + L * f**q
    return global_w - num / den


def draw_cost_coeffs(config: FederationConfig) -> np.ndarray:
    lo, hi = config.cost_coeff_range
    return np.random.default_rng([config.seed, _COST_STREAM]).uniform(lo, hi, size=config.num_clients)


def _baseline_selection(config: FederationConfig, round: int) -> list[int]:
    rng = np.random.default_rng([config.seed, _SELECT_STREAM, round])
    return sorted(rng.choice(config.num_clients, size=config.clients_per_round, replace=False).tolist())


def _accuracy_or_none(spec: ModelSpec, w, batch: Optional[Batch]) -> Optional[float]:
    if spec.kind == "quadratic" or batch is None or len(batch) == 0:
        return None
    return analysis.accuracy(spec, w, batch)


def evaluate(clients: Sequence[Client], w, test: Optional[Batch] = None):
    """Global accuracy, per-client holdout accuracy and weighted training loss of ``w``.

    Without a separate test set, global accuracy is taken over the union of
    the clients' held-out slices. Quadratic models report no accuracies.
    """
    per_client = {}
    for c in clients:
        acc = _accuracy_or_none(c.spec, w, c.holdout)
        if acc is not None:
            per_client[c.client_id] = acc
    if test is None:
        parts = [c.holdout for c in clients if c.holdout is not None and len(c.holdout)]
        test = Batch(np.vstack([b.features for b in parts]), np.concatenate([b.labels for b in parts])) if parts else None
    global_acc = _accuracy_or_none(clients[0].spec, w, test)
    global_loss = sum(c.weight * loss(c.spec, w, c.train) for c in clients)
    return (0.0 if global_acc is None else global_acc), per_client, float(global_loss)


def _train_all(jobs, max_workers: int):
    if max_workers <= 1 or len(jobs) <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        futures = [pool.submit(job) for job in jobs]
        # gathered in submission (client id) order regardless of completion order
        return [f.result() for f in futures]


def run_round(
    config: FederationConfig,
    state: FederationState,
    clients: Sequence[Client],
    test: Optional[Batch] = None,
    step_hook: Optional[ClientStepHook] = None,
    max_workers: int = 1,
) -> RoundRecord:
    """Execute one round, update ``state`` in place and return its record."""
    t = state.game.round
    by_id = {c.client_id: c for c in clients}
    w_t = state.global_w
    flamma = config.algorithm == "flamma"

    if flamma:
        if is_refresh_round(t, config.refresh_interval):
            for cid in sorted(state.trained_since_refresh):
                state.game.contributions[cid] = compute_contribution(state.local_models[cid], w_t)
            state.trained_since_refresh.clear()
        contribs = state.game.contributions
        selected = select_clients(contribs, config.clients_per_round, t, config.refresh_interval, state.selection)
        params = [
            ClientGameParams(cid, by_id[cid].cost_coeff, contribs[cid], config.tau_min, config.tau_max)
            for cid in selected
        ]
        gamma = update_gamma(params, t, config.gamma_min)
        taus = [
            quantize_tau(
                best_response_tau(gamma, p.contribution, p.cost_coeff),
                config.tau_min, config.tau_max, gamma, p.contribution, p.cost_coeff,
            )
            for p in params
        ]
    else:
        selected = _baseline_selection(config, t)
        gamma = 1.0
        taus = [config.tau_fixed] * len(selected)

    prox = config.algorithm == "fedprox"

    def make_job(cid: int, tau: int):
        c = by_id[cid]
        hook = None if step_hook is None else (lambda w, g, _cid=cid: step_hook(_cid, w, g))
        return lambda: local_train(
            c.spec, w_t, c.train, tau, config.lr, gamma, config.batch_size,
            prox_mu=config.prox_mu if prox else 0.0,
            prox_anchor=w_t if prox else None,
            seed=(config.seed, cid, t),
            on_step=hook,
        )

    locals_ = _train_all([make_job(cid, tau) for cid, tau in zip(selected, taus)], max_workers)

    if config.algorithm == "qffl":
        # a perfectly fit client can report an exactly-zero loss
        losses = [max(loss(by_id[cid].spec, w_t, by_id[cid].train), 1e-12) for cid in selected]
        new_w = qffl_aggregate(w_t, locals_, losses, config.qffl_q, config.lr)
    else:
        new_w = aggregate(locals_, [by_id[cid].weight for cid in selected])

    utilities: dict[int, float] = {}
    contributions: dict[int, float] = {}
    s_util = 0.0
    if flamma:
        for p, tau in zip(params, taus):
            utilities[p.client_id] = client_utility(gamma, p.contribution, p.cost_coeff, tau)
            contributions[p.client_id] = p.contribution
        s_util = server_utility(gamma, params, taus, t)
        state.trained_since_refresh.update(selected)

    for cid, w_k in zip(selected, locals_):
        state.local_models[cid] = w_k
    state.selection = selected
    state.global_w = new_w
    state.game.gamma = gamma
    state.game.epochs = dict(zip(selected, taus))

    global_acc, per_client, global_loss = evaluate(clients, new_w, test)
    record = RoundRecord(
        round=t,
        algorithm=config.algorithm,
        gamma=gamma,
        selected=list(selected),
        epochs_chosen={cid: int(tau) for cid, tau in zip(selected, taus)},
        global_accuracy=global_acc,
        per_client_accuracy=per_client,
        accuracy_variance=analysis.accuracy_variance(per_client) if per_client else 0.0,
        client_utilities=utilities,
        server_utility=s_util,
        global_loss=global_loss,
        contributions=contributions,
    )
    state.game.round = t + 1
    return record


def init_state(config: FederationConfig, clients: Sequence[Client], w0) -> FederationState:
    return FederationState(
        global_w=np.array(w0, dtype=float),
        game=GameState(round=1, gamma=1.0, contributions={c.client_id: 1.0 for c in clients}),
    )


def simulate(
    config: FederationConfig,
    clients: Sequence[Client],
    w0,
    test: Optional[Batch] = None,
    step_hook: Optional[ClientStepHook] = None,
    max_workers: int = 1,
) -> tuple[list[RoundRecord], FederationState]:
    clients = sorted(clients, key=lambda c: c.client_id)
    if len(clients) != config.num_clients:
        raise ValueError(f"config expects {config.num_clients} clients, got {len(clients)}")
    state = init_state(config, clients, w0)
    records = [
        run_round(config, state, clients, test, step_hook, max_workers) for _ in range(config.total_rounds)
    ]
    return records, state


def build_clients(
    config: FederationConfig,
    dataset: Dataset,
    partition: Partition,
    spec: ModelSpec,
    holdout_fraction: float = 0.2,
) -> list[Client]:
    """Per-client train/holdout batches, data-share weights and drawn cost coefficients."""
    if len(partition) != config.num_clients:
        raise ValueError(f"partition has {len(partition)} clients, config expects {config.num_clients}")
    train_part, held_part = split_holdout(partition, holdout_fraction, seed=config.seed + _HOLDOUT_STREAM)
    weights = client_weights(train_part)
    costs = draw_cost_coeffs(config)
    return [
        Client(cid, spec, dataset.batch(train_part[cid]), dataset.batch(held_part[cid]), weights[cid], float(costs[i]))
        for i, cid in enumerate(sorted(partition))
    ]


def model_spec_for(config: FederationConfig, dataset: Dataset) -> ModelSpec:
    return ModelSpec(config.model, dataset.dim, dataset.num_classes, hidden_dim=config.hidden_dim)


def run_experiment(
    config: FederationConfig,
    dataset: Dataset,
    partition: Partition,
    test: Optional[Dataset] = None,
    holdout_fraction: float = 0.2,
    max_workers: int = 1,
) -> list[RoundRecord]:
    """Run ``config.total_rounds`` rounds; deterministic for a fixed ``config.seed``."""
    spec = model_spec_for(config, dataset)
    clients = build_clients(config, dataset, partition, spec, holdout_fraction)
    w0 = init_params(spec, seed=(config.seed, _INIT_STREAM))
    records, _ = simulate(config, clients, w0, None if test is None else test.batch(), max_workers=max_workers)
    return records
