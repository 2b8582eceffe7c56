"""Metrics, the convergence bound for decay-scaled FedAvg, and report export."""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .learner import Batch, ModelSpec, predict

# measured G^2 and sigma_k^2 are inflated by this factor before evaluating the bound
ESTIMATE_INFLATION = 1.10


def accuracy(spec: ModelSpec, w, test: Batch) -> float:
    if len(test) == 0:
        raise ValueError("empty test set")
    return float(np.mean(predict(spec, w, test.features) == test.labels))


def accuracy_variance(per_client: dict[int, float], percent: bool = True) -> float:
    """Population variance of per-client accuracies.

    Inputs are fractions; with ``percent=True`` the result is in percentage
    points squared.
    """
    if not per_client:
        raise ValueError("no per-client accuracies")
    vals = np.array([per_client[k] for k in sorted(per_client)], dtype=float)
    if percent:
        vals = 100.0 * vals
    return float(np.var(vals))


@dataclass(frozen=True)
class ConvergenceConstants:
    rho: float
    beta: float
    G2: float
    sigma2: tuple[float, ...]
    p: tuple[float, ...]
    K: int
    tau_max: int
    gamma_max: float = 1.0
    M: float = 0.0
    kappa: float = field(init=False)
    xi: float = field(init=False)
    eta: float = field(init=False)

    def __post_init__(self):
        if not self.beta >= self.rho > 0:
            raise ValueError(f"need beta >= rho > 0, got rho={self.rho}, beta={self.beta}")
        if len(self.sigma2) != len(self.p):
            raise ValueError("sigma2 and p must have one entry per client")
        object.__setattr__(self, "sigma2", tuple(float(s) for s in self.sigma2))
        object.__setattr__(self, "p", tuple(float(v) for v in self.p))
        kappa = self.beta / self.rho
        xi = max(8 * kappa, self.tau_max)
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "eta", 2.0 / (self.rho * xi))


def bound_B(c: ConvergenceConstants) -> float:
    noise = sum(pk * pk * c.gamma_max * s for pk, s in zip(c.p, c.sigma2)) / c.rho
    return noise + 6 * c.beta * c.eta**2 + 8 * (c.tau_max - 1) ** 2 * c.G2


def bound_C(c: ConvergenceConstants) -> float:
    if c.K < 1:
        raise ValueError("K must be >= 1")
    return 4.0 / c.K * c.tau_max**2 * c.G2


def bound_from_terms(kappa, rho, xi, gamma_max, M, B, C, T) -> float:
    if T < 1:
        raise ValueError("T must be >= 1")
    return kappa / T * (2 * (B + C) / rho + rho * xi * gamma_max / 2 * M)


def convergence_bound(c: ConvergenceConstants, T: int) -> float:
    """Upper bound on ``E[F(w_T)] - F*`` after ``T`` rounds."""
    return bound_from_terms(c.kappa, c.rho, c.xi, c.gamma_max, c.M, bound_B(c), bound_C(c), T)


@dataclass
class BoundReport:
    empirical_gap: float
    bound: float
    holds: bool
    gaps: list[float]
    constants: ConvergenceConstants


def check_bound_quadratic(
    num_clients: int = 10,
    K: int = 5,
    T: int = 100,
    seeds: int = 10,
    base_seed: int = 0,
    dim: int = 5,
    samples_per_client: int = 20,
    batch_size: int = 5,
    noise_std: float = 0.5,
    tau_max: int = 10,
    targets: Optional[np.ndarray] = None,
    w_init: Optional[np.ndarray] = None,
    max_workers: int = 1,
) -> BoundReport:
    """Run FLamma on ``F_i(w) = 0.5*||w - b_i||^2`` clients and compare the mean gap with the bound.

    Targets ``b_i`` (drawn from ``base_seed`` unless given) and each client's
    zero-mean gradient-noise samples are shared by all repetitions; the
    repetitions differ in the run seed. ``G^2`` (largest squared stochastic
    gradient seen), ``sigma_k^2`` (mean squared gradient noise per client) and
    ``M = ||w_1 - w*||^2`` are measured, and the first two are inflated by
    10% before the bound is evaluated with ``rho = beta = 1`` and the
    step size ``eta = 2/(rho*xi)``.
    """
    from .federation import Client, FederationConfig, simulate

    if seeds < 1:
        raise ValueError("need at least one seed")
    rng = np.random.default_rng([base_seed, 7])
    if targets is None:
        targets = rng.normal(size=(num_clients, dim))
    targets = np.asarray(targets, dtype=float).reshape(num_clients, -1)
    dim = targets.shape[1]
    w1 = np.zeros(dim) if w_init is None else np.asarray(w_init, dtype=float)

    clients = []
    for i in range(num_clients):
        noise = rng.normal(scale=noise_std, size=(samples_per_client, dim))
        noise -= noise.mean(axis=0)
        spec = ModelSpec("quadratic", dim, quadratic_target=targets[i])
        clients.append(Client(i, spec, Batch(noise, np.zeros(samples_per_client)), None, 1.0 / num_clients, 0.0))
    p = np.array([c.weight for c in clients])
    w_star = p @ targets
    f_star = 0.5 * float(p @ np.sum((targets - w_star) ** 2, axis=1))

    # eta depends only on rho, beta and tau_max
    eta = ConvergenceConstants(1.0, 1.0, 0.0, (0.0,), (1.0,), K, tau_max).eta

    g2_max = 0.0
    noise_sum = np.zeros(num_clients)
    noise_cnt = np.zeros(num_clients)
    gaps = []

    def hook(cid, w, g):
        nonlocal g2_max
        g2_max = max(g2_max, float(g @ g))
        e = g - (w - targets[cid])
        noise_sum[cid] += e @ e
        noise_cnt[cid] += 1

    for s in range(seeds):
        run_seed = base_seed * 1000 + s
        cost_rng = np.random.default_rng([run_seed, 11])
        for c in clients:
            c.cost_coeff = float(cost_rng.uniform(0.05, 0.5))
        config = FederationConfig(
            algorithm="flamma", num_clients=num_clients, clients_per_round=K, total_rounds=T,
            lr=eta, tau_min=1, tau_max=tau_max, batch_size=batch_size, seed=run_seed,
        )
        _, state = simulate(config, clients, w1, step_hook=hook, max_workers=max_workers)
        w_T = state.global_w
        f_T = 0.5 * float(p @ np.sum((targets - w_T) ** 2, axis=1))
        gaps.append(f_T - f_star)

    sigma2 = np.where(noise_cnt > 0, noise_sum / np.maximum(noise_cnt, 1), 0.0)
    constants = ConvergenceConstants(
        rho=1.0, beta=1.0,
        G2=ESTIMATE_INFLATION * g2_max,
        sigma2=tuple(ESTIMATE_INFLATION * sigma2),
        p=tuple(p), K=K, tau_max=tau_max, gamma_max=1.0,
        M=float(np.sum((w1 - w_star) ** 2)),
    )
    gap = float(np.mean(gaps))
    bound = convergence_bound(constants, T)
    return BoundReport(gap, bound, gap <= bound, gaps, constants)


# ---- report export -------------------------------------------------------

CSV_COLUMNS = (
    "round", "algorithm", "gamma", "global_accuracy", "accuracy_variance",
    "global_loss", "server_utility", "selected_ids",
)
_INT_KEYED = ("epochs_chosen", "per_client_accuracy", "client_utilities", "contributions")


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _client_ids(records) -> list[int]:
    ids = set()
    for r in records:
        ids.update(r.per_client_accuracy, r.epochs_chosen, r.client_utilities)
    return sorted(ids)


def records_to_rows(records) -> tuple[list[str], list[list[str]]]:
    ids = _client_ids(records)
    header = list(CSV_COLUMNS)
    for cid in ids:
        header += [f"acc_{cid}", f"tau_{cid}", f"util_{cid}"]
    rows = []
    for r in records:
        row = [
            str(r.round), r.algorithm, _fmt(r.gamma), _fmt(r.global_accuracy), _fmt(r.accuracy_variance),
            _fmt(r.global_loss), _fmt(r.server_utility), ";".join(str(c) for c in r.selected),
        ]
        for cid in ids:
            acc = r.per_client_accuracy.get(cid)
            tau = r.epochs_chosen.get(cid)
            util = r.client_utilities.get(cid)
            row += [
                "" if acc is None else _fmt(acc),
                "" if tau is None else str(tau),
                "" if util is None else _fmt(util),
            ]
        rows.append(row)
    return header, rows


def record_to_dict(record) -> dict:
    d = dataclasses.asdict(record)
    for key in _INT_KEYED:
        d[key] = {str(k): v for k, v in d[key].items()}
    return d


def record_from_dict(d: dict):
    from .federation import RoundRecord

    d = dict(d)
    for key in _INT_KEYED:
        d[key] = {int(k): v for k, v in d.get(key, {}).items()}
    return RoundRecord(**d)


def export_records(records: Sequence, path, fmt: str = "csv", meta: Optional[dict] = None) -> None:
    """Write round records as CSV or JSON.

    CSV floats carry 10 significant digits. JSON stores floats at full
    precision so records round-trip exactly; when ``meta`` is given it is
    stored next to the records (JSON) or in a ``<path>.meta.json`` sidecar (CSV).
    """
    path = Path(path)
    try:
        if fmt == "csv":
            header, rows = records_to_rows(records)
            with open(path, "w", newline="") as fh:
                writer = csv.writer(fh, lineterminator="\n")
                writer.writerow(header)
                writer.writerows(rows)
            if meta is not None:
                Path(f"{path}.meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        elif fmt == "json":
            payload = {"records": [record_to_dict(r) for r in records]}
            if meta is not None:
                payload["meta"] = meta
            path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        else:
            raise ValueError(f"unknown report format {fmt!r}")
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def load_records(path) -> list:
    payload = json.loads(Path(path).read_text())
    return [record_from_dict(d) for d in payload["records"]]


def summarize(records: Sequence) -> dict:
    last = records[-1]
    return {
        "algorithm": last.algorithm,
        "rounds": len(records),
        "final_accuracy": last.global_accuracy,
        "final_variance": last.accuracy_variance,
        "final_gamma": last.gamma,
    }


def isfinite_record(record) -> bool:
    vals = [record.gamma, record.global_accuracy, record.accuracy_variance, record.server_utility, record.global_loss]
    return all(math.isfinite(v) for v in vals)
