"""Acceptance criteria, one test per criterion.

Every test records a ``[PASS]``/``[FAIL]`` line through :func:`verdict`. The
lines are echoed in pytest's terminal summary (see ``conftest.py``) and when
the module is run directly with ``python3 tests/test_acceptance.py``.
"""

import dataclasses
import functools
import struct
import time

import numpy as np
import pytest

from flamma.analysis import check_bound_quadratic
from flamma.cli import RunManifest, cmd_run, load_data
from flamma.datasets import IdxFormatError, load_idx
from flamma.federation import FederationConfig, draw_cost_coeffs, run_experiment
from flamma.game import ClientGameParams, best_response_tau, verify_equilibrium
from flamma.learner import Batch, ModelSpec, finite_diff_gradient, gradient

VERDICTS: list[str] = []


def verdict(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num} {name}: {detail}"
    VERDICTS.append(line)
    print(line)
    assert ok, line


def synthetic_manifest(seed: int, **config) -> RunManifest:
    return RunManifest(config=FederationConfig(seed=seed, **config))


@functools.lru_cache(maxsize=None)
def flamma_run(seed: int, total_rounds: int = 100, cost_range=(0.05, 0.5)):
    m = synthetic_manifest(seed, total_rounds=total_rounds, cost_coeff_range=cost_range)
    train, test, part = load_data(m)
    return m.config, run_experiment(m.config, train, part, test)


# runs shared by criteria 2, 3 and 7
AUDIT_RUNS = [(0, 50, (0.05, 0.5)), (1, 100, (0.05, 0.5)), (2, 100, (0.001, 0.01)), (3, 100, (0.5, 2.0))]


# ---- 1 -------------------------------------------------------------------

def test_criterion_1_best_response_matches_grid_search():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    step = 1e-3
    grid = np.arange(0, 100_001) * step
    worst = 0.0
    for _ in range(1000):
        gamma, omega, c = rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0.01, 1)
        u = gamma * omega * grid - c * grid**2
        tau_grid = grid[np.argmax(u)]
        worst = max(worst, abs(tau_grid - best_response_tau(gamma, omega, c)))
    elapsed = time.perf_counter() - t0
    ok = worst <= step and elapsed < 60
    verdict(1, "best-response oracle", ok, f"max |grid - closed form| = {worst:.2e} (step 1e-3), {elapsed:.1f}s")


# ---- 2 -------------------------------------------------------------------

def test_criterion_2_individual_rationality():
    utils = [u for args in AUDIT_RUNS for r in flamma_run(*args)[1] for u in r.client_utilities.values()]
    bad = sum(u < 0 for u in utils)
    verdict(2, "IR guarantee", bad == 0 and len(utils) > 0,
            f"{bad} negative utilities among {len(utils)} recorded over {len(AUDIT_RUNS)} runs")


# ---- 3 -------------------------------------------------------------------

def audit(config, records) -> int:
    costs = draw_cost_coeffs(config)
    failures = 0
    for r in records:
        params = [ClientGameParams(c, costs[c], r.contributions[c], config.tau_min, config.tau_max) for c in r.selected]
        if not verify_equilibrium(params, r.gamma, [r.epochs_chosen[c] for c in r.selected], grid_step=1.0):
            failures += 1
    return failures


def test_criterion_3_equilibrium_audit():
    t0 = time.perf_counter()
    config, records = flamma_run(*AUDIT_RUNS[0])
    assert config.num_clients == 20 and len(records) == 50
    failures = audit(config, records)
    elapsed = time.perf_counter() - t0
    verdict(3, "equilibrium audit", failures == 0 and elapsed < 120,
            f"{failures}/50 rounds fail verify_equilibrium, {elapsed:.1f}s")


# ---- 4 -------------------------------------------------------------------

def random_case(kind, rng):
    d = int(rng.integers(1, 8))
    k = int(rng.integers(2, 6))
    n = int(rng.integers(1, 16))
    if kind == "quadratic":
        spec = ModelSpec("quadratic", d, quadratic_target=rng.normal(size=d))
    else:
        spec = ModelSpec(kind, d, k, hidden_dim=int(rng.integers(2, 9)))
    w = rng.normal(size=spec.num_params)
    return spec, w, Batch(rng.normal(size=(n, d)), rng.integers(0, k, size=n))


def test_criterion_4_gradient_check():
    rng = np.random.default_rng(7)
    worst = {}
    for kind in ("logistic", "mlp", "quadratic"):
        errs = []
        for _ in range(100):
            spec, w, batch = random_case(kind, rng)
            a, f = gradient(spec, w, batch), finite_diff_gradient(spec, w, batch)
            errs.append(np.linalg.norm(a - f) / max(np.linalg.norm(a), np.linalg.norm(f), 1e-12))
        worst[kind] = max(errs)
    detail = ", ".join(f"{k} max rel err {v:.1e}" for k, v in worst.items())
    verdict(4, "gradient check", all(v < 1e-5 for v in worst.values()), detail)


# ---- 5 -------------------------------------------------------------------

def test_criterion_5_convergence_bound():
    t0 = time.perf_counter()
    parts, ok = [], True
    for T in (10, 50, 100):
        rep = check_bound_quadratic(num_clients=10, K=5, T=T, seeds=10)
        ok &= rep.empirical_gap <= rep.bound
        parts.append(f"T={T}: gap {rep.empirical_gap:.3g} <= bound {rep.bound:.3g}")
    elapsed = time.perf_counter() - t0
    verdict(5, "convergence bound", ok and elapsed < 120, "; ".join(parts) + f", {elapsed:.1f}s")


# ---- 6 -------------------------------------------------------------------

def test_criterion_6_fairness_direction():
    t0 = time.perf_counter()
    wins, rows = 0, []
    for seed in range(5):
        m = synthetic_manifest(seed)  # 10 classes, 20 clients, 2 shards each, T=100
        train, test, part = load_data(m)
        fl = run_experiment(dataclasses.replace(m.config, algorithm="flamma"), train, part, test)[-1]
        fa = run_experiment(dataclasses.replace(m.config, algorithm="fedavg"), train, part, test)[-1]
        win = fl.accuracy_variance < fa.accuracy_variance and fl.global_accuracy >= fa.global_accuracy - 0.02
        wins += win
        rows.append(f"seed {seed}: flamma {100 * fl.global_accuracy:.1f}%/{fl.accuracy_variance:.0f} "
                    f"vs fedavg {100 * fa.global_accuracy:.1f}%/{fa.accuracy_variance:.0f}")
    elapsed = time.perf_counter() - t0
    verdict(6, "fairness direction", wins >= 4 and elapsed < 600,
            f"{wins}/5 seeds favour flamma (need 4); " + "; ".join(rows) + f"; {elapsed:.0f}s")


# ---- 7 -------------------------------------------------------------------

def gamma_violations(config, records) -> list[str]:
    costs = draw_cost_coeffs(config)
    out = []
    if records[0].gamma != 1.0:
        out.append(f"round 1 gamma {records[0].gamma}")
    for r in records[1:]:
        if not config.gamma_min <= r.gamma <= 1.0:
            out.append(f"round {r.round} gamma {r.gamma} out of range")

    def guarded(r, t):
        return all(2 * t * costs[c] - r.contributions[c] > 0 for c in r.selected)

    for prev, cur in zip(records[1:], records[2:]):
        same_window = (cur.round - 1) % config.refresh_interval != 0
        if same_window and guarded(cur, prev.round) and guarded(cur, cur.round) and cur.gamma > prev.gamma:
            out.append(f"round {cur.round} gamma rose {prev.gamma} -> {cur.gamma}")
    return out


def test_criterion_7_gamma_schedule():
    problems, rounds = [], 0
    for args in AUDIT_RUNS:
        config, records = flamma_run(*args)
        rounds += len(records)
        problems += gamma_violations(config, records)
    verdict(7, "gamma schedule", not problems,
            f"{len(problems)} violations over {rounds} rounds in {len(AUDIT_RUNS)} runs" + (f": {problems[:3]}" if problems else ""))


# ---- 8 -------------------------------------------------------------------

@pytest.mark.parametrize("fmt", ["csv", "json"])
def test_criterion_8_determinism(tmp_path, fmt):
    m = synthetic_manifest(11, total_rounds=20)
    m.format, m.output = fmt, str(tmp_path / f"report.{fmt}")
    blobs = []
    for _ in range(2):
        assert cmd_run(m) == 0
        blobs.append((tmp_path / f"report.{fmt}").read_bytes())
    verdict(8, f"determinism ({fmt})", blobs[0] == blobs[1] and len(blobs[0]) > 0,
            f"two cmd_run reports of {len(blobs[0])} bytes are {'identical' if blobs[0] == blobs[1] else 'different'}")


# ---- 9 -------------------------------------------------------------------

def idx_fixture(path, img_magic=2051, n_labels=4):
    pixels = bytes([0, 255, 51, 102, 255, 0, 0, 255, 10, 20, 30, 40, 128, 128, 128, 128])
    labels = bytes([3, 0, 7, 1])
    img, lbl = path / "img.idx", path / "lbl.idx"
    img.write_bytes(struct.pack(">IIII", img_magic, 4, 2, 2) + pixels)
    lbl.write_bytes(struct.pack(">II", 2049, n_labels) + labels[:n_labels])
    return img, lbl


def test_criterion_9_idx_loader(tmp_path):
    ds = load_idx(*idx_fixture(tmp_path))
    expected = np.array([[0, 255, 51, 102], [255, 0, 0, 255], [10, 20, 30, 40], [128] * 4]) / 255.0
    decoded = np.array_equal(ds.features, expected) and list(ds.labels) == [3, 0, 7, 1]
    raised = []
    for kw in (dict(img_magic=2049), dict(n_labels=3)):
        try:
            load_idx(*idx_fixture(tmp_path, **kw))
            raised.append(False)
        except IdxFormatError:
            raised.append(True)
    verdict(9, "IDX loader", decoded and all(raised),
            f"fixture decoded exactly: {decoded}; bad magic raises: {raised[0]}; count mismatch raises: {raised[1]}")


if __name__ == "__main__":
    import sys
    import tempfile
    from pathlib import Path

    failed = 0
    for name, fn in sorted(globals().items()):
        if not name.startswith("test_criterion_"):
            continue
        kwargs_list = [{}]
        if "determinism" in name:
            kwargs_list = [{"fmt": "csv"}, {"fmt": "json"}]
        for kw in kwargs_list:
            with tempfile.TemporaryDirectory() as d:
                if fn.__code__.co_argcount and "tmp_path" in fn.__code__.co_varnames:
                    kw = {"tmp_path": Path(d), **kw}
                try:
                    fn(**kw)
                except AssertionError:
                    failed += 1
    sys.exit(1 if failed else 0)
