"""Command-line entry point.

Subcommands::

    flamma run --config run.cfg [--output PATH] [--seed N]
    flamma compare --config run.cfg --algorithms flamma,fedavg [--output PATH]
    flamma check-bound --clients 10 --k 5 --rounds 100 --seeds 10

Config files are flat ``key=value`` lines with ``#`` comments. The seed is
resolved as ``--seed`` flag, then the ``FLAMMA_SEED`` environment variable,
then the file. Exit codes: 0 success, 1 runtime failure (or a failed bound
check), 2 usage or config error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

from . import analysis
from .datasets import generate_synthetic, load_idx, partition_iid, partition_shards, train_test_split
from .federation import ALGORITHMS, FederationConfig, run_experiment

EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2
SEED_ENV = "FLAMMA_SEED"


class ConfigError(ValueError):
    pass


@dataclass
class RunManifest:
    config: FederationConfig = field(default_factory=FederationConfig)
    dataset: str = "synthetic"
    synthetic_classes: int = 10
    synthetic_dim: int = 20
    synthetic_per_class: int = 100
    synthetic_spread: float = 1.0
    idx_train_images: str = ""
    idx_train_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    partition: str = "shards"
    shards_per_client: int = 2
    test_fraction: float = 0.2
    output: str = "report.csv"
    format: str = "csv"

    def validate(self) -> None:
        self.config.validate()
        if self.dataset not in ("synthetic", "idx"):
            raise ConfigError(f"dataset must be 'synthetic' or 'idx', got {self.dataset!r}")
        if self.dataset == "idx":
            for key in ("idx_train_images", "idx_train_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"dataset=idx requires {key}")
            for key in ("idx_train_images", "idx_train_labels", "idx_test_images", "idx_test_labels"):
                path = getattr(self, key)
                if path and not Path(path).exists():
                    raise ConfigError(f"{key}: no such file {path}")
            if bool(self.idx_test_images) != bool(self.idx_test_labels):
                raise ConfigError("idx_test_images and idx_test_labels must be given together")
        if self.partition not in ("iid", "shards"):
            raise ConfigError(f"partition must be 'iid' or 'shards', got {self.partition!r}")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be 'csv' or 'json', got {self.format!r}")
        if self.shards_per_client < 1 or not 0 < self.test_fraction < 1:
            raise ConfigError("need shards_per_client >= 1 and 0 < test_fraction < 1")


_CONFIG_FIELDS = {f.name: f for f in dataclasses.fields(FederationConfig)}
_MANIFEST_FIELDS = {f.name: f for f in dataclasses.fields(RunManifest) if f.name != "config"}


def _field_type(name: str) -> str:
    f = _CONFIG_FIELDS.get(name) or _MANIFEST_FIELDS[name]
    return f.type if isinstance(f.type, str) else f.type.__name__


def _coerce(name: str, raw: str):
    kind = _field_type(name)
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("tuple"):
        parts = [p.strip() for p in raw.split(",")]
        if len(parts) != 2:
            raise ValueError("expected two comma-separated numbers")
        return tuple(float(p) for p in parts)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunManifest:
    config_kw, manifest_kw = {}, {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _CONFIG_FIELDS and key not in _MANIFEST_FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            value = _coerce(key, raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {raw!r} ({exc})") from None
        (config_kw if key in _CONFIG_FIELDS else manifest_kw)[key] = value
    try:
        manifest = RunManifest(config=FederationConfig(**config_kw), **manifest_kw)
        manifest.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return manifest


def parse_config(path) -> RunManifest:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    return parse_config_text(text, str(path))


def _render(value) -> str:
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_manifest(manifest: RunManifest) -> str:
    lines = [f"{k}={_render(getattr(manifest.config, k))}" for k in _CONFIG_FIELDS]
    lines += [f"{k}={_render(getattr(manifest, k))}" for k in _MANIFEST_FIELDS]
    return "\n".join(lines) + "\n"


def manifest_meta(manifest: RunManifest) -> dict:
    return {
        "config": {k: getattr(manifest.config, k) for k in _CONFIG_FIELDS},
        "manifest": {k: getattr(manifest, k) for k in _MANIFEST_FIELDS},
        "accuracy_variance": "population variance (divide by n) of per-client accuracy, percentage points squared",
        "per_client_accuracy": "global model on each client's held-out 20% slice of its own data",
    }


def load_data(manifest: RunManifest):
    """Training set, global test set and client partition for a manifest."""
    cfg = manifest.config
    if manifest.dataset == "synthetic":
        full = generate_synthetic(
            manifest.synthetic_classes, manifest.synthetic_dim, manifest.synthetic_per_class,
            manifest.synthetic_spread, seed=cfg.seed,
        )
        train, test = train_test_split(full, manifest.test_fraction, seed=cfg.seed)
    else:
        train = load_idx(manifest.idx_train_images, manifest.idx_train_labels)
        if manifest.idx_test_images:
            test = load_idx(manifest.idx_test_images, manifest.idx_test_labels, num_classes=train.num_classes)
        else:
            train, test = train_test_split(train, manifest.test_fraction, seed=cfg.seed)
    if manifest.partition == "iid":
        part = partition_iid(train, cfg.num_clients, seed=cfg.seed)
    else:
        part = partition_shards(train, cfg.num_clients, manifest.shards_per_client, seed=cfg.seed)
    return train, test, part


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return EXIT_FAILURE


def cmd_run(manifest: RunManifest) -> int:
    try:
        train, test, part = load_data(manifest)
        records = run_experiment(manifest.config, train, part, test)
        analysis.export_records(records, manifest.output, manifest.format, meta=manifest_meta(manifest))
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        return _fail(str(exc))
    last = records[-1]
    print(
        f"{manifest.config.algorithm} round {last.round}: accuracy={100 * last.global_accuracy:.2f}% "
        f"variance={last.accuracy_variance:.2f} gamma={last.gamma:.4f}"
    )
    return EXIT_OK


def cmd_compare(manifest: RunManifest, algorithms: Sequence[str]) -> int:
    algorithms = list(dict.fromkeys(algorithms))
    if len(algorithms) < 2:
        print("error: compare needs at least two distinct algorithms", file=sys.stderr)
        return EXIT_USAGE
    unknown = [a for a in algorithms if a not in ALGORITHMS]
    if unknown:
        print(f"error: unknown algorithm(s) {unknown}; choose from {ALGORITHMS}", file=sys.stderr)
        return EXIT_USAGE
    try:
        train, test, part = load_data(manifest)
        combined, summaries = [], []
        for alg in algorithms:
            cfg = dataclasses.replace(manifest.config, algorithm=alg)
            records = run_experiment(cfg, train, part, test)
            combined += records
            summaries.append(analysis.summarize(records))
        meta = manifest_meta(manifest) | {"algorithms": algorithms}
        analysis.export_records(combined, manifest.output, manifest.format, meta=meta)
    except Exception as exc:  # noqa: BLE001
        return _fail(str(exc))
    print(f"{'algorithm':<10} {'accuracy(%)':>12} {'variance(pp^2)':>15} {'gamma':>8}")
    for s in summaries:
        print(f"{s['algorithm']:<10} {100 * s['final_accuracy']:>12.2f} {s['final_variance']:>15.2f} {s['final_gamma']:>8.4f}")
    return EXIT_OK


def cmd_check_bound(num_clients: int, K: int, T: int, seeds: int) -> int:
    if seeds < 1 or num_clients < 1 or not 1 <= K <= num_clients or T < 1:
        print("error: need seeds >= 1, rounds >= 1 and 1 <= k <= clients", file=sys.stderr)
        return EXIT_USAGE
    try:
        rep = analysis.check_bound_quadratic(num_clients=num_clients, K=K, T=T, seeds=seeds)
    except Exception as exc:  # noqa: BLE001
        return _fail(str(exc))
    print(f"empirical_gap={rep.empirical_gap:.6g} bound={rep.bound:.6g} {'PASS' if rep.holds else 'FAIL'}")
    return EXIT_OK if rep.holds else EXIT_FAILURE


def _resolve(args) -> RunManifest:
    manifest = parse_config(args.config)
    seed = manifest.config.seed
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    if args.seed is not None:
        seed = args.seed
    manifest.config.seed = seed
    if args.output is not None:
        manifest.output = args.output
    return manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flamma", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    cmp_ = sub.add_parser("compare", help="run several algorithms on the same data")
    for p in (run, cmp_):
        p.add_argument("--config", required=True)
        p.add_argument("--output")
        p.add_argument("--seed", type=int)
    cmp_.add_argument("--algorithms", required=True, help="comma-separated, e.g. flamma,fedavg")

    chk = sub.add_parser("check-bound", help="check the convergence bound on quadratic clients")
    chk.add_argument("--clients", type=int, default=10)
    chk.add_argument("--k", type=int, default=5)
    chk.add_argument("--rounds", type=int, default=100)
    chk.add_argument("--seeds", type=int, default=10)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "check-bound":
        return cmd_check_bound(args.clients, args.k, args.rounds, args.seeds)
    try:
        manifest = _resolve(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "run":
        return cmd_run(manifest)
    return cmd_compare(manifest, [a.strip() for a in args.algorithms.split(",") if a.strip()])


if __name__ == "__main__":
    sys.exit(main())
