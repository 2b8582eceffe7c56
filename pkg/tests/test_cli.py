import csv
import json

import numpy as np
import pytest

from flamma.analysis import accuracy_variance, load_records
from flamma.cli import (
    ConfigError,
    RunManifest,
    cmd_check_bound,
    cmd_compare,
    cmd_run,
    dump_manifest,
    main,
    parse_config,
    parse_config_text,
)
from flamma.datasets import generate_synthetic, write_idx
from flamma.federation import FederationConfig

SMALL = """\
# tiny synthetic run
algorithm=flamma
num_clients=6
clients_per_round=3
total_rounds=5
synthetic_classes=3
synthetic_dim=4
synthetic_per_class=30   # samples per class
"""


def write_cfg(tmp_path, text, name="run.cfg"):
    path = tmp_path / name
    path.write_text(text)
    return path


def test_minimal_config_fills_defaults(tmp_path):
    m = parse_config(write_cfg(tmp_path, "algorithm=flamma\nseed=1\n"))
    assert m.config == FederationConfig(seed=1)
    assert m == RunManifest(config=FederationConfig(seed=1))
    assert m.partition == "shards" and m.shards_per_client == 2


def test_unknown_key_cites_line(tmp_path):
    with pytest.raises(ConfigError, match=r"run.cfg:1: unknown key 'algrithm'"):
        parse_config(write_cfg(tmp_path, "algrithm=flamma\n"))
    with pytest.raises(ConfigError, match=r":3: bad value for total_rounds"):
        parse_config_text("seed=1\n\ntotal_rounds=ten\n")
    with pytest.raises(ConfigError, match=":1: expected key=value"):
        parse_config_text("just words\n")


def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigError):
        parse_config_text("tau_min=5\ntau_max=3\n")
    with pytest.raises(ConfigError):
        parse_config_text("partition=dirichlet\n")
    with pytest.raises(ConfigError, match="idx_train_images"):
        parse_config_text("dataset=idx\n")
    with pytest.raises(ConfigError, match="no such file"):
        parse_config_text(f"dataset=idx\nidx_train_images={tmp_path}/a\nidx_train_labels={tmp_path}/b\n")
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "absent.cfg")


def test_manifest_round_trip():
    m = parse_config_text(SMALL + "cost_coeff_range=0.1,0.3\nlr=0.1\nformat=json\n")
    assert m.config.cost_coeff_range == (0.1, 0.3)
    assert parse_config_text(dump_manifest(m)) == m
    assert parse_config_text(dump_manifest(RunManifest())) == RunManifest()


def test_cmd_run_writes_records(tmp_path, capsys):
    m = parse_config_text(SMALL)
    m.output = str(tmp_path / "out.csv")
    assert cmd_run(m) == 0
    rows = list(csv.DictReader(open(m.output)))
    assert [int(r["round"]) for r in rows] == [1, 2, 3, 4, 5]
    out = capsys.readouterr().out
    assert "accuracy=" in out and "variance=" in out and "gamma=" in out
    meta = json.loads((tmp_path / "out.csv.meta.json").read_text())
    assert meta["config"]["refresh_interval"] == 10


def test_cmd_run_deterministic(tmp_path):
    m = parse_config_text(SMALL + "format=json\n")
    outputs = []
    for name in ("a.json", "b.json"):
        m.output = str(tmp_path / name)
        assert cmd_run(m) == 0
        outputs.append((tmp_path / name).read_bytes())
    assert outputs[0] != b"" and outputs[0].replace(b"a.json", b"b.json") == outputs[1]


def test_cmd_run_unwritable_output(tmp_path, capsys):
    m = parse_config_text(SMALL)
    m.output = str(tmp_path / "no" / "such" / "dir.csv")
    assert cmd_run(m) == 1
    assert "cannot write" in capsys.readouterr().err


def test_cmd_run_on_idx_files(tmp_path):
    ds = generate_synthetic(3, 4, 20, seed=0)
    pixels = np.clip(np.round((ds.features - ds.features.min()) * 30), 0, 255).astype(np.uint8)
    write_idx(tmp_path / "img.idx", tmp_path / "lab.idx", pixels.reshape(-1, 2, 2), ds.labels)
    text = (f"dataset=idx\nidx_train_images={tmp_path}/img.idx\nidx_train_labels={tmp_path}/lab.idx\n"
            f"num_clients=4\nclients_per_round=2\ntotal_rounds=2\npartition=iid\noutput={tmp_path}/o.csv\n")
    assert cmd_run(parse_config_text(text)) == 0


def test_cmd_compare(tmp_path, capsys):
    m = parse_config_text(SMALL + "format=json\n")
    m.output = str(tmp_path / "cmp.json")
    assert cmd_compare(m, ["flamma", "fedavg"]) == 0
    records = load_records(m.output)
    assert [r.algorithm for r in records] == ["flamma"] * 5 + ["fedavg"] * 5
    table = capsys.readouterr().out.splitlines()
    assert len(table) == 3
    for line, alg in zip(table[1:], ("flamma", "fedavg")):
        last = [r for r in records if r.algorithm == alg][-1]
        name, acc, var, _ = line.split()
        assert name == alg
        assert float(var) == pytest.approx(accuracy_variance(last.per_client_accuracy), abs=0.006)


def test_cmd_compare_needs_two_algorithms(capsys):
    m = parse_config_text(SMALL)
    assert cmd_compare(m, ["flamma"]) == 2
    assert cmd_compare(m, ["flamma", "flamma"]) == 2
    assert cmd_compare(m, ["flamma", "sgd"]) == 2


def test_cmd_check_bound(capsys):
    assert cmd_check_bound(4, 2, 10, 2) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "bound=" in out and "empirical_gap=" in out
    assert cmd_check_bound(4, 2, 10, 0) == 2
    assert cmd_check_bound(4, 5, 10, 1) == 2


def test_check_bound_scales_with_rounds(capsys):
    bounds = []
    for T in (1, 100):
        cmd_check_bound(3, 2, T, 1)
        line = capsys.readouterr().out
        bounds.append(float(line.split("bound=")[1].split()[0]))
    # measured sigma^2 drifts slightly with T; the 1/T factor dominates
    assert bounds[0] / bounds[1] == pytest.approx(100, rel=1e-3)


def test_main_seed_precedence(tmp_path, monkeypatch, capsys):
    cfg = write_cfg(tmp_path, SMALL + "seed=3\nformat=json\n")

    def seed_used(*extra):
        out = tmp_path / "s.json"
        assert main(["run", "--config", str(cfg), "--output", str(out), *extra]) == 0
        return json.loads(out.read_text())["meta"]["config"]["seed"]

    monkeypatch.delenv("FLAMMA_SEED", raising=False)
    assert seed_used() == 3
    monkeypatch.setenv("FLAMMA_SEED", "7")
    assert seed_used() == 7
    assert seed_used("--seed", "9") == 9
    monkeypatch.setenv("FLAMMA_SEED", "x")
    assert main(["run", "--config", str(cfg)]) == 2


def test_main_usage_errors(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["compare", "--config", "x.cfg"])
    assert exc.value.code == 2
    assert main(["run", "--config", str(write_cfg(tmp_path, "algrithm=flamma\n"))]) == 2
    assert main(["check-bound", "--seeds", "0"]) == 2
