import csv
import json
import subprocess
import sys
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedapa.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main
from fedapa.data import SynthSpec
from fedapa.runner import (
    METRIC_COLUMNS,
    ConfigError,
    ExperimentConfig,
    RunIoError,
    parse_config,
    print_summary,
    run_experiment,
    serialize_config,
)

SMALL = SynthSpec(num_classes=5, samples_per_client=60)


def small_cfg(tmp_path, name="run", **kw):
    base = dict(rounds=3, arch=("tiny",), d_feat=32, out_dir=str(tmp_path / name), data=SMALL)
    base.update(kw)
    return ExperimentConfig(**base)


def test_config_round_trip_defaults():
    cfg = ExperimentConfig()
    assert parse_config(serialize_config(cfg)) == cfg


@settings(max_examples=40)
@given(
    st.sampled_from(["fedapa", "uniform_proto", "local_only", "fedapa_no_lc", "static"]),
    st.floats(0.0, 2.0),
    st.integers(1, 500),
    st.floats(1e-4, 1.0),
    st.lists(st.sampled_from(["tiny", "middle", "large"]), min_size=6, max_size=6),
    st.booleans(),
    st.floats(0.05, 3.0),
)
def test_config_round_trip(mode, lam, rounds, lr, archs, excl, beta):
    cfg = ExperimentConfig(
        mode="fedapa_static_lambda" if mode == "static" else mode,
        static_lambda=lam if mode == "static" else None,
        rounds=rounds,
        lr=lr,
        arch=tuple(archs),
        exclude_self=excl,
        data=replace(SynthSpec(), dirichlet_beta=beta),
    )
    assert parse_config(serialize_config(cfg)) == cfg


def test_config_errors_name_the_field():
    with pytest.raises(ConfigError) as e:
        parse_config("colour = blue\n")
    assert e.value.field_path == "colour"
    with pytest.raises(ConfigError) as e:
        parse_config("rounds = 0\n")
    assert e.value.field_path == "rounds"
    with pytest.raises(ConfigError) as e:
        parse_config("lr = fast\n")
    assert e.value.field_path == "lr"
    with pytest.raises(ConfigError) as e:
        parse_config("arch = tiny,large\n")
    assert e.value.field_path == "arch"
    with pytest.raises(ConfigError):
        parse_config("mode = fedavg\n")
    with pytest.raises(ConfigError):
        parse_config("rounds = 2\nrounds = 3\n")
    with pytest.raises(ConfigError):
        parse_config("data.dirichlet_beta = -1\n")


def test_config_comments_and_static_mode():
    cfg = parse_config("# header\nmode = fedapa_static_lambda(0.25)  # fixed\n\nseed = 4\n")
    assert cfg.mode == "fedapa_static_lambda" and cfg.static_lambda == 0.25 and cfg.seed == 4


def test_artifacts_and_determinism(tmp_path):
    a = run_experiment(small_cfg(tmp_path, "a"))
    b = run_experiment(small_cfg(tmp_path, "b"))
    for name in ("metrics.csv", "cost.json", "summary.json", "manifest.json", "trace.jsonl", "rounds.jsonl"):
        assert (a.out_dir / name).exists()
    assert (a.out_dir / "metrics.csv").read_bytes() == (b.out_dir / "metrics.csv").read_bytes()
    with open(a.out_dir / "metrics.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == METRIC_COLUMNS
    assert len(rows) == 3 * 6
    man = json.loads((a.out_dir / "manifest.json").read_text())
    assert parse_config(man["config"]) == small_cfg(tmp_path, "a")
    assert man["version"]


def test_parallel_matches_sequential(tmp_path):
    seq = run_experiment(small_cfg(tmp_path, "seq", diagnostics="full", diag_every=2))
    par = run_experiment(small_cfg(tmp_path, "par", diagnostics="full", diag_every=2, workers=4))
    for name in ("metrics.csv", "trace.jsonl", "rounds.jsonl"):
        assert (seq.out_dir / name).read_bytes() == (par.out_dir / name).read_bytes()


def test_local_only_exchanges_nothing(tmp_path):
    res = run_experiment(small_cfg(tmp_path, mode="local_only"))
    assert all(r["bytes_up"] == 0 and r["bytes_down"] == 0 for r in res.metrics_rows)
    assert res.summary["kb_per_client_round"] == 0.0


def test_byte_columns_by_mode(tmp_path):
    d = 32 * 4
    full = run_experiment(small_cfg(tmp_path, "f"))
    for r in full.metrics_rows:
        assert r["bytes_down"] == (5 + 5 * 5) * d  # own Q plus the other five padded sets
        assert 0 < r["bytes_up"] <= 5 * d
    uni = run_experiment(small_cfg(tmp_path, "u", mode="uniform_proto"))
    assert all(r["bytes_down"] == 5 * d for r in uni.metrics_rows)


def test_static_lambda_is_used(tmp_path):
    res = run_experiment(small_cfg(tmp_path, mode="fedapa_static_lambda", static_lambda=0.4))
    assert {r["lambda_t"] for r in res.metrics_rows} == {0.4}
    assert res.summary["mode"] == "fedapa_static_lambda(0.4)"


def test_per_client_architectures(tmp_path):
    archs = ("tiny", "middle", "large", "tiny", "middle", "large")
    res = run_experiment(small_cfg(tmp_path, arch=archs, rounds=1))
    cost = json.loads((res.out_dir / "cost.json").read_text())
    assert [c["arch"] for c in cost["client_models"]] == list(archs)


def test_summary_table(tmp_path):
    res = run_experiment(small_cfg(tmp_path))
    text = print_summary([res.out_dir])
    lines = text.splitlines()
    assert len(lines) == 3 and lines[2].startswith("fedapa ")
    with pytest.raises(RunIoError) as e:
        print_summary([tmp_path / "nowhere"])
    assert "nowhere" in str(e.value)


def test_summary_reports_reference_cost(tmp_path):
    cfg = ExperimentConfig(rounds=1, arch=("tiny",), out_dir=str(tmp_path / "ref"), diagnostics="none")
    res = run_experiment(cfg)
    assert "150.53" in print_summary([res.out_dir]).splitlines()[2]
    cost = json.loads((res.out_dir / "cost.json").read_text())
    assert cost["per_client_round_bytes_complete"] == 150_528
    assert cost["model_sharing_reference"]["LargeConvNet4"]["bytes"] == 3_710_000


def test_cli_exit_codes(tmp_path, capsys):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(serialize_config(small_cfg(tmp_path, "cli", rounds=2)))
    assert main(["--config", str(cfgfile), "--seed", "3", "--mode", "uniform_proto"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "uniform_proto" in out
    summary = json.loads((tmp_path / "cli" / "summary.json").read_text())
    assert summary["seed"] == 3
    bad = tmp_path / "bad.cfg"
    bad.write_text("nonsense = 1\n")
    assert main(["--config", str(bad)]) == EXIT_CONFIG
    assert main(["--config", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["--summary", str(tmp_path / "nothing")]) == EXIT_RUNTIME
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert main(["--config", str(cfgfile), "--out", str(blocker / "sub")]) == EXIT_RUNTIME


def test_module_entry_point(tmp_path):
    cfgfile = tmp_path / "run.cfg"
    cfgfile.write_text(serialize_config(small_cfg(tmp_path, "mod", rounds=1)))
    proc = subprocess.run([sys.executable, "-m", "fedapa", "--config", str(cfgfile)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "fedapa" in proc.stdout
