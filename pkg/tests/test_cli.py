import csv
import json

import pytest

import ukie.cli as cli
from ukie.config import load_config
from ukie.evaluation import EvalReport, EvalRow, read_report

SMOKE = """
seed = 1
[dataset]
name = "synthetic"
synthetic_classes = 4
synthetic_shape = [1, 16, 16]
synthetic_train = 96
synthetic_test = 48
[model]
total_channels = 4
invariant_channels = 2
arch = "tiny"
[train]
rounds = 2
gen_iters = 2
mid_iters = 2
batch_size = 32
probe_size = 48
[protocol]
users = 3
kappas = [0.0, 0.05, 0.2, inf]
tau = 2
horizon = 40
[eval]
snrs = [20.0, 5.0]
"""


@pytest.fixture()
def conf(tmp_path):
    p = tmp_path / "smoke.toml"
    p.write_text(SMOKE)
    return p


def run(*argv):
    return cli.main([str(a) for a in argv])


def test_train_writes_artifacts_and_is_deterministic(conf, tmp_path):
    assert run("train", "--config", conf, "--out", tmp_path / "a") == 0
    assert run("train", "--config", conf, "--out", tmp_path / "b") == 0
    a = (tmp_path / "a/metrics.csv").read_bytes()
    assert a == (tmp_path / "b/metrics.csv").read_bytes()
    assert len(list(csv.DictReader(open(tmp_path / "a/metrics.csv")))) >= 1
    assert load_config(tmp_path / "a/config.toml") == load_config(conf)
    man = json.loads((tmp_path / "a/manifest.json").read_text())
    assert man["status"] == "ok" and man["seed"] == 1 and len(man["config_hash"]) == 16
    assert (tmp_path / "a/checkpoints/final/memory.pt").exists()


def test_seed_flag_overrides(conf, tmp_path):
    assert run("train", "--config", conf, "--out", tmp_path / "a", "--seed", "5") == 0
    assert load_config(tmp_path / "a/config.toml").seed == 5


def test_missing_dataset_root_is_config_error(tmp_path, caplog):
    p = tmp_path / "bad.toml"
    p.write_text('[dataset]\nname = "mnist"\nroot = "/no/such/dir"\n')
    assert run("train", "--config", p, "--out", tmp_path / "o") == cli.EXIT_CONFIG
    assert "dataset.root" in caplog.text


def test_nan_abort_exit_code(tmp_path):
    p = tmp_path / "nan.toml"
    p.write_text(SMOKE.replace("probe_size = 48", "probe_size = 48\neta_ukie = 1e30\neta_mid = 1e30"))
    assert run("train", "--config", p, "--out", tmp_path / "o") == cli.EXIT_NUMERIC


def test_eval_produces_report_and_plot(conf, tmp_path):
    assert run("train", "--config", conf, "--out", tmp_path / "t") == 0
    ck = tmp_path / "t/checkpoints/final"
    assert run("eval", "--config", conf, "--checkpoint", ck, "--out", tmp_path / "e") == 0
    rep = read_report(tmp_path / "e/report_snr.csv")
    assert [r.snr_db for r in rep.rows] == [20.0, 5.0]
    assert (tmp_path / "e/report_snr.png").stat().st_size > 0


def test_eval_layout_mismatch_and_missing_checkpoint(conf, tmp_path):
    assert run("train", "--config", conf, "--out", tmp_path / "t") == 0
    other = tmp_path / "other.toml"
    other.write_text(SMOKE.replace("total_channels = 4", "total_channels = 8"))
    ck = tmp_path / "t/checkpoints/final"
    assert run("eval", "--config", other, "--checkpoint", ck, "--out", tmp_path / "e") == cli.EXIT_CONFIG
    assert run("eval", "--config", conf, "--checkpoint", tmp_path / "none", "--out", tmp_path / "e") == cli.EXIT_MISSING


@pytest.mark.parametrize("kind,target", [("bottleneck", "sweep_bottleneck"), ("split", "sweep_invariant_split"), ("coefficients", "sweep_coefficients")])
def test_sweep_dispatch(conf, tmp_path, monkeypatch, kind, target):
    called = []

    def fake(setup, *a, **k):
        called.append(target)
        return EvalReport([EvalRow(1.0, 5.0, "awgn", 20.0, 0.01, 0.9, 1.0, 1.0, 0.0, 10.0, kind)], {"sweep": kind})

    monkeypatch.setattr(cli, target, fake)
    cfg = conf
    if kind == "coefficients":
        cfg = tmp_path / "coef.toml"
        cfg.write_text(SMOKE.replace('snrs = [20.0, 5.0]', 'snrs = [20.0, 5.0]\ncoefficients = {alpha_v = [0.0]}'))
    assert run("sweep", "--config", cfg, "--sweep", kind, "--out", tmp_path / "s") == 0
    assert called == [target]
    assert (tmp_path / f"s/sweep_{kind}.png").exists()


def test_simulate_ledger_monotone_and_reproducible(conf, tmp_path):
    assert run("simulate", "--config", conf, "--out", tmp_path / "a") == 0
    assert run("simulate", "--config", conf, "--out", tmp_path / "b") == 0
    for name in ("ledger.csv", "events.csv", "divergence.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a/ledger.csv")))
    scalars = [int(r["scalars_transmitted"]) for r in rows]
    assert scalars == sorted(scalars, reverse=True) and scalars[-1] == 0


def test_simulate_single_user_sends_nothing(tmp_path):
    p = tmp_path / "one.toml"
    p.write_text(SMOKE.replace("users = 3", "users = 1"))
    assert run("simulate", "--config", p, "--out", tmp_path / "o") == 0
    events = list(csv.DictReader(open(tmp_path / "o/events.csv")))
    assert not [e for e in events if e["event"] == "merge"]


def test_report(conf, tmp_path):
    assert run("report", tmp_path / "empty_missing") == cli.EXIT_MISSING
    (tmp_path / "empty").mkdir()
    assert run("report", tmp_path / "empty") == cli.EXIT_MISSING

    out = tmp_path / "runs"
    for i, n in enumerate((2, 3)):
        rows = [EvalRow(0.4, s, "awgn", 20.0 - s, 0.01, 0.9, 1.0, 1.0, 0.0, 10.0, f"r{s}") for s in range(n)]
        (out / f"cell{i}").mkdir(parents=True)
        EvalReport(rows, {"dataset": "x"}).write_csv(out / f"cell{i}/report_snr.csv")
    assert run("report", out) == 0
    first = (out / "summary.csv").read_bytes()
    assert len(list(csv.DictReader(open(out / "summary.csv")))) == 5
    assert run("report", out) == 0
    assert (out / "summary.csv").read_bytes() == first
    assert (out / "cell1/report_snr.png").exists()


def test_only_output_directory_is_written(conf, tmp_path):
    before = sorted(p.name for p in tmp_path.iterdir())
    assert run("simulate", "--config", conf, "--out", tmp_path / "o") == 0
    after = sorted(p.name for p in tmp_path.iterdir())
    assert set(after) - set(before) == {"o"} and conf.read_text() == SMOKE
