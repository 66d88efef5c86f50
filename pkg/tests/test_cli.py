import json
from pathlib import Path

import numpy as np
import pytest

from adanvar.cli import RunConfig, apply_overrides, git_hash, main, run_dir
from adanvar.dynamics import read_csv

TINY = {
    "data": {"warmup": 20, "train": 200, "test": 30},
    "standard": {"settings": [[0.0, 2, 1e-6], [0.05, 2, 1e-2]], "search_k_max": 3, "search_horizon": 10},
    "adaptive": {"k_noisy": 2, "hidden": 8, "adam_epochs": 5, "lbfgs_iters": 5},
    "noise_levels": [0.0, 0.05],
    "horizons": [10, 20],
    "seeds": [0, 1],
    "grid": {"k_max": 2, "n_gammas": 3, "refine": 0, "horizon": 10},
}


@pytest.fixture
def tiny(tmp_path):
    p = tmp_path / "tiny.json"
    p.write_text(json.dumps(TINY))
    return str(p)


def test_git_hash_matches_git_blob_format():
    # `printf 'hello\n' | git hash-object --stdin`
    assert git_hash(b"hello\n") == "ce013625030ba8dba906f756967f9e9ca394464a"
    assert git_hash(b"") == "e69de29bb2d1d6434b8b29ae775ad8c2e48c5391"


def test_config_round_trip_and_stable_hash():
    cfg = RunConfig()
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.hash() == RunConfig().hash()
    other = RunConfig.from_dict(apply_overrides(cfg.to_dict(), ["run.seed=3"]))
    assert other.run.seed == 3 and other.hash() != cfg.hash()


def test_overrides_parse_json_values():
    d = apply_overrides({"a": {"b": 1}}, ["a.b=2.5", "a.c=[1,2]", "name=text"])
    assert d == {"a": {"b": 2.5, "c": [1, 2]}, "name": "text"}


# --- exit codes --------------------------------------------------------------------


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main([]) == 2
    assert main(["nonsense"]) == 2
    assert main(["generate", "--out", str(tmp_path), "--set", "novalue"]) == 2
    assert "error" in capsys.readouterr().err


def test_config_errors_exit_3(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 3
    assert main(["generate", "--set", "bogus=1", "--out", str(tmp_path)]) == 3
    bad.write_text("[1, 2]")
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 3


def test_missing_input_exit_4(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 4
    assert main(["forecast", "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path)]) == 4
    assert main(["plot", "--aggregate", str(tmp_path / "none.csv"), "--out", str(tmp_path)]) == 4


def test_invalid_values_exit_5(tmp_path, tiny):
    assert main(["generate", "--steps", "0", "--out", str(tmp_path)]) == 5
    assert main(["generate", "--jobs", "0", "--out", str(tmp_path)]) == 5
    assert main(["train", "--config", tiny, "--model", "standard", "--noise", "0.3", "-q",
                 "--out", str(tmp_path)]) == 5
    assert main(["suite", "--config", tiny, "--horizons", "99", "--out", str(tmp_path)]) == 5


# --- subcommands -------------------------------------------------------------------


def test_generate_writes_clean_and_observed(tmp_path, tiny):
    out = tmp_path / "gen"
    assert main(["generate", "--config", tiny, "--noise", "0.05", "-q", "--out", str(out)]) == 0
    clean = read_csv(out / "clean.csv")
    noisy = read_csv(out / "observed.csv")
    assert clean.data.shape == (250, 3) and noisy.data.shape == (250, 3)
    assert not np.array_equal(clean.data, noisy.data)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["command"] == "generate"
    assert manifest["config"]["run"]["noise"] == 0.05
    assert manifest["outputs"]["clean.csv"] == git_hash((out / "clean.csv").read_bytes())
    assert manifest["config_hash"] == RunConfig.from_dict(manifest["config"]).hash()
    assert manifest["wall_time_s"] >= 0


def test_generate_steps_option(tmp_path):
    assert main(["generate", "--steps", "7", "-q", "--out", str(tmp_path)]) == 0
    assert read_csv(tmp_path / "clean.csv").data.shape == (7, 3)
    assert not (tmp_path / "observed.csv").exists()


def test_default_output_directory_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv("ADANVAR_OUT", str(tmp_path))
    assert main(["generate", "--steps", "5", "-q"]) == 0
    [d] = list(tmp_path.iterdir())
    assert d.name.startswith("generate-") and (d / "manifest.json").is_file()
    assert run_dir("generate", ["--steps", "5", "-q"]) == d
    assert run_dir("generate", ["--steps", "6"]) != d
    assert run_dir("generate", ["--out", "x"]) == Path("x")


@pytest.mark.parametrize("model", ["standard", "adaptive"])
def test_train_then_forecast(tmp_path, tiny, model):
    tr = tmp_path / "train"
    assert main(["train", "--config", tiny, "--model", model, "-q", "--out", str(tr)]) == 0
    assert (tr / "model.bin").is_file()
    if model == "adaptive":
        assert (tr / "trace.csv").read_text().startswith("phase,iter,loss\n")
    fc = tmp_path / "fc"
    assert main(["forecast", "--config", tiny, "--checkpoint", str(tr / "model"), "--horizon", "20", "-q",
                 "--out", str(fc)]) == 0
    assert read_csv(fc / "forecast.csv").data.shape == (20, 3)
    lines = (fc / "rmse.csv").read_text().splitlines()
    assert lines[0] == "horizon,component,rmse" and len(lines) == 1 + 2 * 3


def test_forecast_from_csv_files(tmp_path, tiny):
    gen = tmp_path / "gen"
    main(["generate", "--config", tiny, "-q", "--out", str(gen)])
    tr = tmp_path / "train"
    main(["train", "--config", tiny, "--model", "standard", "--data", str(gen / "clean.csv"), "-q",
          "--out", str(tr)])
    fc = tmp_path / "fc"
    assert main(["forecast", "--checkpoint", str(tr / "model"), "--data", str(gen / "clean.csv"),
                 "--truth", str(gen / "clean.csv"), "--start", "220", "--horizon", "10", "-q",
                 "--out", str(fc)]) == 0
    assert (fc / "rmse.csv").is_file()
    assert main(["forecast", "--checkpoint", str(tr / "model"), "--data", str(gen / "clean.csv"),
                 "--start", "0", "-q", "--out", str(fc)]) == 5


def test_gridsearch(tmp_path, tiny, capsys):
    assert main(["gridsearch", "--config", tiny, "--noise", "0.05", "-q", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gridsearch.csv").read_text().splitlines()
    assert lines[0] == "k,gamma,val_rmse" and len(lines) == 1 + 2 * 3
    assert capsys.readouterr().out.startswith("best k=")


def test_suite_is_deterministic_and_resumable(tmp_path, tiny):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["suite", "--config", tiny, "-q", "--out", str(a)]) == 0
    assert main(["suite", "--config", tiny, "-q", "--out", str(b)]) == 0
    for name in ("results.csv", "aggregate.csv", "rmse_noise0.svg", "rmse_noise5.svg"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert len(list((a / "jobs").iterdir())) == 2 * 2 * 2

    # drop one job file and resume: only that job reruns, outputs are identical
    victim = sorted((a / "jobs").iterdir())[0]
    victim.unlink()
    assert main(["suite", "--config", tiny, "--resume", "-q", "--out", str(a)]) == 0
    assert victim.is_file()
    assert (a / "results.csv").read_bytes() == (b / "results.csv").read_bytes()
    manifest = json.loads((a / "manifest.json").read_text())
    assert manifest["failures"] == 0
    assert set(manifest["outputs"]) >= {"results.csv", "aggregate.csv"}


def test_suite_failures_are_listed_and_survive_resume(tmp_path, tiny, monkeypatch):
    from adanvar import nvar

    def diverge(*args, **kw):
        raise nvar.DivergenceError(3, 2e6, None)

    monkeypatch.setattr(nvar, "forecast", diverge)
    argv = ["suite", "--config", tiny, "--models", "standard", "--jobs", "1", "-q", "--out", str(tmp_path)]
    assert main(argv) == 0
    msg = "DivergenceError: forecast diverged at step 3 (|x| = 2e+06 > 1e+06)"
    expected = ["model,noise,seed,s,error"] + [f"standard,{n},{sd},1,{msg}"
                                               for n in ("0.0", "0.05") for sd in (0, 1)]
    assert (tmp_path / "failures.csv").read_text().splitlines() == expected
    assert json.loads((tmp_path / "manifest.json").read_text())["failures"] == 4

    monkeypatch.undo()
    assert main(argv + ["--resume"]) == 0
    assert (tmp_path / "failures.csv").read_text().splitlines() == expected


def test_suite_flag_overrides(tmp_path, tiny):
    assert main(["suite", "--config", tiny, "--models", "standard", "--n-seeds", "3", "--noise-levels", "0.05",
                 "-q", "--out", str(tmp_path)]) == 0
    rows = (tmp_path / "results.csv").read_text().splitlines()[1:]
    assert {r.split(",")[2] for r in rows} == {"0", "1", "2"}
    assert {r.split(",")[0] for r in rows} == {"standard"}


def test_skipstudy_and_plot(tmp_path, tiny):
    sk = tmp_path / "skip"
    assert main(["skipstudy", "--config", tiny, "--models", "standard", "--s-values", "1", "2", "--noise", "0.05",
                 "-q", "--out", str(sk)]) == 0
    header = (sk / "aggregate.csv").read_text().splitlines()[0]
    assert header.startswith("s,model")
    assert (sk / "rmse_noise5_s2.svg").is_file()
    pl = tmp_path / "plot"
    assert main(["plot", "--aggregate", str(sk / "aggregate.csv"), "-q", "--out", str(pl)]) == 0
    assert (pl / "rmse_noise5_s2.svg").read_bytes() == (sk / "rmse_noise5_s2.svg").read_bytes()


def test_module_entry_point():
    import subprocess
    import sys

    out = subprocess.run([sys.executable, "-m", "adanvar", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in ("generate", "train", "forecast", "gridsearch", "suite", "skipstudy", "plot"):
        assert cmd in out.stdout
