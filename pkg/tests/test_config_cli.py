import numpy as np
import pytest

from ksmc import experiments
from ksmc.cli import main
from ksmc.config import (SEED_ENV, ExperimentConfig, apply_seed_override, format_value,
                         load_config, parse_config, parse_value, save_config, serialize_config)
from ksmc.errors import ConfigError, InsufficientDataError
from ksmc.records import read_run_csv

LINEAR = """\
problem = linear_gaussian
filters = ks, enkf, kalman
ks.N = 50
enkf.N = 50
T_seconds = 0.5
dt_seconds = 0.01
seeds = 0, 1
"""

KALMAN = """\
problem = linear_gaussian
filters = kalman
T_seconds = 0.5
dt_seconds = 0.01
seeds = 0
"""


def _manifest(path):
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


# -- config parsing ----------------------------------------------------------------------------


def test_value_typing():
    assert parse_value("true") is True and parse_value("False") is False
    assert parse_value("3") == 3 and isinstance(parse_value("3"), int)
    assert parse_value("2.5e-3") == 0.0025
    assert parse_value("1, 2.0, 3") == (1, 2.0, 3)
    assert parse_value("ks, enkf") == ("ks", "enkf")
    assert parse_value(" word ") == "word"
    assert format_value(0.1) == "0.1" and format_value(True) == "true"
    with pytest.raises(ConfigError):
        format_value((1,))


def test_parse_groups_keys():
    cfg = parse_config(LINEAR + "problem.a = -2.0\nks.kappa = 4  # comment\nrates.kind = N\n")
    assert cfg.problem == "linear_gaussian" and cfg.filters == ("ks", "enkf", "kalman")
    assert cfg.problem_params == {"a": -2.0}
    assert cfg.params_for("ks") == {"N": 50, "kappa": 4}
    assert cfg.extra == {"rates.kind": "N"}
    assert cfg.seeds == (0, 1) and cfg.refine is None and cfg.output_dir == "out"


def test_round_trip(tmp_path):
    cfg = parse_config(LINEAR + "problem.a = -2.0\nks.final_correction = true\nrefine = 4\n"
                       "output_dir = somewhere\nks.substep_limit = 0.5\n")
    assert parse_config(serialize_config(cfg)) == cfg
    assert load_config(save_config(cfg, tmp_path / "c.txt")) == cfg


@pytest.mark.parametrize("text, fragment", [
    ("filters = ks\nT_seconds = 1\ndt_seconds = 0.1\nseeds = 0\n", "missing"),
    (LINEAR.replace("linear_gaussian", "pendulum"), "unknown problem"),
    (LINEAR.replace("ks, enkf, kalman", "ks, pf"), "unknown filter"),
    (LINEAR.replace("ks, enkf, kalman", "ks, ks"), "repeat"),
    (LINEAR.replace("0, 1", "0, 0"), "repeat"),
    (LINEAR.replace("0, 1", "-1"), "non-negative"),
    (LINEAR.replace("T_seconds = 0.5", "T_seconds = 0.333"), "integer multiple"),
    (LINEAR.replace("T_seconds = 0.5", "T_seconds = -1"), "positive"),
    (LINEAR + "abs1.N = 10\n", "not in the campaign"),
    (LINEAR + "ks.N = 10\n", "duplicate"),
    (LINEAR + "nonsense\n", "expected"),
    (LINEAR + "stray = 1\n", "unknown key"),
    (LINEAR + "refine = 0\n", "refine"),
])
def test_invalid_configs(text, fragment):
    with pytest.raises(ConfigError, match=fragment):
        parse_config(text)


def test_seed_override_precedence():
    cfg = parse_config(LINEAR)
    assert apply_seed_override(cfg, None, {}) == (cfg, "config")
    env = {SEED_ENV: "5,6"}
    assert apply_seed_override(cfg, None, env)[0].seeds == (5, 6)
    assert apply_seed_override(cfg, None, env)[1] == "environment"
    got, source = apply_seed_override(cfg, "9", env)
    assert got.seeds == (9,) and source == "option"
    with pytest.raises(ConfigError):
        apply_seed_override(cfg, "a,b", {})


def test_direct_construction_checks():
    with pytest.raises(ConfigError):
        ExperimentConfig("duffing", (), 1.0, 0.1, (0,))
    with pytest.raises(ConfigError):
        ExperimentConfig("duffing", ("ks",), 1.0, 0.1, ())
    cfg = ExperimentConfig("duffing", "ks", 1.0, 0.1, 3)
    assert cfg.filters == ("ks",) and cfg.seeds == (3,)


# -- campaigns and outputs ---------------------------------------------------------------------


def test_emit_outputs_rejects_empty_campaign(tmp_path):
    cfg = parse_config(LINEAR)
    _, summary = experiments.run_experiment(cfg.with_seeds([0]))
    with pytest.raises(InsufficientDataError):
        experiments.emit_outputs([], summary, tmp_path / "out", cfg)
    assert not (tmp_path / "out").exists()


def test_run_outputs_and_paired_truth(tmp_path):
    cfg = parse_config(LINEAR)
    records, summary = experiments.run_experiment(cfg)
    out = experiments.emit_outputs(records, summary, tmp_path, cfg)
    assert len(out["files"]) == 2 * 3 + 2
    for seed in cfg.seeds:
        truths = []
        for name in cfg.filters:
            cols, data = read_run_csv(tmp_path / "runs" / f"{name}_seed{seed}.csv")
            assert cols[:4] == ["t", "est_1", "truth_1", "std_1"]
            assert cols[4:6] == ["ks_stat", "beta1_used"]
            assert data.shape == (51, len(cols))
            truths.append(data[:, 2])
        for t in truths[1:]:
            np.testing.assert_array_equal(t, truths[0])
    man = _manifest(out["manifest"])
    assert man["seeds"] == "0,1" and man["seed_source"] == "config" and man["kind"] == "run"
    assert all(f"file.runs/{n}_seed{s}.csv" in man for n in cfg.filters for s in cfg.seeds)


def test_output_dir_does_not_change_hash(tmp_path):
    cfg = parse_config(LINEAR).with_seeds([0])
    records, summary = experiments.run_experiment(cfg)
    a = experiments.emit_outputs(records, summary, tmp_path / "a", cfg)
    from dataclasses import replace
    b = experiments.emit_outputs(records, summary, tmp_path / "b", replace(cfg, output_dir="x"))
    assert a["manifest_hash"] == b["manifest_hash"]


def test_unknown_problem_parameter_is_rejected():
    cfg = parse_config(LINEAR + "problem.alpha = 1\n")
    with pytest.raises(ConfigError, match="alpha"):
        experiments.build_scenario(cfg)


def test_kalman_single_seed_is_reproducible(tmp_path):
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text(KALMAN)
    for d in ("a", "b"):
        assert main(["run", "--config", str(cfg_path), "--seed-override", "7",
                     "--out-dir", str(tmp_path / d)]) == 0
    a = (tmp_path / "a" / "runs" / "kalman_seed7.csv").read_bytes()
    assert a == (tmp_path / "b" / "runs" / "kalman_seed7.csv").read_bytes()
    _, data = read_run_csv(tmp_path / "a" / "runs" / "kalman_seed7.csv")
    assert np.all(np.isnan(data[:, 5])) and np.all(np.isfinite(data[:, 1]))


# -- command line ----------------------------------------------------------------------------


def test_cli_environment_seed_source(tmp_path, monkeypatch):
    cfg_path = tmp_path / "c.txt"
    cfg_path.write_text(KALMAN)
    monkeypatch.setenv(SEED_ENV, "3")
    assert main(["run", "--config", str(cfg_path), "--out-dir", str(tmp_path / "o")]) == 0
    man = _manifest(tmp_path / "o" / "manifest.txt")
    assert man["seed_source"] == "environment" and man["seeds"] == "3"


def test_cli_missing_config_exit_code(tmp_path, capsys):
    assert main(["run", "--config", str(tmp_path / "absent.txt")]) == 2
    assert "error:" in capsys.readouterr().err


def test_cli_invalid_config_exit_code(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("problem = duffing\n")
    assert main(["run", "--config", str(p)]) == 2


def test_cli_divergence_exit_code(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("problem = duffing\nfilters = ks\nks.N = 20\nT_seconds = 10.0\n"
                 "dt_seconds = 0.1\nrefine = 1\nseeds = 0\n")
    assert main(["run", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 3


def test_cli_output_error_exit_code(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text(KALMAN)
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["run", "--config", str(p), "--out-dir", str(blocker)]) == 4


def test_cli_generate(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text(LINEAR)
    assert main(["generate", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    names = sorted(f.name for f in (tmp_path / "o").iterdir())
    assert names == ["manifest.txt", "truth_seed0.csv", "truth_seed0.meta", "truth_seed1.csv",
                     "truth_seed1.meta"]
    assert _manifest(tmp_path / "o" / "manifest.txt")["kind"] == "generate"


def test_cli_compare_prints_table(tmp_path, capsys):
    p = tmp_path / "c.txt"
    p.write_text(LINEAR)
    assert main(["compare", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    out = capsys.readouterr().out
    assert "kalman" in out and "manifest" in out


def test_cli_rates(tmp_path, capsys):
    p = tmp_path / "c.txt"
    p.write_text("problem = linear_gaussian\nfilters = ks\nT_seconds = 1.0\ndt_seconds = 0.01\n"
                 "seeds = 0, 1\nrates.kind = N\nrates.levels = 20, 40, 80\n")
    assert main(["rates", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 0
    assert "slope=" in capsys.readouterr().out
    assert (tmp_path / "o" / "rates_N.csv").exists()


def test_cli_rates_needs_linear_problem(tmp_path):
    p = tmp_path / "c.txt"
    p.write_text("problem = duffing\nfilters = ks\nT_seconds = 1.0\ndt_seconds = 0.01\n"
                 "seeds = 0\nrates.levels = 20, 40, 80\n")
    assert main(["rates", "--config", str(p), "--out-dir", str(tmp_path / "o")]) == 2
