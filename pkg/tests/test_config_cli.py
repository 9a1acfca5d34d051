import json

import pytest

from markov_clt.cli import build_parser, run
from markov_clt.config import PRESETS, load_preset, parse_config, parse_override, preset_text
from markov_clt.errors import ConfigError, NDViolation
from markov_clt.harness import build_model

MINIMAL = '[model]\nkind = "ou"\n'


def write(tmp_path, text, name="exp.toml"):
    p = tmp_path / name
    p.write_text(text)
    return p


# configuration ----------------------------------------------------------------------------------

def test_minimal_config_and_stable_hash(tmp_path):
    a = parse_config(write(tmp_path, MINIMAL))
    b = parse_config(write(tmp_path, '[meta]\nseed = 99\n' + MINIMAL, "b.toml"))
    assert a.model.kind == "ou" and a.lln.n_paths == 10_000
    assert a.config_hash() == b.config_hash()
    c = parse_config(write(tmp_path, MINIMAL + "theta = 2.0\n", "c.toml"))
    assert c.config_hash() != a.config_hash()


def test_unknown_key_names_its_path(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, MINIMAL + "[lln]\nn_pahts = 3\n"))
    assert exc.value.key_path == "lln.n_pahts"


def test_bad_value_names_its_path(tmp_path):
    with pytest.raises(ConfigError) as exc:
        parse_config(write(tmp_path, MINIMAL + "[lln]\nn_paths = 1\n"))
    assert exc.value.key_path == "lln.n_paths"


def test_missing_and_malformed_files(tmp_path):
    with pytest.raises(ConfigError):
        parse_config(tmp_path / "absent.toml")
    with pytest.raises(ConfigError):
        parse_config(write(tmp_path, "[model\n"))


def test_forcing_condition_checked_at_load(tmp_path):
    base = '[model]\nkind = "vorticity"\ncutoff = 4\n'
    bad = base + "forcing_modes = [[1, 0], [-1, 0], [0, 1], [0, -1]]\nforcing_gammas = [1.0, 1.0, 1.0, 1.0]\n"
    with pytest.raises(NDViolation) as exc:
        parse_config(write(tmp_path, bad))
    assert exc.value.clause
    good = base + "forcing_modes = [[1, 0], [-1, 0], [1, 1], [-1, -1]]\nforcing_gammas = [1.0, 1.0, 1.0, 1.0]\n"
    cfg = parse_config(write(tmp_path, good, "good.toml"))
    assert build_model(cfg).kind == "vorticity"


def test_ctmc_generator_file_is_relative_to_config(tmp_path):
    (tmp_path / "q.txt").write_text("-1 1\n1 -1\n")
    cfg = parse_config(write(tmp_path, '[model]\nkind = "ctmc"\ngenerator_file = "q.txt"\n'
                                       '[observable]\nkind = "state-values"\nvalues = [1.0, -1.0]\n'))
    assert build_model(cfg).n_states == 2


def test_presets_load_and_overrides_apply():
    for name in PRESETS:
        assert load_preset(name).meta.name == name
        assert preset_text(name).startswith("#")
    cfg = load_preset("ou-closed-form", dict([parse_override("lln.n_paths=123")]))
    assert cfg.lln.n_paths == 123
    assert parse_override("hypotheses.pair=[[0.0],[1.0]]") == ("hypotheses.pair", [[0.0], [1.0]])
    with pytest.raises(ConfigError):
        parse_override("no-equals-sign")


# command line -------------------------------------------------------------------------------------

TINY = ["--set", "lln.n_paths=1000", "--set", "lln.T_list=[20.0, 40.0]", "--set", "clt.T=40.0",
        "--set", "corrector.n_samples=2000", "--set", "martingale.N=16", "--set", "martingale.n_paths=1000",
        "--set", "martingale.sigma2_paths=1000", "--set", "martingale.K=[1, 2]", "--set", "martingale.n_inner=64",
        "--set", "martingale.n_outer=8", "--set", "hypotheses.fit_samples=500",
        "--set", "hypotheses.stationary_replicas=200"]


def test_parser_requires_a_source():
    with pytest.raises(SystemExit):
        build_parser().parse_args(["clt"])
    with pytest.raises(SystemExit):
        build_parser().parse_args(["clt", "--preset", "ou-closed-form", "--config", "x.toml"])


def test_missing_config_exits_1(tmp_path):
    assert run(["oracle", "--config", str(tmp_path / "absent.toml"), "--out-dir", str(tmp_path)]) == 1


def test_bad_override_exits_1(tmp_path):
    assert run(["simulate", "--preset", "ou-closed-form", "--set", "lln.bogus=1", "--out-dir", str(tmp_path)]) == 1


def test_identical_pair_is_a_hypothesis_failure(tmp_path, capsys):
    code = run(["verify-hypotheses", "--preset", "ou-closed-form", "--set", "hypotheses.pair=[[0.0],[0.0]]",
                "--out-dir", str(tmp_path)])
    assert code == 2
    assert "H1" in capsys.readouterr().err


def test_full_report_writes_artifacts(tmp_path):
    code = run(["full-report", "--preset", "ctmc-oracle", "--out-dir", str(tmp_path), "--emit-plots",
                "--threads", "2"] + TINY)
    assert code in (0, 2)
    rep = json.loads((tmp_path / "report.json").read_text())
    assert (code == 0) == rep["pass"]
    for name in ("variance_curve.csv", "histogram.csv", "clt_histogram.gp"):
        assert (tmp_path / name).exists()
    assert "sigma =" in (tmp_path / "clt_histogram.gp").read_text()


def test_oracle_subcommand_passes(tmp_path):
    assert run(["oracle", "--preset", "ctmc-oracle", "--out-dir", str(tmp_path)] + TINY) == 0
    out = json.loads((tmp_path / "oracle.json").read_text())
    assert out["oracle"]["comparison"]["pass"] and "meta" in out


def test_simulate_writes_ensemble(tmp_path):
    assert run(["simulate", "--preset", "ctmc-oracle", "--out-dir", str(tmp_path)] + TINY) == 0
    assert (tmp_path / "ensemble.bin").stat().st_size > 0
    assert json.loads((tmp_path / "simulate.json").read_text())["n_paths"] == 1000


def test_merge_refuses_mismatched_configs(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(["full-report", "--preset", "ctmc-oracle", "--out-dir", str(a), "--seed", "1"] + TINY) == 0
    assert run(["full-report", "--preset", "ctmc-oracle", "--out-dir", str(b), "--seed", "2"] + TINY) == 0
    same = [str(a / "report.json"), str(b / "report.json")]
    assert run(["merge", *same, "--out-dir", str(tmp_path)]) == 0
    merged = json.loads((tmp_path / "merged.json").read_text())
    assert merged["meta"]["seeds"] == [1, 2] and merged["pass"]
    other = json.loads((b / "report.json").read_text())
    other["meta"]["config_hash"] = "f" * 64
    (b / "report.json").write_text(json.dumps(other))
    assert run(["merge", *same, "--out-dir", str(tmp_path)]) == 1
