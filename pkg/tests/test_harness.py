import json
from fractions import Fraction

import numpy as np
import pytest

from vardimwalk import cli, harness
from vardimwalk.harness import (
    SCHEMA,
    ConfigError,
    ExperimentConfig,
    Metric,
    Report,
    histogram,
    parse_k,
    region_bins,
    run,
    sample_starts,
    simulate_chunked,
    stationary_oracle,
    variance_profile,
)
from vardimwalk.lattice import ParameterError
from vardimwalk.walker import CEMETERY, MarginalObserver


@pytest.mark.parametrize("text, expected", [("4", (4,)), ("3-6", (3, 4, 5, 6)), ("5,3", (3, 5)), (7, (7,)), ([6, 4], (4, 6))])
def test_parse_k(text, expected):
    assert parse_k(text) == expected


@pytest.mark.parametrize("text", ["x", "3-", ""])
def test_parse_k_rejects(text):
    with pytest.raises(ConfigError):
        parse_k(text)


def test_config_defaults_and_validation():
    cfg = ExperimentConfig("variance").resolved()
    assert cfg.k == (5,) and cfg.paths == 20_000 and cfg.epsilon == "1/2"
    assert ExperimentConfig("variance", k="4", paths=10).resolved().k == (4,)
    with pytest.raises(ConfigError, match="unknown experiment"):
        ExperimentConfig("nothing")
    with pytest.raises(ConfigError, match="format"):
        ExperimentConfig("build", format="xml")
    with pytest.raises(ConfigError, match="paths"):
        ExperimentConfig("variance", paths=0).resolved()
    with pytest.raises(ConfigError, match="theta"):
        ExperimentConfig("tightness", theta=0.6, window=0.5).resolved()
    with pytest.raises(ParameterError):
        ExperimentConfig("build", k="2").resolved()
    echo = ExperimentConfig("build", n_jobs=4, out="x.json").resolved().echo()
    assert "out" not in echo and "n_jobs" not in echo and echo["k"] == [3, 4, 5, 6, 7, 8]


def test_config_file_with_overrides(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text("# sweep\nexperiment = variance\nk = 4-5\npaths = 300  # small\nrod-length = 10\n\n")
    cfg = ExperimentConfig.from_file(str(path), paths=500)
    assert cfg.k == (4, 5) and cfg.paths == 500 and cfg.rod_length == "10"
    path.write_text("colour = blue\n")
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_file(str(path), experiment="build")
    path.write_text("paths = many\n")
    with pytest.raises(ConfigError, match="paths"):
        ExperimentConfig.from_file(str(path), experiment="build")
    path.write_text("just words\n")
    with pytest.raises(ConfigError, match="key = value"):
        ExperimentConfig.from_file(str(path), experiment="build")


def test_report_rendering():
    rep = Report("build", {"k": [3]}, [Metric("m", Fraction(1, 4), "<= 1", True), Metric("n", np.float64(2.5), "< 1", False, "why")], 1.23456)
    d = json.loads(rep.to_json())
    assert d["schema"] == SCHEMA and d["verdict"] == "fail" and d["wall_clock"] == 1.235
    assert d["metrics"][0]["value"] == "1/4" and d["metrics"][1]["note"] == "why"
    assert "wall_clock" not in rep.as_dict(wall_clock=False)
    lines = rep.to_csv().splitlines()
    assert lines[0] == "experiment,metric,value,tolerance,verdict,note"
    assert lines[2].startswith("build,n,2.5,< 1,fail")
    assert rep.metric("m").passed
    with pytest.raises(KeyError):
        rep.metric("zzz")


def test_reports_replay_byte_identically(tmp_path):
    a = run(ExperimentConfig("reversal", paths=1000, out=str(tmp_path / "a.json")))
    b = run(ExperimentConfig("reversal", paths=1000, out=str(tmp_path / "b.json")))
    assert a.to_json(wall_clock=False) == b.to_json(wall_clock=False)
    strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k != "wall_clock"}
    assert strip(tmp_path / "a.json") == strip(tmp_path / "b.json")
    c = run(ExperimentConfig("reversal", paths=1000, seed=5))
    assert c.to_json(wall_clock=False) != a.to_json(wall_clock=False)


def test_chunking_and_workers_do_not_change_results(small_measures, reflected_kernel):
    starts = sample_starts(small_measures.normalized(), 900, seed=3)
    make = lambda: [MarginalObserver([0.1, 0.2])]
    one = simulate_chunked(reflected_kernel, starts, 0.2, 11, make, chunk=900)[0]
    many = simulate_chunked(reflected_kernel, starts, 0.2, 11, make, chunk=250)[0]
    pooled = simulate_chunked(reflected_kernel, starts, 0.2, 11, make, chunk=250, n_jobs=2)[0]
    assert np.array_equal(one, many) and np.array_equal(one, pooled)


def test_start_sampling_is_seeded():
    p = np.array([0.1, 0.0, 0.9])
    a = sample_starts(p, 1000, 1, salt=2)
    assert np.array_equal(a, sample_starts(p, 1000, 1, salt=2))
    assert not np.array_equal(a, sample_starts(p, 1000, 1, salt=3))
    assert not np.any(a == 1)


def test_region_bins_and_histogram(small_graph):
    bins, labels = region_bins(small_graph)
    assert labels[0] == "plane[0,1)" and labels[-1] == "exterior"
    assert np.all(bins[~small_graph.inside] == len(labels) - 1)
    assert bins[0] == labels.index("rod[0,1)")
    counts = histogram(bins, np.array([0, CEMETERY, 0]), len(labels))
    assert counts[labels.index("rod[0,1)")] == 2 and counts[-1] == 1


def test_stationary_oracle_recovers_normalized_measure(small_measures, reflected_kernel):
    pi = stationary_oracle(reflected_kernel)
    ref = small_measures.normalized("reflected")
    live = ref > 0
    assert np.max(np.abs(pi[live] / ref[live] - 1)) < 1e-10


def test_variance_profile_on_gaussian_increments():
    rng = np.random.default_rng(0)
    n, times = 40_000, np.array([0.5, 1.0])
    start = np.zeros((n, 2))
    pos = np.stack([rng.normal(0, np.sqrt(t * np.array([1.0, 0.5])), (n, 2)) for t in times], axis=1)
    prof = variance_profile(start, pos, np.ones(n, bool), times)
    assert prof["survivors"] == n
    assert np.all(np.abs(prof["rate"] - [1.0, 0.5]) < 4 * prof["se"])
    assert np.isnan(variance_profile(start, pos, np.zeros(n, bool), times)["rate"]).all()


# command line ------------------------------------------------------------------------


def test_cli_success_prints_report(capsys):
    assert cli.main(["build", "--k", "3-4"]) == cli.EXIT_PASS
    out = json.loads(capsys.readouterr().out)
    assert out["verdict"] == "pass" and out["config"]["k"] == [3, 4]


def test_cli_csv_to_file(tmp_path):
    out = tmp_path / "r.csv"
    assert cli.main(["build", "--k", "3", "--format", "csv", "--out", str(out)]) == 0
    assert out.read_text().startswith("experiment,metric,value")


def test_cli_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("k = 3\nepsilon = 1\n")
    assert cli.main(["build", "--config", str(cfg)]) == 0
    assert json.loads(capsys.readouterr().out)["config"]["k"] == [3]


def test_cli_exit_codes(monkeypatch, capsys):
    assert cli.main(["build", "--k", "3", "--epsilon", "3"]) == cli.EXIT_PARAMETERS
    assert cli.main(["nonsense"]) == cli.EXIT_USAGE
    assert cli.main(["variance", "--paths", "0"]) == cli.EXIT_USAGE
    assert cli.main(["build", "--config", "/nonexistent/file"]) == cli.EXIT_USAGE
    assert cli.main(["--help"]) == cli.EXIT_PASS
    failing = {"build": lambda cfg: [Metric("always", 1, "== 0", False)]}
    monkeypatch.setattr(harness, "_RUNNERS", failing)
    assert cli.main(["build", "--k", "3"]) == cli.EXIT_FAIL
    assert "FAIL build: always" in capsys.readouterr().err
