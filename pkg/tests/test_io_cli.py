import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from erlangdelay.cli import box_muller, main, make_config, pointwise_stats, ConfigError
from erlangdelay.io import parse_assignments, read_csv, read_mixture, write_csv, write_mixture
from erlangdelay.kernels import ErlangMixture


# -- io ----------------------------------------------------------------------

@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64), min_size=1, max_size=6))
def test_csv_round_trip_is_exact(tmp_path_factory, values):
    path = tmp_path_factory.mktemp("csv") / "t.csv"
    header = [f"c{i}" for i in range(len(values))]
    write_csv(path, header, [values, values[::-1]])
    head, data = read_csv(path)
    assert head == header
    assert np.array_equal(data[0], values) and np.array_equal(data[1], values[::-1])


def test_csv_rejects_ragged_rows(tmp_path):
    with pytest.raises(ValueError):
        write_csv(tmp_path / "x.csv", ["a", "b"], [[1.0]])
    assert not (tmp_path / "x.csv").exists()


def test_mixture_file_round_trip(tmp_path):
    mix = ErlangMixture(1.0 / 3.0, [0.1, 0.2, 0.7])
    back = read_mixture(write_mixture(tmp_path / "m.txt", mix))
    assert back.rate == mix.rate and np.array_equal(back.coefficients, mix.coefficients)
    (tmp_path / "bad.txt").write_text("2.0\n")
    with pytest.raises(ValueError):
        read_mixture(tmp_path / "bad.txt")


def test_parse_assignments():
    got = parse_assignments(["a=1", "b-c = 2.5", "d=x,y", "# note", "", "e=true"])
    assert got == {"a": 1, "b_c": 2.5, "d": ["x", "y"], "e": True}
    with pytest.raises(ValueError):
        parse_assignments(["novalue"])


# -- sampling and statistics -------------------------------------------------

def test_box_muller_moments_and_odd_counts():
    z = box_muller(np.random.default_rng(7), 40001)
    assert z.size == 40001
    assert abs(z.mean()) < 0.02 and abs(z.std() - 1.0) < 0.02
    assert abs(np.mean(z**3)) < 0.05 and abs(np.mean(z**4) - 3.0) < 0.15
    a = box_muller(np.random.default_rng(3), 5)
    b = box_muller(np.random.default_rng(3), 5)
    assert np.array_equal(a, b)


def test_pointwise_stats_single_sample_and_percentiles():
    one = pointwise_stats(np.array([[2.0, 3.0]]))
    assert np.array_equal(one, [[2.0] * 5, [3.0] * 5])
    vals = np.arange(1.0, 101.0)[:, None]
    s = pointwise_stats(vals)[0]
    # linear interpolation between order statistics: position 0.025 * 99
    assert s[1] == pytest.approx(1 + 0.025 * 99) and s[2] == pytest.approx(1 + 0.975 * 99)
    assert (s[0], s[3], s[4]) == (50.5, 1.0, 100.0)


# -- configuration -----------------------------------------------------------

def test_config_precedence_and_rejection():
    cfg = make_config("simulate-dde", {"dt": "0.02"}, {"dt": 0.05, "tf": 3.0, "param.sigma": 2.0})
    assert cfg.dt == 0.02 and cfg.tf == 3.0 and cfg.params == {"sigma": 2.0}
    with pytest.raises(ConfigError, match="unknown option"):
        make_config("simulate-dde", {}, {"stepsize": 0.1})
    with pytest.raises(ConfigError):
        make_config("simulate-dde", {"method": "rk4"})
    with pytest.raises(ConfigError):
        make_config("montecarlo", {"samples": 0})
    with pytest.raises(ConfigError):
        make_config("fit-kernel", {})


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run(argv):
    assert main(argv) == 0


def test_unknown_keys_and_flags_exit_with_status_2(tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("dt=0.01\nbogus=1\n")
    with pytest.raises(SystemExit) as info:
        main(["simulate-dde", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert info.value.code == 2
    assert "bogus" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["simulate-dde", "--nope", "1"])
    assert info.value.code == 2


def test_runtime_failure_exits_with_status_1(tmp_path):
    out = tmp_path / "o"
    assert main(["simulate-dde", "--dt", "0.07", "--out", str(out)]) == 1
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["failures"][0]["stage"] == "fatal"
    assert "multiple of dt" in manifest["failures"][0]["error"]


# -- subcommands -------------------------------------------------------------

def test_fit_kernel_writes_summary_and_mixtures(tmp_path):
    out = tmp_path / "fit"
    run(["fit-kernel", "--kernel", "gaussian-halfline", "--order", "6", "--method", "both",
         "--error-points", "2000", "--out", str(out)])
    summary = rows(out / "fit_summary.csv")
    assert list(summary[0])[:4] == ["channel", "method", "order", "rate"]
    assert sorted(r["method"] for r in summary) == ["least-squares", "theoretical"]
    files = sorted(p.name for p in out.glob("mixture_*.txt"))
    assert len(files) == 2
    for f in files:
        mix = read_mixture(out / f)
        assert mix.order == 6
    manifest = json.loads((out / "manifest.json").read_text())
    for key in ("config", "version", "started", "wall_time", "timings", "outputs"):
        assert key in manifest


def test_simulate_dde_is_deterministic(tmp_path):
    args = ["simulate-dde", "--param", "sigma=2", "--model", "logistic-bifurcation", "--dt", "0.01",
            "--horizon", "1.2", "--tf", "3"]
    run(args + ["--out", str(tmp_path / "a")])
    run(args + ["--out", str(tmp_path / "b")])
    a = (tmp_path / "a" / "trajectory.csv").read_bytes()
    assert a == (tmp_path / "b" / "trajectory.csv").read_bytes()
    head, data = read_csv(tmp_path / "a" / "trajectory.csv")
    assert head == ["time", "x", "z1"] and data.shape == (301, 3)


def test_simulate_lct_explicit_and_implicit_agree(tmp_path):
    base = ["simulate-lct", "--order", "8", "--tf", "4", "--output-dt", "0.5", "--error-points", "1000"]
    run(base + ["--out", str(tmp_path / "e")])
    run(base + ["--integrator", "implicit", "--out", str(tmp_path / "i")])
    _, e = read_csv(tmp_path / "e" / "trajectory.csv")
    _, i = read_csv(tmp_path / "i" / "trajectory.csv")
    assert e.shape == i.shape == (9, 3)
    assert np.allclose(e, i, atol=1e-6)


def test_simulate_lct_reads_mixture_files(tmp_path):
    mfile = write_mixture(tmp_path / "m.txt", ErlangMixture(4.0, [0.25, 0.5, 0.25]))
    run(["simulate-lct", "--model", "logistic-bifurcation", "--mixtures", str(mfile), "--tf", "2",
         "--out", str(tmp_path / "o")])
    head, data = read_csv(tmp_path / "o" / "trajectory.csv")
    assert head == ["time", "x", "z1"] and data[-1, 0] == 2.0


def test_bifurcate_small_scan(tmp_path):
    out = tmp_path / "bif"
    run(["bifurcate", "--order", "8", "--grid", "1", "20", "--dump-spectrum", "--simulate", "1",
         "--dt", "0.01", "--horizon", "1.2", "--param", "tf=3", "--error-points", "1000", "--out", str(out)])
    scan = rows(out / "bifurcation.csv")
    assert list(scan[0])[:3] == ["value", "x_bar", "max_real"]
    assert float(scan[0]["max_real"]) < 0 < float(scan[1]["max_real"])
    _, spec = read_csv(out / "spectrum.csv")
    assert spec.shape[0] == 2 * 10
    assert (out / "simulations.csv").exists() and (out / "simulation_1.csv").exists()


def test_montecarlo_small_run(tmp_path):
    out = tmp_path / "mc"
    run(["montecarlo", "--order", "6", "--points", "40", "--samples", "3", "--seed", "5",
         "--dde-dts", "4e-4", "2e-4", "--output-dt", "0.05", "--param", "tf=0.2", "--error-points", "1000",
         "--out", str(out)])
    head, stats = read_csv(out / "montecarlo_stats.csv")
    assert head[0] == "time" and stats.shape == (5, 11)
    mean, lo, hi, mn, mx = stats[:, 1:6].T
    assert np.all(mn <= lo) and np.all(lo <= mean) and np.all(mean <= hi) and np.all(hi <= mx)
    samples = rows(out / "montecarlo_samples.csv")
    assert [r["status"] for r in samples] == ["ok"] * 3
    _, summary = read_csv(out / "relative_diff_summary.csv")
    assert summary.shape[0] == 2 and np.all(summary[:, 1] > 0)
    # same seed, same samples
    run(["montecarlo", "--order", "6", "--points", "40", "--samples", "3", "--seed", "5",
         "--dde-dts", "4e-4", "2e-4", "--output-dt", "0.05", "--param", "tf=0.2", "--error-points", "1000",
         "--workers", "2", "--out", str(tmp_path / "mc2")])
    assert (out / "montecarlo_stats.csv").read_bytes() == (tmp_path / "mc2" / "montecarlo_stats.csv").read_bytes()
