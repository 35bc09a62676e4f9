import json
import time

import pytest

from hiertmle import cli
from hiertmle.simulation import DgpSpec, default_battery, generate_frame
from hiertmle.tmle import NumericFailure

W = ["W1", "W2", "W3", "W4"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    generate_frame(DgpSpec("example_ate", J=400, seed=3)).to_csv(d / "ate.csv", index=False)
    generate_frame(DgpSpec("example_shift", J=800, seed=3)).to_csv(d / "shift.csv", index=False)
    return d


def _write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def _ate_config(d, **extra):
    cfg = {"data": "ate.csv", "ynode": "Y", "anodes": "A", "wenodes": W, "f_gstar1": 1, "f_gstar2": 0,
           "qform": "Y ~ W1 + W2 + W3 + W4 + A", "hform_g0": "A ~ W1 + W2 + W3 + W4"}
    cfg.update(extra)
    return cfg


def test_estimate_writes_report_and_echo_reproduces(workdir, capsys):
    conf = _write(workdir / "ate.json", _ate_config(workdir))
    assert cli.main(["estimate", "--config", conf, "--out", str(workdir / "o1")]) == 0
    assert "ATE" in capsys.readouterr().out
    report = json.loads((workdir / "o1" / "report.json").read_text())
    assert set(report) >= {"EY_gstar1", "EY_gstar2", "ATE"}
    echo = workdir / "o1" / "config.resolved.json"
    resolved = json.loads(echo.read_text())
    assert resolved["alpha"] == 0.995 and resolved["lbound"] == 0.005
    assert cli.main(["estimate", "--config", str(echo), "--out", str(workdir / "o2")]) == 0
    assert (workdir / "o1" / "report.json").read_bytes() == (workdir / "o2" / "report.json").read_bytes()


def test_identical_interventions_give_zero_effect(workdir):
    conf = _write(workdir / "same.json", _ate_config(workdir, f_gstar2=1))
    assert cli.main(["estimate", "--config", conf, "--out", str(workdir / "same")]) == 0
    ate = json.loads((workdir / "same" / "report.json").read_text())["ATE"]["estimates"]
    assert all(v == 0 for v in ate.values())


def test_density_fit_then_reuse_gives_identical_report(workdir):
    dconf = _write(workdir / "dens.json", {"data": "ate.csv", "anodes": "A", "wenodes": W,
                                            "hform": "A ~ W1 + W2 + W3 + W4"})
    assert cli.main(["density-fit", "--config", dconf, "--out", str(workdir / "d")]) == 0
    inline = _write(workdir / "inline.json", _ate_config(workdir))
    reuse = _write(workdir / "reuse.json", _ate_config(workdir, g0_model="d/density.json"))
    assert cli.main(["estimate", "--config", inline, "--out", str(workdir / "in")]) == 0
    assert cli.main(["estimate", "--config", reuse, "--out", str(workdir / "re")]) == 0
    a = json.loads((workdir / "in" / "report.json").read_text())
    b = json.loads((workdir / "re" / "report.json").read_text())
    assert a["ATE"] == b["ATE"]


def test_reuse_with_other_covariates_is_a_data_error(workdir):
    dconf = _write(workdir / "dens2.json", {"data": "ate.csv", "anodes": "A", "wenodes": W})
    assert cli.main(["density-fit", "--config", dconf, "--out", str(workdir / "d2")]) == 0
    bad = _write(workdir / "bad.json", _ate_config(workdir, wenodes=["W1", "W2"], qform="Y ~ W1 + W2 + A",
                                                   hform_g0=None, g0_model="d2/density.json"))
    assert cli.main(["estimate", "--config", bad, "--out", str(workdir / "bad")]) == 3


def test_shift_example_with_dhist_bins(workdir):
    conf = _write(workdir / "shift.json", {
        "data": "shift.csv", "ynode": "Y", "anodes": "A", "wenodes": W,
        "f_gstar1": {"sampler": "shift_truncate", "shift": 2, "trunc_bound": 10,
                     "mean_coefs": "0.86*W1 + 0.93*W3*W4 + 0.41*W4"},
        "hform_g0": "A ~ W1 + W3 * W4", "bin_method": "dhist", "nbins": 8})
    assert cli.main(["estimate", "--config", conf, "--out", str(workdir / "sh")]) == 0
    rep = json.loads((workdir / "sh" / "report.json").read_text())
    assert rep["EY_gstar1"]["diagnostics"]["bins_used"] == {"A": 10}


@pytest.mark.parametrize(
    "cfg, code",
    [
        ({"bogus": 1}, 2),
        ({"community_step": "galaxy_level"}, 2),
        ({"data": "missing.csv"}, 3),
        ({"wenodes": ["W1", "V9"]}, 3),
        ({"fluctuation": "linear"}, 2),
    ],
)
def test_exit_codes(workdir, cfg, code, capsys):
    conf = _write(workdir / "err.json", _ate_config(workdir, **cfg))
    assert cli.main(["estimate", "--config", conf, "--out", str(workdir / "err")]) == code
    assert "error" in capsys.readouterr().err


def test_malformed_json_is_a_config_error(workdir):
    (workdir / "broken.json").write_text("{not json")
    assert cli.main(["estimate", "--config", str(workdir / "broken.json")]) == 2


def test_numeric_failure_exit_code(workdir, monkeypatch):
    def boom(cfg, out):
        raise NumericFailure("tmle estimate is not finite")

    monkeypatch.setattr(cli, "cmd_estimate", boom)
    conf = _write(workdir / "ok.json", _ate_config(workdir))
    assert cli.main(["estimate", "--config", conf]) == 4


def test_simulate_smoke_and_seed_repeat(tmp_path):
    conf = _write(tmp_path / "s.json", {"study": "sim2_static", "R": 10})
    t0 = time.perf_counter()
    assert cli.main(["simulate", "--config", conf, "--seed", "7", "--out", str(tmp_path / "a")]) == 0
    assert time.perf_counter() - t0 < 60
    assert cli.main(["simulate", "--config", conf, "--seed", "7", "--out", str(tmp_path / "b")]) == 0
    for name in ("metrics.txt", "metrics.json", "reps.csv", "config.resolved.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert json.loads((tmp_path / "a" / "config.resolved.json").read_text())["seed"] == 7


@pytest.mark.slow
def test_simulate_box_plot_csv_shape(tmp_path):
    conf = _write(tmp_path / "s3.json", {"study": "sim3_n1", "J": 1000, "R": 20})
    assert cli.main(["simulate", "--config", conf, "--out", str(tmp_path / "s3")]) == 0
    lines = (tmp_path / "s3" / "reps.csv").read_text().strip().splitlines()
    assert len(lines) - 1 == 20 * len(default_battery("sim3_n1").estimators)
