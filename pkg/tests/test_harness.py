import csv

import numpy as np
import pytest

from varproreg import harness
from varproreg.errors import ConfigError, NumericalError
from varproreg.optim import ProjectionPolicy


def _rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_config_parsing_and_overrides(tmp_path):
    text = "[experiment]\nname = singlescale\n[problem]\nsize = 12 ; inline comment\n[schedule]\nthetas = 4, 1, 0\n"
    cfg = harness.load_config(text=text, out=tmp_path, seed=7, predictor_sign="paper")
    assert cfg.experiment == "singlescale"
    assert cfg.get("problem", "size", cast=int) == 12
    assert cfg.get("problem", "seed", cast=int) == 7
    assert cfg.get("continuation", "sign") == "paper"
    assert harness.schedule_from(cfg).thetas == (4.0, 1.0, 0.0)


@pytest.mark.parametrize("text", [
    "[experiment]\nname = nothing\n",
    "not an ini file",
    "[experiment]\nname = singlescale\n[schedule]\nthetas = 1, 2\n",
    "[experiment]\nname = singlescale\n[problem]\nsize = big\n",
])
def test_config_errors(text, tmp_path):
    with pytest.raises(ConfigError):
        cfg = harness.load_config(text=text, out=tmp_path)
        harness.schedule_from(cfg)
        cfg.get("problem", "size", cast=int)


def test_parse_policy():
    assert harness.parse_policy("none", 200) == ProjectionPolicy.none(200)
    assert harness.parse_policy("last0.9", 200).boundary == 20
    assert harness.parse_policy("last1.0", 50) == ProjectionPolicy.full(50)
    with pytest.raises(ConfigError):
        harness.parse_policy("some", 10)


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert harness.main(["timing", "--config", str(tmp_path / "missing.ini"), "--out", str(tmp_path)]) == 2

    def boom(cfg):
        raise NumericalError("diverged")

    monkeypatch.setitem(harness.COMMANDS, "timing", boom)
    assert harness.main(["timing", "--out", str(tmp_path)]) == 3


def test_timing_report(tmp_path):
    cfg = harness.load_config(text="[problem]\nsize = 12\n[timing]\nwarmup = 1\nruns = 3\n",
                              experiment="timing", out=tmp_path)
    rep = harness.cmd_timing(cfg)
    assert rep.factor("loss") == 1.0 and rep.factor("forward") == 1.0
    rows = _rows(tmp_path / "timing.csv")
    assert [r["target"] for r in rows] == ["loss", "gradient", "hessian", "forward", "jacobian"]


def test_singlescale_identity_problem_and_determinism(tmp_path):
    text = ("[problem]\nname = identical\nsize = 10\n[schedule]\nthetas = 2, 0\n"
            "[singlescale]\ninclude_swapped = false\n")
    outs = []
    for sub in ("a", "b"):
        cfg = harness.load_config(text=text, experiment="singlescale", out=tmp_path / sub)
        harness.run(cfg)
        outs.append(tmp_path / sub)
    rows = _rows(outs[0] / "singlescale.csv")
    assert all(float(r["final_ssd"]) < 1e-20 for r in rows)
    for name in ("singlescale.csv", "singlescale.svg", "original_pc.pgm"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_hessian_compare_with_single_scale_schedule(tmp_path):
    cfg = harness.load_config(text="[problem]\nsize = 10\n[schedule]\nthetas = 0\n",
                              experiment="hessian-compare", out=tmp_path)
    out = harness.run(cfg)
    assert all(len(v) == 0 for v in out.values())
    assert _rows(tmp_path / "hessian_compare.csv") == []
    assert (tmp_path / "hessian_compare.svg").exists()


def test_superres_small_grid(tmp_path):
    text = ("[problem]\nsize = 8\ntemplates = 2\n[superres]\nlam_f = 1\ngn_iters = 2\nseeds = 0\n"
            "cg_iters = 30\npolicies = none, full\ninexact_cg_iters = 5\n")
    cfg = harness.load_config(text=text, experiment="superres", out=tmp_path)
    results = harness.run(cfg)
    assert len(results) == 3
    summary = _rows(tmp_path / "superres_summary.csv")
    assert [(r["policy"], r["cg_iters"]) for r in summary] == [("none", "30"), ("full", "30"), ("full", "5")]
    assert (tmp_path / "seed0_full_cg30_recon.pgm").exists()
    assert (tmp_path / "seed0_none_cg30_error.pgm").exists()
    trace = _rows(tmp_path / "superres_trace.csv")
    assert float(trace[0]["rel_loss"]) == 1.0


def test_superres_at_truth_starts_near_zero():
    from varproreg import problems
    data, truth = problems.superres_problem(0, n=8, q=2)
    run = harness.run_superres_cell(0, "none", ProjectionPolicy.none(100), lam_f=0.05, gn_iters=1,
                                    w0=truth.w_true, size=8, templates=2)
    run_id = harness.run_superres_cell(0, "none", ProjectionPolicy.none(100), lam_f=0.05, gn_iters=1,
                                       size=8, templates=2)
    assert run.records[0]["loss"] < 0.05 * run_id.records[0]["loss"]


def test_taylor_helpers():
    hs = 10.0 ** -np.arange(1, 6)
    assert abs(harness.fit_slope(hs, 3 * hs**2) - 2) < 1e-12
    assert abs(harness.fit_slope(hs, hs) - 1) < 1e-12
