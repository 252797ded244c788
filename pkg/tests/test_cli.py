"""End-to-end exercises of the command-line entry point."""

import csv
import json
import os

import pytest

from sgldlab.cli import ConfigError, load_config, main, resolve_threads

BASE = {
    "loss": {"family": "quadratic", "R": 1.0, "d": 2},
    "sgld": {"eta": 0.05, "beta": 4.0, "k": 5, "T": 60, "s_sq": 1.0, "seed": 77},
    "data": {"n": 20},
    "bounds": {"sigma_g_sq": 0.25},
    "estimators": {"n_trials": 4, "n_chains": 6, "n_resamples": 40,
                   "n_pairs": 6, "mi_pairs": 40},
}


def write_config(path, **over):
    cfg = {block: dict(vals) for block, vals in BASE.items()}
    for block, vals in over.items():
        cfg.setdefault(block, {}).update(vals)
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return str(path)


def read_csv_rows(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


# ------------------------------------------------------------------- certify


def test_certify_default_quadratic_exits_zero(tmp_path):
    cfg = write_config(tmp_path / "c.json",
                       loss={"certify_samples": 2000})
    rc = main(["certify", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 0
    report = json.load(open(tmp_path / "out" / "certify_report.json"))
    assert report["passed"] is True


def test_certify_wrong_claimed_smoothness_exits_two_with_witness(tmp_path):
    cfg = write_config(tmp_path / "c.json",
                       loss={"claimed": {"M": 0.5, "R": None},
                             "certify_samples": 2000})
    rc = main(["certify", "--config", cfg, "--out", str(tmp_path / "out")])
    assert rc == 2
    report = json.load(open(tmp_path / "out" / "certify_report.json"))
    assert report["passed"] is False
    bad = [c for c in report["checks"] if c["n_violations"] > 0]
    assert any(c["inequality_name"] == "smoothness" for c in bad)
    # every violated check carries the worst margin plus the sampled point
    assert all("margin" in c["witness"] and len(c["witness"]) >= 2 for c in bad)


def test_certify_malformed_config_exits_one(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text("{this is not json")
    rc = main(["certify", "--config", str(path), "--out", str(tmp_path / "o")])
    assert rc == 1
    assert "JSON" in capsys.readouterr().err


# ------------------------------------------------------------- config schema


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    with open(path, "w") as fh:
        json.dump({**BASE, "loss": {**BASE["loss"], "oops": 1}}, fh)
    with pytest.raises(ConfigError, match="oops"):
        load_config(path)


def test_unknown_block_rejected(tmp_path):
    path = tmp_path / "c.json"
    with open(path, "w") as fh:
        json.dump({**BASE, "mystery": {}}, fh)
    with pytest.raises(ConfigError, match="mystery"):
        load_config(path)


def test_missing_required_key_rejected(tmp_path):
    path = tmp_path / "c.json"
    broken = {block: dict(v) for block, v in BASE.items()}
    del broken["sgld"]["eta"]
    with open(path, "w") as fh:
        json.dump(broken, fh)
    with pytest.raises(ConfigError, match="sgld.eta"):
        load_config(path)


def test_defaults_echoed(tmp_path):
    cfg = load_config(write_config(tmp_path / "c.json"))
    assert cfg["data"]["test_pool_factor"] == 10
    assert cfg["estimators"]["p_list"] == [2, 4]
    assert cfg["fp"]["n_cells"] == 256
    assert cfg["output"]["formats"] == ["csv", "json"]


def test_usage_errors_exit_one(tmp_path):
    assert main(["frobnicate"]) == 1
    assert main(["run"]) == 1  # --config and --out are required
    assert main([]) == 1


def test_bad_seed_rejected_cleanly(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    rc = main(["run", "--config", str(cfg), "--seed", "-3",
               "--out", str(tmp_path / "out")])
    assert rc == 1
    assert "config error" in capsys.readouterr().err


def test_threads_resolution(monkeypatch):
    monkeypatch.delenv("SGLDLAB_THREADS", raising=False)
    assert resolve_threads(None) == 1
    assert resolve_threads(4) == 4
    monkeypatch.setenv("SGLDLAB_THREADS", "3")
    assert resolve_threads(None) == 3
    assert resolve_threads(4) == 4  # flag beats environment
    monkeypatch.setenv("SGLDLAB_THREADS", "zebra")
    with pytest.raises(ConfigError):
        resolve_threads(None)
    with pytest.raises(ConfigError):
        resolve_threads(0)


# ----------------------------------------------------------------------- run

RUN_CSVS = ("chain_000.csv", "moments.csv", "variance.csv", "stability.csv",
            "gap.csv", "logmgf.csv")


def test_run_byte_identical_reruns(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    for name in RUN_CSVS:
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        assert a == b, f"{name} differs between identical runs"


def test_run_seed_flag_overrides_config(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "a"),
                 "--seed", "123"]) == 0
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "b")]) == 0
    assert ((tmp_path / "a" / "chain_000.csv").read_bytes()
            != (tmp_path / "b" / "chain_000.csv").read_bytes())
    assert json.load(open(tmp_path / "a" / "manifest.json"))["seed"] == 123


def test_run_T_zero_single_row(tmp_path):
    cfg = write_config(tmp_path / "c.json", sgld={"T": 0})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    _, rows = read_csv_rows(tmp_path / "out" / "chain_000.csv")
    assert len(rows) == 1
    _, moments = read_csv_rows(tmp_path / "out" / "moments.csv")
    assert len(moments) == 1 and moments[0][0] == "0"


def test_run_first_chain_invariant_to_ensemble_width(tmp_path):
    cfg1 = write_config(tmp_path / "c1.json", estimators={"n_chains": 1})
    cfg8 = write_config(tmp_path / "c8.json", estimators={"n_chains": 8})
    assert main(["run", "--config", cfg1, "--out", str(tmp_path / "a")]) == 0
    assert main(["run", "--config", cfg8, "--out", str(tmp_path / "b")]) == 0
    assert ((tmp_path / "a" / "chain_000.csv").read_bytes()
            == (tmp_path / "b" / "chain_000.csv").read_bytes())


def test_run_strict_failures_refused_then_allowed(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json",
                       sgld={"eta": 0.9, "beta": 0.5, "T": 20})
    rc = main(["run", "--config", cfg, "--out", str(tmp_path / "refused")])
    assert rc == 2
    assert "allow-unsafe" in capsys.readouterr().err
    assert not (tmp_path / "refused" / "manifest.json").exists()

    rc = main(["run", "--config", cfg, "--out", str(tmp_path / "forced"),
               "--allow-unsafe"])
    assert rc == 0
    manifest = json.load(open(tmp_path / "forced" / "manifest.json"))
    failures = manifest["preconditions"]["strict_mode_failures"]
    assert len(failures) >= 2 and any("beta" in f for f in failures)


def test_run_refuses_uncertified_claims(tmp_path):
    cfg = write_config(tmp_path / "c.json",
                       loss={"claimed": {"M": 0.5, "R": None}},
                       sgld={"T": 20})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "r")]) == 2
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "f"),
                 "--allow-unsafe"]) == 0
    manifest = json.load(open(tmp_path / "f" / "manifest.json"))
    assert manifest["preconditions"]["certified"] is False


def test_run_manifest_lists_every_output_file(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "out")]) == 0
    manifest = json.load(open(tmp_path / "out" / "manifest.json"))
    assert manifest["status"] == "complete"
    assert manifest["wall_clock_seconds"] >= 0
    assert manifest["artifact_version"]
    assert len(manifest["config_hash"]) == 16
    on_disk = set(os.listdir(tmp_path / "out")) - {"manifest.json"}
    assert set(manifest["files"]) == on_disk
    # the full defaulted config is echoed back
    assert manifest["config"]["data"]["test_pool_factor"] == 10
    assert manifest["config"]["sgld"]["eta"] == 0.05


def test_lock_file_refusal(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", loss={"certify_samples": 500})
    locked = tmp_path / "out"
    locked.mkdir()
    (locked / ".lock").touch()
    rc = main(["certify", "--config", cfg, "--out", str(locked)])
    assert rc == 1
    assert "locked" in capsys.readouterr().err
    (locked / ".lock").unlink()
    assert main(["certify", "--config", cfg, "--out", str(locked)]) == 0
    assert not (locked / ".lock").exists()


# -------------------------------------------------------------------- bounds


@pytest.fixture(scope="module")
def run_and_bounds(tmp_path_factory):
    base = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(base / "c.json",
                       bounds={"T_grid": [0, 10, 40, 60]})
    assert main(["run", "--config", cfg, "--out", str(base / "run")]) == 0
    assert main(["bounds", "--config", cfg, "--out", str(base / "bounds"),
                 "--traces", str(base / "run")]) == 0
    return base


def bounds_rows(base):
    _, rows = read_csv_rows(base / "bounds" / "bounds.csv")
    return rows


def test_bounds_one_row_per_bound_per_point(run_and_bounds):
    rows = bounds_rows(run_and_bounds)
    assert len(rows) == 7 * 4  # all bounds at each T grid point, one n
    keys = [(r[0], r[2], r[3]) for r in rows]
    assert len(set(keys)) == len(keys)


def test_bounds_T_zero_gap_bounds_are_zero(run_and_bounds):
    rows = [r for r in bounds_rows(run_and_bounds) if r[2] == "0"]
    valued = {r[0]: r[1] for r in rows if r[1] != ""}
    assert valued.pop("excess_risk") != ""  # defined but not a gap bound
    assert valued and all(float(v) == 0.0 for v in valued.values())


def test_bounds_time_independent_constant_once_saturated(run_and_bounds):
    # horizon 4 beta c_LS = 2 at beta=4, R=1; eta T >= 2 from T=40 on
    vals = {r[2]: float(r[1]) for r in bounds_rows(run_and_bounds)
            if r[0] == "time_independent"}
    assert vals["40"] == vals["60"] > vals["10"] > 0.0


def test_bounds_pensia_strictly_increasing(run_and_bounds):
    vals = {r[2]: float(r[1]) for r in bounds_rows(run_and_bounds)
            if r[0] == "pensia"}
    assert 0.0 == vals["0"] < vals["10"] < vals["40"] < vals["60"]


def test_bounds_xu_unavailable_without_full_batch(run_and_bounds):
    rows = [r for r in bounds_rows(run_and_bounds) if r[0] == "xu_raginsky"]
    assert all(r[1] == "" and "full-batch" in r[6] for r in rows)


def test_bounds_missing_sigma_g_marks_unavailable(tmp_path):
    cfg = write_config(tmp_path / "c.json",
                       sgld={"T": 20}, bounds={"sigma_g_sq": None},
                       estimators={"n_chains": 2, "n_trials": 2,
                                   "n_resamples": 10, "n_pairs": 2})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    assert main(["bounds", "--config", cfg, "--out", str(tmp_path / "b"),
                 "--traces", str(tmp_path / "run")]) == 0
    _, rows = read_csv_rows(tmp_path / "b" / "bounds.csv")
    needs = {"xu_raginsky", "pensia", "time_independent", "strongly_convex"}
    flagged = [r for r in rows if r[0] in needs]
    assert flagged
    assert all(r[1] == "" and "sigma_g_sq-unavailable" in r[6] for r in flagged)
    independent = [r for r in rows if r[0] in ("farghly_shape", "subexp_gen")]
    assert all(r[1] != "" for r in independent)


def test_bounds_missing_traces_exit_one(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json")
    assert main(["bounds", "--config", cfg, "--out", str(tmp_path / "b")]) == 1
    assert main(["bounds", "--config", cfg, "--out", str(tmp_path / "b2"),
                 "--traces", str(tmp_path / "nowhere")]) == 1


def test_bounds_json_mirror_and_gap_copy(run_and_bounds):
    base = run_and_bounds
    mirror = json.load(open(base / "bounds" / "bounds.json"))
    assert len(mirror) == 7 * 4
    assert all(set(e) >= {"name", "value", "inputs", "notes"} for e in mirror)
    assert ((base / "bounds" / "gap.csv").read_bytes()
            == (base / "run" / "gap.csv").read_bytes())


# -------------------------------------------------------------------- verify


def test_verify_defaults_exit_zero(tmp_path):
    cfg = write_config(tmp_path / "c.json", fp={"n_cells": 64, "T_end": 0.1})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "v")]) == 0
    report = json.load(open(tmp_path / "v" / "verify_report.json"))
    assert report["hard_failures"] == []
    assert report["oracle"]["recursion_violations"] == 0
    assert report["oracle"]["identical_pair_mi"] == 0.0
    assert report["fp_fine"]["violation_rate"] <= report["fp_coarse"]["violation_rate"]


def test_verify_falsification_control_exits_two(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", verify={"falsify": True},
                       fp={"n_cells": 64, "T_end": 0.1})
    assert main(["verify", "--config", cfg, "--out", str(tmp_path / "v")]) == 2
    assert "VIOLATION" in capsys.readouterr().out
    report = json.load(open(tmp_path / "v" / "verify_report.json"))
    assert report["oracle"]["recursion_violations"] > 0


# ------------------------------------------------------------------- compare


def test_compare_single_report_passthrough(run_and_bounds, tmp_path):
    base = run_and_bounds
    assert main(["compare", str(base / "bounds"),
                 "--out", str(tmp_path / "cmp")]) == 0
    header, rows = read_csv_rows(tmp_path / "cmp" / "compare.csv")
    assert header == ["bound_name", "T", "n", "bounds"]
    bound_rows = [r for r in rows if r[0] != "empirical_gap"]
    assert len(bound_rows) == 7 * 4
    assert any(r[0] == "empirical_gap" for r in rows)
    assert (tmp_path / "cmp" / "compare.txt").exists()


def test_compare_gap_below_valid_bounds(run_and_bounds, tmp_path):
    base = run_and_bounds
    assert main(["compare", str(base / "bounds"),
                 "--out", str(tmp_path / "cmp")]) == 0
    _, rows = read_csv_rows(tmp_path / "cmp" / "compare.csv")
    gap = next(float(r[3]) for r in rows if r[0] == "empirical_gap")
    at_T = [r for r in rows if r[1] == "60" and r[0] != "excess_risk"
            and r[3] != ""]
    assert at_T and all(gap <= float(r[3]) for r in at_T)


def test_compare_two_reports_wide(run_and_bounds, tmp_path):
    base = run_and_bounds
    cfg = write_config(tmp_path / "c.json", sgld={"seed": 991},
                       bounds={"T_grid": [0, 10, 40, 60]})
    assert main(["run", "--config", cfg, "--out", str(tmp_path / "run")]) == 0
    assert main(["bounds", "--config", cfg, "--out", str(tmp_path / "other"),
                 "--traces", str(tmp_path / "run")]) == 0
    assert main(["compare", str(base / "bounds"), str(tmp_path / "other"),
                 "--out", str(tmp_path / "cmp")]) == 0
    header, rows = read_csv_rows(tmp_path / "cmp" / "compare.csv")
    assert header == ["bound_name", "T", "n", "bounds", "other"]
    ti = [r for r in rows if r[0] == "time_independent" and r[1] == "60"]
    assert len(ti) == 1 and ti[0][3] != "" and ti[0][4] != ""
    # constants-only bound agrees across seeds; trace-driven ones need not
    assert float(ti[0][3]) == float(ti[0][4])


def test_compare_schema_mismatch_exits_one(run_and_bounds, tmp_path, capsys):
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "bounds.csv").write_text("who,what\nx,y\n")
    rc = main(["compare", str(broken), "--out", str(tmp_path / "cmp")])
    assert rc == 1
    assert "unexpected columns" in capsys.readouterr().err
