"""Command-line entry point wiring configs to the library modules.

Subcommands: certify | run | bounds | verify | compare. A single JSON
config drives everything; the schema is strict (unknown keys rejected,
defaults echoed back), every invocation writes a manifest with the config
hash, seed, precondition results and the produced files, and an output
directory is protected by a lock file against concurrent runs.

Exit codes: 0 success, 1 usage or config error, 2 assertion or violation.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import hashlib
import json
import math
import os
import shutil
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import __version__
from .bounds import (
    BOUND_NAMES,
    BoundEntry,
    bound_farghly_shape,
    bound_pensia,
    bound_strongly_convex,
    bound_subexp_gen,
    bound_time_independent,
    bound_xu_raginsky,
    excess_risk_bound,
)
from .constants import derive_constants, ParametrixOverrides, subexp_params
from .estimators import (
    empirical_gen_gap,
    grad_stability_trace,
    grad_variance_trace,
    logmgf_check,
    pth_moment_check,
    write_estimates_csv,
)
from .fokker_planck import (
    Grid1D,
    evolve_pair,
    gibbs_density,
    suggested_halfwidth,
    verify_inequality_12,
)
from .losses import certify, make_logistic_ridge, make_nonconvex_ridge, make_quadratic
from .oracle import oracle_mi_upper, oracle_trace, verify_kl_recursion
from .sgld import SGLDConfig, run_ensemble, strict_mode_failures

THREADS_ENV = "SGLDLAB_THREADS"


class ConfigError(Exception):
    pass


# ------------------------------------------------------------- config schema

_REQ = object()

# per block: key -> (default or required marker, expected type)
_SCHEMAS = {
    "loss": {
        "family": (_REQ, str),
        "d": (_REQ, int),
        "data_radius": (1.0, float),
        "R": (None, float),
        "lam": (None, float),
        "a": (None, float),
        "claimed": (None, dict),
        "certify_samples": (10_000, int),
    },
    "sgld": {
        "eta": (_REQ, float),
        "beta": (_REQ, float),
        "k": (_REQ, int),
        "T": (_REQ, int),
        "s_sq": (1.0, float),
        "seed": (0, int),
        "strict_mode": (False, bool),
    },
    "data": {
        "n": (_REQ, int),
        "test_pool_factor": (10, int),
        "radius": (None, float),
    },
    "bounds": {
        "which": (list(BOUND_NAMES), list),
        "sigma_g_sq": (None, float),
        "farghly_C1": (1.0, float),
        "farghly_C2": (1.0, float),
        "lsi_mode": ("strongly_convex", str),
        "universal_C_lsi": (1.0, float),
        "universal_C_moment": (1.0, float),
        "T_grid": (None, list),
        "n_grid": (None, list),
        "parametrix": (None, dict),
    },
    "estimators": {
        "n_trials": (10, int),
        "n_chains": (32, int),
        "n_resamples": (300, int),
        "n_pairs": (50, int),
        "mi_pairs": (200, int),
        "p_list": ([2, 4], list),
        "lambda_grid": ([-0.5, -0.1, 0.1, 0.5], list),
        "eval_loss": ("surrogate", str),
    },
    "fp": {
        "n_cells": (256, int),
        "halfwidth": (None, float),
        "dt_safety": (0.45, float),
        "T_end": (0.3, float),
        "center_gap": (0.4, float),
    },
    "verify": {
        "falsify": (False, bool),
        "oracle_T": (2000, int),
    },
    "output": {
        "directory": (None, str),
        "formats": (["csv", "json"], list),
    },
}
_REQUIRED_BLOCKS = ("loss", "sgld", "data")


def _coerce(block: str, key: str, value, expected):
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{block}.{key}: expected a number, got {value!r}")
        return float(value)
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{block}.{key}: expected an integer, got {value!r}")
        return value
    if not isinstance(value, expected):
        raise ConfigError(
            f"{block}.{key}: expected {expected.__name__}, got {value!r}"
        )
    return value


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated, fully-defaulted experiment description."""

    blocks: dict

    def __getitem__(self, name: str) -> dict:
        return self.blocks[name]

    def canonical_json(self) -> str:
        return json.dumps(self.blocks, sort_keys=True, indent=2)

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    def model(self):
        loss = self.blocks["loss"]
        family = loss["family"]
        if family == "quadratic":
            if loss["R"] is None:
                raise ConfigError("loss.R is required for the quadratic family")
            model = make_quadratic(R=loss["R"], data_radius=loss["data_radius"],
                                   d=loss["d"])
        elif family == "logistic_ridge":
            if loss["lam"] is None:
                raise ConfigError("loss.lam is required for logistic_ridge")
            model = make_logistic_ridge(lam=loss["lam"],
                                        data_radius=loss["data_radius"],
                                        d=loss["d"])
        elif family == "nonconvex_ridge":
            if loss["lam"] is None or loss["a"] is None:
                raise ConfigError("loss.lam and loss.a are required for "
                                  "nonconvex_ridge")
            model = make_nonconvex_ridge(lam=loss["lam"], a=loss["a"],
                                         data_radius=loss["data_radius"],
                                         d=loss["d"])
        else:
            raise ConfigError(f"unknown loss family {family!r}")
        if loss["claimed"] is not None:
            # deliberately wrong claims, for exercising the certifier
            try:
                model = model.with_constants(**loss["claimed"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"loss.claimed: {exc}") from exc
        return model

    def sgld_config(self, seed: int | None = None) -> SGLDConfig:
        s = self.blocks["sgld"]
        try:
            return SGLDConfig(
                eta=s["eta"], beta=s["beta"], k=s["k"],
                n=self.blocks["data"]["n"], T=s["T"],
                d=self.blocks["loss"]["d"], s_sq=s["s_sq"],
                seed=s["seed"] if seed is None else seed, strict_mode=False,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"sgld: {exc}") from exc

    def derived(self):
        b = self.blocks["bounds"]
        s = self.blocks["sgld"]
        over = None
        if b["parametrix"] is not None:
            try:
                over = ParametrixOverrides(**b["parametrix"])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"bounds.parametrix: {exc}") from exc
        try:
            return derive_constants(
                self.model().constants(), eta=s["eta"], beta=s["beta"],
                k=s["k"], n=self.blocks["data"]["n"],
                d=self.blocks["loss"]["d"], s_sq=s["s_sq"],
                lsi_mode=b["lsi_mode"], overrides=over,
                universal_C_lsi=b["universal_C_lsi"],
                universal_C_moment=b["universal_C_moment"],
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bounds: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - set(_SCHEMAS)
    if unknown:
        raise ConfigError(f"unknown config blocks: {sorted(unknown)}")
    for block in _REQUIRED_BLOCKS:
        if block not in raw:
            raise ConfigError(f"missing required config block {block!r}")
    blocks = {}
    for block, schema in _SCHEMAS.items():
        given = raw.get(block, {})
        if not isinstance(given, dict):
            raise ConfigError(f"block {block!r} must be an object")
        unknown = set(given) - set(schema)
        if unknown:
            raise ConfigError(f"unknown keys in {block!r}: {sorted(unknown)}")
        out = {}
        for key, (default, expected) in schema.items():
            if key in given:
                out[key] = (
                    None if given[key] is None and default is None
                    else _coerce(block, key, given[key], expected)
                )
            elif default is _REQ:
                raise ConfigError(f"missing required key {block}.{key}")
            else:
                out[key] = default
        blocks[block] = out
    radius = blocks["data"]["radius"]
    if radius is not None and radius != blocks["loss"]["data_radius"]:
        raise ConfigError(
            "data.radius conflicts with loss.data_radius; set only one"
        )
    cfg = ExperimentConfig(blocks=blocks)
    cfg.model()  # family-specific parameter validation
    return cfg


# ---------------------------------------------------------------- run support


class _OutputDir:
    """Locked output directory that tracks the files written into it."""

    def __init__(self, path):
        self.path = path
        self.lock_path = os.path.join(path, ".lock")
        self.files = []

    def __enter__(self):
        os.makedirs(self.path, exist_ok=True)
        try:
            fd = os.open(self.lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise ConfigError(
                f"output directory {self.path} is locked by another invocation "
                f"(remove {self.lock_path} if that run is dead)"
            )
        os.close(fd)
        return self

    def __exit__(self, *exc):
        try:
            os.unlink(self.lock_path)
        except FileNotFoundError:
            pass
        return False

    def file(self, name: str) -> str:
        full = os.path.join(self.path, name)
        if name not in self.files:
            self.files.append(name)
        return full

    def write_json(self, name: str, payload) -> None:
        with open(self.file(name), "w") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")


def _manifest_start(out: _OutputDir, cfg: ExperimentConfig, seed: int,
                    preconditions) -> dict:
    manifest = {
        "status": "running",
        "config": cfg.blocks,
        "config_hash": cfg.config_hash(),
        "seed": seed,
        "artifact_version": __version__,
        "preconditions": preconditions,
        "files": [],
        "wall_clock_seconds": None,
    }
    with open(os.path.join(out.path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _manifest_finish(out: _OutputDir, manifest: dict, t0: float) -> None:
    manifest["status"] = "complete"
    manifest["files"] = sorted(out.files)
    manifest["wall_clock_seconds"] = round(time.monotonic() - t0, 3)
    with open(os.path.join(out.path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_threads(flag_value: int | None) -> int:
    """--threads when given, else the environment default, else 1."""
    if flag_value is not None:
        value = flag_value
    else:
        raw = os.environ.get(THREADS_ENV)
        if raw is None:
            return 1
        try:
            value = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}={raw!r} is not an integer")
    if value < 1:
        raise ConfigError(f"thread count must be >= 1, got {value}")
    return value


def _seed_of(args, cfg: ExperimentConfig) -> int:
    return args.seed if args.seed is not None else cfg["sgld"]["seed"]


# ---------------------------------------------------------------- subcommands


def cmd_certify(args) -> int:
    cfg = load_config(args.config)
    model = cfg.model()
    seed = _seed_of(args, cfg)
    report = certify(model, n_samples=cfg["loss"]["certify_samples"],
                     rng_seed=seed)
    with _OutputDir(args.out) as out:
        t0 = time.monotonic()
        manifest = _manifest_start(out, cfg, seed, {"threads":
                                                    resolve_threads(args.threads)})
        out.write_json("certify_report.json", json.loads(report.to_json()))
        _manifest_finish(out, manifest, t0)
    for check in report.checks:
        state = "ok" if check.n_violations == 0 else "VIOLATED"
        print(f"certify {check.inequality_name}: {state} "
              f"({check.n_violations}/{check.n_samples})")
    print(f"certify {model.__class__.__name__}: "
          f"{'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 2


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    model = cfg.model()
    seed = _seed_of(args, cfg)
    sgld_cfg = cfg.sgld_config(seed=seed)
    est = cfg["estimators"]

    quick = certify(model, n_samples=2000, rng_seed=seed)
    strict_fails = strict_mode_failures(sgld_cfg, model)
    preconditions = {
        "certified": quick.passed,
        "strict_mode_failures": strict_fails,
        "threads": resolve_threads(args.threads),
    }
    if not quick.passed and not args.allow_unsafe:
        print("run refused: loss certification failed (use --allow-unsafe to "
              "override)", file=sys.stderr)
        return 2
    if strict_fails and not args.allow_unsafe:
        print("run refused: parameter ranges outside the certified regime "
              "(use --allow-unsafe to override):", file=sys.stderr)
        for failure in strict_fails:
            print(f"  - {failure}", file=sys.stderr)
        return 2

    with _OutputDir(args.out) as out:
        t0 = time.monotonic()
        manifest = _manifest_start(out, cfg, seed, preconditions)

        root = np.random.SeedSequence([seed, 0xDA7A])
        dataset = np.asarray(
            model.sample_data(np.random.default_rng(root), cfg["data"]["n"]),
            dtype=float,
        )
        np.save(out.file("dataset.npy"), dataset)

        traces = run_ensemble(sgld_cfg, model,
                              dataset_sampler=lambda rng, m: dataset,
                              n_chains=est["n_chains"])
        traces[0].to_csv(out.file("chain_000.csv"))
        np.save(out.file("final_states.npy"),
                np.stack([tr.final_state for tr in traces]))

        norms = np.stack([tr.w_norm_sq for tr in traces])
        with open(out.file("moments.csv"), "w") as fh:
            fh.write("t,mean_w_norm_sq\n")
            means = norms.mean(axis=0)
            for t in range(means.shape[0]):
                fh.write(f"{t},{repr(float(means[t]))}\n")

        variance = grad_variance_trace(model, dataset, traces[0],
                                       n_resamples=est["n_resamples"])
        write_estimates_csv(
            out.file("variance.csv"),
            [("grad_variance", int(step), e)
             for step, e in zip(traces[0].stored_steps, variance)],
        )
        stability = grad_stability_trace(model, None, sgld_cfg,
                                         n_pairs=est["n_pairs"])
        write_estimates_csv(
            out.file("stability.csv"),
            [("grad_stability", int(step), e)
             for step, e in zip(traces[0].stored_steps, stability)],
        )
        gap = empirical_gen_gap(model, None, sgld_cfg,
                                n_trials=est["n_trials"],
                                eval_loss=est["eval_loss"])
        write_estimates_csv(out.file("gap.csv"),
                            [(gap.estimator_name, sgld_cfg.T, gap)])

        if len(traces) >= 2:
            pars = subexp_params(model.constants(), beta=sgld_cfg.beta,
                                 d=sgld_cfg.d, s_sq=sgld_cfg.s_sq)
            zrng = np.random.default_rng(np.random.SeedSequence([seed, 0x10F]))
            Z = model.sample_data(zrng, len(traces))
            samples = model.eval_many(
                np.stack([tr.final_state for tr in traces]), Z
            )
            mgf = logmgf_check(samples, pars["sigma_e_sq"], pars["nu"],
                               est["lambda_grid"], rng_seed=seed)
            write_estimates_csv(
                out.file("logmgf.csv"),
                [("logmgf", lam, val, (hi - lo) / 2.0, mgf.n_samples)
                 for lam, val, lo, hi in zip(mgf.lambdas, mgf.logmgf,
                                             mgf.band_lo, mgf.band_hi)],
            )
        need = max(30, 5 * max(int(p) for p in est["p_list"]))
        if len(traces) >= need:
            moments = pth_moment_check(traces, est["p_list"],
                                       model.constants(), beta=sgld_cfg.beta,
                                       d=sgld_cfg.d, s_sq=sgld_cfg.s_sq)
            out.write_json("pth_moments.json", moments.to_dict())
        else:
            out.write_json("pth_moments.json", {
                "skipped": f"needs at least {need} chains for "
                           f"p up to {max(est['p_list'])}, have {len(traces)}"
            })
        _manifest_finish(out, manifest, t0)
    print(f"run complete: {len(out.files)} files in {args.out}")
    return 0


def _load_estimates_csv(path):
    rows = []
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["estimator", "t_or_lambda", "mean", "stderr", "n"]:
            raise ConfigError(f"{path}: unexpected columns {header}")
        for cells in reader:
            rows.append((cells[0], float(cells[1]), float(cells[2]),
                         float(cells[3]), int(cells[4])))
    return rows


def _unavailable(name: str, reason: str, T, n, eta, beta) -> BoundEntry:
    return BoundEntry(name=name, value=None,
                      inputs={"T": T, "n": n, "eta": eta, "beta": beta},
                      preconditions_ok=False, notes=(reason,))


def cmd_bounds(args) -> int:
    cfg = load_config(args.config)
    if args.traces is None:
        raise ConfigError("bounds requires --traces DIR from a previous run")
    model = cfg.model()
    lc = model.constants()
    seed = _seed_of(args, cfg)
    sgld_cfg = cfg.sgld_config(seed=seed)
    b = cfg["bounds"]
    dc = cfg.derived()
    sigma_g_sq = b["sigma_g_sq"]

    var_rows = _load_estimates_csv(os.path.join(args.traces, "variance.csv"))
    stab_rows = _load_estimates_csv(os.path.join(args.traces, "stability.csv"))
    var_steps = np.array([int(r[1]) for r in var_rows])
    var_vals = np.array([max(r[2], 0.0) for r in var_rows])
    stab_steps = np.array([int(r[1]) for r in stab_rows])
    stab_vals = np.array([max(r[2], 0.0) for r in stab_rows])

    T_grid = b["T_grid"]
    if T_grid is None:
        last = int(var_steps[-1])
        T_grid = sorted({0, last // 4, last // 2, last})
    n_grid = b["n_grid"] or [cfg["data"]["n"]]

    def variance_prefix(T):
        # piecewise-constant extension of the stored trace to per-update values
        full = np.repeat(
            var_vals, np.diff(np.append(var_steps, var_steps[-1] + 1))
        )
        return full[:T]

    entries = []
    eta, beta = sgld_cfg.eta, sgld_cfg.beta

    def add(entry: BoundEntry, T: int, n: int) -> None:
        # uniform (T, n, eta, beta) keys so every CSV row is addressable
        stamped = {**entry.inputs, "T": T, "n": n, "eta": eta, "beta": beta}
        entries.append(dataclasses.replace(entry, inputs=stamped))

    for T in T_grid:
        if T not in var_steps:
            raise ConfigError(f"bounds.T_grid entry {T} is not a recorded step")
        for n in n_grid:
            n = int(n)
            for name in b["which"]:
                if name in ("xu_raginsky", "pensia", "time_independent",
                            "strongly_convex") and sigma_g_sq is None:
                    entries.append(_unavailable(name, "sigma_g_sq-unavailable",
                                                T, n, eta, beta))
                    continue
                if name == "xu_raginsky":
                    if lc.R is None or sgld_cfg.k != sgld_cfg.n:
                        entries.append(_unavailable(
                            name, "exact-mi-needs-full-batch-quadratic",
                            T, n, eta, beta))
                        continue
                    mi_cfg = SGLDConfig(eta=eta, beta=beta, k=n, n=n, T=T,
                                        d=sgld_cfg.d, s_sq=sgld_cfg.s_sq,
                                        seed=seed)
                    mi = oracle_mi_upper(model.sample_data, mi_cfg, R=lc.R,
                                         n_dataset_pairs=cfg["estimators"]["mi_pairs"])
                    add(bound_xu_raginsky(sigma_g_sq, n, mi.mean), T, n)
                elif name == "pensia":
                    add(bound_pensia(variance_prefix(T), eta=eta, beta=beta,
                                     d=sgld_cfg.d, n=n, sigma_g_sq=sigma_g_sq),
                        T, n)
                elif name == "time_independent":
                    ti_cfg = SGLDConfig(eta=eta, beta=beta, k=sgld_cfg.k,
                                        n=sgld_cfg.n, T=T, d=sgld_cfg.d,
                                        s_sq=sgld_cfg.s_sq, seed=seed)
                    add(bound_time_independent(lc, dc, ti_cfg, n, sigma_g_sq),
                        T, n)
                elif name == "strongly_convex":
                    if lc.R is None:
                        entries.append(_unavailable(name, "needs-R", T, n,
                                                    eta, beta))
                        continue
                    keep = stab_steps <= T
                    trace = np.column_stack([eta * stab_steps[keep],
                                             stab_vals[keep]])
                    add(bound_strongly_convex(trace, R=lc.R, beta=beta, n=n,
                                              sigma_g_sq=sigma_g_sq, T=eta * T),
                        T, n)
                elif name == "farghly_shape":
                    if sgld_cfg.k >= sgld_cfg.n:
                        entries.append(_unavailable(name, "needs-subsampling",
                                                    T, n, eta, beta))
                        continue
                    add(bound_farghly_shape(b["farghly_C1"], b["farghly_C2"],
                                            eta=eta, T=T, n=n, k=sgld_cfg.k,
                                            m=lc.m), T, n)
                elif name == "subexp_gen":
                    ti_cfg = SGLDConfig(eta=eta, beta=beta, k=sgld_cfg.k,
                                        n=sgld_cfg.n, T=T, d=sgld_cfg.d,
                                        s_sq=sgld_cfg.s_sq, seed=seed)
                    ti = bound_time_independent(lc, dc, ti_cfg, n, 1.0)
                    if not ti.preconditions_ok:
                        entries.append(_unavailable(name,
                                                    "kl-chain-unavailable",
                                                    T, n, eta, beta))
                        continue
                    y = ti.constants_used["kl_bound"] / n
                    sub = bound_subexp_gen(y, dc.sigma_e_sq, dc.nu)
                    add(dataclasses.replace(sub, notes=sub.notes
                                            + tuple(dc.notes)), T, n)
                elif name == "excess_risk":
                    ti_cfg = SGLDConfig(eta=eta, beta=beta, k=sgld_cfg.k,
                                        n=sgld_cfg.n, T=T, d=sgld_cfg.d,
                                        s_sq=sgld_cfg.s_sq, seed=seed)
                    ti = bound_time_independent(lc, dc, ti_cfg, n, 1.0)
                    if not ti.preconditions_ok:
                        entries.append(_unavailable(name,
                                                    "kl-chain-unavailable",
                                                    T, n, eta, beta))
                        continue
                    y = ti.constants_used["kl_bound"] / n
                    gen = bound_subexp_gen(y, dc.sigma_e_sq, dc.nu).value
                    add(excess_risk_bound(lc, dc, ti_cfg, n, gen), T, n)
                else:
                    raise ConfigError(f"unknown bound name {name!r}")

    with _OutputDir(args.out) as out:
        t0 = time.monotonic()
        manifest = _manifest_start(out, cfg, seed, {"traces": args.traces})
        with open(out.file("bounds.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "value", "T", "n", "eta", "beta", "flags"])
            for e in entries:
                writer.writerow([
                    e.name,
                    "" if e.value is None else repr(float(e.value)),
                    e.inputs.get("T", ""), e.inputs.get("n", ""),
                    e.inputs.get("eta", ""), e.inputs.get("beta", ""),
                    "|".join(e.notes),
                ])
        out.write_json("bounds.json", [e.to_dict() for e in entries])
        gap_src = os.path.join(args.traces, "gap.csv")
        if os.path.exists(gap_src):
            # carried along so a report directory is self-contained for compare
            shutil.copyfile(gap_src, out.file("gap.csv"))
        _manifest_finish(out, manifest, t0)
    print(f"bounds: {len(entries)} entries over T={T_grid} n={n_grid}")
    return 0


def cmd_verify(args) -> int:
    cfg = load_config(args.config)
    model = cfg.model()
    lc = model.constants()
    seed = _seed_of(args, cfg)
    falsify = cfg["verify"]["falsify"]
    hard_failures = []
    sections = {}

    with _OutputDir(args.out) as out:
        t0 = time.monotonic()
        manifest = _manifest_start(out, cfg, seed, {"falsify": falsify})

        if lc.R is not None:
            sgld_cfg = cfg.sgld_config(seed=seed)
            o_cfg = SGLDConfig(eta=sgld_cfg.eta, beta=sgld_cfg.beta,
                               k=sgld_cfg.n, n=sgld_cfg.n,
                               T=cfg["verify"]["oracle_T"], d=sgld_cfg.d,
                               s_sq=sgld_cfg.s_sq, seed=seed)
            pair_rng = np.random.SeedSequence([seed, 0x09AC])
            s_seq, alt_seq = pair_rng.spawn(2)
            S = model.sample_data(np.random.default_rng(s_seq), o_cfg.n)
            S_alt = model.sample_data(np.random.default_rng(alt_seq), o_cfg.n)
            trace = oracle_trace(S, S_alt, o_cfg, R=lc.R)
            trace.to_csv(out.file("oracle_trace.csv"))
            gap_sq = float(np.sum((S.mean(axis=0) - S_alt.mean(axis=0)) ** 2))
            if falsify:
                contraction, add = 1.0, 0.0
            else:
                contraction = math.exp(-o_cfg.eta * lc.R / 4.0)
                add = o_cfg.eta * (o_cfg.beta / 2.0) * lc.R**2 * gap_sq
            rec = verify_kl_recursion(trace.kl, contraction, add)
            mi_zero = oracle_mi_upper(model.sample_data, o_cfg, R=lc.R,
                                      n_dataset_pairs=8, control_identical=True)
            sections["oracle"] = {
                "recursion_violations": rec.n_violations,
                "recursion_worst_slack": rec.worst_slack,
                "identical_pair_mi": mi_zero.mean,
                "contraction": contraction,
                "per_step_add": add,
            }
            if rec.n_violations > 0:
                hard_failures.append(
                    f"kl recursion violated at {rec.n_violations} steps")
            if mi_zero.mean != 0.0:
                hard_failures.append("identical-pair MI control is nonzero")
        else:
            sections["oracle"] = {"skipped": "loss family has no curvature "
                                             "constant; exact law unavailable"}

        fp = cfg["fp"]
        beta = cfg["sgld"]["beta"]
        R_fp = lc.R if lc.R is not None else lc.m
        hw = fp["halfwidth"] or suggested_halfwidth(beta, lc.m)
        rates = {}
        for label, n_cells in (("coarse", fp["n_cells"]),
                               ("fine", 2 * fp["n_cells"])):
            grid = Grid1D(-hw, hw, n_cells)
            w = grid.centers
            cs, ca = fp["center_gap"] / 2.0, -fp["center_gap"] / 2.0
            gs, ga = R_fp * (w - cs), R_fp * (w - ca)
            dt = fp["dt_safety"] * grid.h**2 / (
                2.0 / beta + grid.h * float(np.abs(gs).max()))
            start = gibbs_density(grid, (w - 1.0) ** 2, 1.0)
            run = evolve_pair(grid, gs, ga, beta, dt,
                              max(2, int(fp["T_end"] / dt)), start, start,
                              potential_id="shifted-quadratics",
                              dataset_id=f"verify-{label}")
            run.to_csv(out.file(f"fp_{label}.csv"))
            rep = verify_inequality_12(run, beta)
            rates[label] = rep.violation_rate
            sections[f"fp_{label}"] = {
                "n_cells": n_cells,
                "violation_rate": rep.violation_rate,
                "n_checked": rep.n_checked,
                "clamped_mass": run.clamped_mass,
            }
        if rates["coarse"] > 0.01:
            hard_failures.append(
                f"fp violation rate {rates['coarse']} above 1%")
        if rates["fine"] > rates["coarse"]:
            hard_failures.append("fp violation rate grew under refinement")

        sections["hard_failures"] = hard_failures
        out.write_json("verify_report.json", sections)
        _manifest_finish(out, manifest, t0)

    for name, body in sections.items():
        if name != "hard_failures":
            print(f"verify {name}: {json.dumps(body, sort_keys=True)}")
    if hard_failures:
        for failure in hard_failures:
            print(f"VIOLATION: {failure}")
        return 2
    print("verify: all checks passed")
    return 0


def _read_bounds_csv(path):
    rows = {}
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["name", "value", "T", "n", "eta", "beta", "flags"]:
            raise ConfigError(f"{path}: unexpected columns {header}")
        for cells in reader:
            rows[(cells[0], cells[2], cells[3])] = cells[1]
    return rows


def cmd_compare(args) -> int:
    tables = []
    for directory in args.reports:
        bounds_path = os.path.join(directory, "bounds.csv")
        gap_path = os.path.join(directory, "gap.csv")
        table = _read_bounds_csv(bounds_path)
        if os.path.exists(gap_path):
            for est_name, t, mean, _, _ in _load_estimates_csv(gap_path):
                key = ("empirical_gap", str(int(t)), "")
                table[key] = repr(mean)
        tables.append((os.path.basename(os.path.normpath(directory)), table))

    keys = sorted({k for _, table in tables for k in table},
                  key=lambda k: (k[0], float(k[1] or -1), k[2]))
    with _OutputDir(args.out) as out:
        t0 = time.monotonic()
        manifest = {"status": "running", "inputs": args.reports, "files": []}
        with open(os.path.join(out.path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        labels = [label for label, _ in tables]
        with open(out.file("compare.csv"), "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bound_name", "T", "n", *labels])
            for key in keys:
                writer.writerow([key[0], key[1], key[2],
                                 *(table.get(key, "") for _, table in tables)])
        with open(out.file("compare.txt"), "w") as fh:
            widths = [max(12, len(label) + 2) for label in labels]
            fh.write(f"{'bound':24s}{'T':>8s}{'n':>8s}"
                     + "".join(f"{label:>{w}s}" for label, w in zip(labels, widths))
                     + "\n")
            for key in keys:
                row = f"{key[0]:24s}{key[1]:>8s}{key[2]:>8s}"
                for (_, table), w in zip(tables, widths):
                    cell = table.get(key, "")
                    if cell:
                        cell = f"{float(cell):.6g}"
                    row += f"{cell:>{w}s}"
                fh.write(row + "\n")
        manifest["status"] = "complete"
        manifest["files"] = sorted(out.files)
        manifest["wall_clock_seconds"] = round(time.monotonic() - t0, 3)
        with open(os.path.join(out.path, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"compare: {len(keys)} rows over {len(tables)} reports")
    return 0


# ----------------------------------------------------------------- dispatcher


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sgldlab",
                     description="Certified losses, Langevin chains, "
                                 "generalization bounds, and their checkers.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed (u64)")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--allow-unsafe", action="store_true",
                       help="run despite certification or range failures")
        p.add_argument("--threads", type=int, default=None,
                       help=f"worker threads (default ${THREADS_ENV} or 1)")

    p = sub.add_parser("certify", help="check the claimed loss constants")
    common(p)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("run", help="run chains and estimators")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bounds", help="evaluate bound formulas over traces")
    common(p)
    p.add_argument("--traces", default=None,
                   help="directory produced by the run subcommand")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("verify", help="oracle and grid-solver verification")
    common(p)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("compare", help="merge bound reports into one table")
    p.add_argument("reports", nargs="+", help="bound report directories")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
