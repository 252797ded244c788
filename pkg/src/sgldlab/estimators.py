"""Monte Carlo estimators for the quantities the bounds talk about.

Covers the train-test gap of the final iterate, the conditional variance
of the minibatch gradient, gradient stability across resampled datasets,
p-th moments of the iterate norm, and the log moment generating function
of the loss. Every estimator is seeded, reports a standard error where one
is defined, and emits CSV rows {estimator, t_or_lambda, mean, stderr, n}.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .constants import sg_variance_bound
from .losses import LossModel
from .sgld import SGLDConfig, _fy_subset_rows, _run_chains_lockstep, dataset_fingerprint

__all__ = [
    "EstimateWithError",
    "empirical_gen_gap",
    "grad_variance_trace",
    "grad_stability_trace",
    "PthMomentReport",
    "pth_moment_check",
    "LogMgfReport",
    "logmgf_check",
    "write_estimates_csv",
]

TEST_POOL_FACTOR = 10    # test pool size = factor * n per trial
BOOTSTRAP_RESAMPLES = 200


@dataclass(frozen=True)
class EstimateWithError:
    """A Monte Carlo estimate with its standard error.

    stderr is the sample standard deviation divided by sqrt(n_samples);
    zero when the estimate is exact.
    """

    mean: float
    stderr: float
    n_samples: int
    estimator_name: str

    def __post_init__(self) -> None:
        if not math.isfinite(self.mean):
            raise ValueError(f"estimate must be finite, got {self.mean}")
        if not (self.stderr >= 0 and math.isfinite(self.stderr)):
            raise ValueError(f"stderr must be nonnegative and finite, got {self.stderr}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _estimate(samples: np.ndarray, name: str) -> EstimateWithError:
    samples = np.asarray(samples, dtype=float)
    n = samples.size
    sd = float(samples.std(ddof=1)) if n > 1 else 0.0
    return EstimateWithError(
        mean=float(samples.mean()),
        stderr=sd / math.sqrt(n),
        n_samples=n,
        estimator_name=name,
    )


def _surrogate(values: np.ndarray) -> np.ndarray:
    # bounded evaluation loss g = f / (1 + f), mapping [0, inf) into [0, 1)
    return values / (1.0 + values)


def _eval_losses(model: LossModel, w: np.ndarray, Z: np.ndarray) -> np.ndarray:
    W = np.broadcast_to(w, (Z.shape[0], w.shape[0]))
    return model.eval_many(W, Z)


# ------------------------------------------------------------------ gen gap


def empirical_gen_gap(
    model: LossModel,
    mu_sampler,
    config: SGLDConfig,
    n_trials: int,
    eval_loss: str = "same_as_f",
) -> EstimateWithError:
    """Mean train-test gap of the final iterate over independent trials.

    Each trial draws a fresh dataset S, runs one chain on it, and compares
    the mean loss of W_T on a fresh test pool of 10 n points against the
    mean loss on S. `eval_loss` selects the raw training loss
    ("same_as_f") or the bounded surrogate f/(1+f) ("surrogate").
    """
    if n_trials < 2:
        raise ValueError(f"need at least 2 trials for a standard error, got {n_trials}")
    if eval_loss not in ("same_as_f", "surrogate"):
        raise ValueError(f"unknown eval_loss {eval_loss!r}")
    if mu_sampler is None:
        mu_sampler = model.sample_data

    root = np.random.SeedSequence(config.seed)
    trial_seqs = root.spawn(n_trials)
    datasets, chain_seqs, ids, pool_seqs = [], [], [], []
    for seq in trial_seqs:
        ds_seq, chain_seq, pool_seq = seq.spawn(3)
        ds = np.asarray(mu_sampler(np.random.default_rng(ds_seq), config.n), dtype=float)
        datasets.append(ds)
        ids.append(dataset_fingerprint(ds))
        chain_seqs.append(chain_seq)
        pool_seqs.append(pool_seq)

    traces = _run_chains_lockstep(config, model, np.stack(datasets), chain_seqs, ids)

    n_pool = TEST_POOL_FACTOR * config.n
    gaps = np.empty(n_trials)
    for i, tr in enumerate(traces):
        pool = np.asarray(
            mu_sampler(np.random.default_rng(pool_seqs[i]), n_pool), dtype=float
        )
        w = tr.final_state
        test_vals = _eval_losses(model, w, pool)
        train_vals = _eval_losses(model, w, datasets[i])
        if eval_loss == "surrogate":
            test_vals = _surrogate(test_vals)
            train_vals = _surrogate(train_vals)
        gaps[i] = test_vals.mean() - train_vals.mean()
    return _estimate(gaps, f"gen_gap[{eval_loss}]")


# ------------------------------------------------------- gradient statistics


def grad_variance_trace(
    model: LossModel,
    dataset: np.ndarray,
    trace,
    n_resamples: int,
    rng_seed: int | None = None,
) -> list[EstimateWithError]:
    """Conditional minibatch-gradient variance at each stored state.

    At W_t the conditional mean of the minibatch gradient is the full-batch
    gradient, known exactly, so the estimator averages squared deviations
    of freshly resampled minibatch gradients around it. Full batch (k = n)
    has no sampling noise and returns exact zeros without resampling.
    """
    if n_resamples < 2:
        raise ValueError(f"need at least 2 resamples, got {n_resamples}")
    cfg = trace.config
    dataset = np.asarray(dataset, dtype=float)
    if cfg.k == cfg.n:
        return [
            EstimateWithError(0.0, 0.0, n_resamples, "grad_variance[exact_full_batch]")
            for _ in trace.stored_steps
        ]
    if rng_seed is None:
        rng_seed = cfg.seed
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0xE57]))

    out = []
    high = cfg.n - np.arange(cfg.k)
    for row in range(trace.states.shape[0]):
        w = trace.states[row]
        gfull = model.grad_minibatch(w[None], dataset[None])[0]
        offs = rng.integers(0, high, size=(n_resamples, cfg.k))
        idx = _fy_subset_rows(offs, cfg.n)
        G = model.grad_minibatch(
            np.broadcast_to(w, (n_resamples, cfg.d)), dataset[idx]
        )
        sq = np.einsum("ij,ij->i", G - gfull, G - gfull)
        out.append(_estimate(sq, "grad_variance"))
    return out


def grad_stability_trace(
    model: LossModel,
    mu_sampler,
    config: SGLDConfig,
    n_pairs: int,
    control_identical: bool = False,
) -> list[EstimateWithError]:
    """E ||grad_F(W_t, S) - grad_F(W_t, S')||^2 over dataset pairs.

    Per pair, S and S' are drawn independently, one chain runs on S, and
    both full-batch gradients are evaluated at its stored states. The
    chain's law is driven by S only; the statistic is asymmetric in that
    respect. `control_identical` replaces S' by S (the statistic is then
    exactly zero; falsification control).
    """
    if n_pairs < 1:
        raise ValueError(f"need at least 1 pair, got {n_pairs}")
    if mu_sampler is None:
        mu_sampler = model.sample_data

    root = np.random.SeedSequence(config.seed)
    datasets, datasets_alt, chain_seqs, ids = [], [], [], []
    for seq in root.spawn(n_pairs):
        s_seq, s_alt_seq, chain_seq = seq.spawn(3)
        S = np.asarray(mu_sampler(np.random.default_rng(s_seq), config.n), dtype=float)
        S_alt = S if control_identical else np.asarray(
            mu_sampler(np.random.default_rng(s_alt_seq), config.n), dtype=float
        )
        datasets.append(S)
        datasets_alt.append(S_alt)
        chain_seqs.append(chain_seq)
        ids.append(dataset_fingerprint(S))

    traces = _run_chains_lockstep(config, model, np.stack(datasets), chain_seqs, ids)
    DS = np.stack(datasets)
    DS_alt = np.stack(datasets_alt)

    n_steps = traces[0].stored_steps.shape[0]
    out = []
    for row in range(n_steps):
        W = np.stack([tr.states[row] for tr in traces])  # (pairs, d)
        g_s = model.grad_minibatch(W, DS)
        g_alt = model.grad_minibatch(W, DS_alt)
        sq = np.einsum("ij,ij->i", g_s - g_alt, g_s - g_alt)
        out.append(_estimate(sq, "grad_stability"))
    return out


# ----------------------------------------------------------------- p-th moments


@dataclass(frozen=True)
class PthMomentReport:
    """Empirical p-th moments of ||W_T|| against the trajectory moment bound.

    For each p: `empirical` is (mean ||W_T||^p)^(1/p); `unit_C_rhs` is the
    bound with universal constant 1, (E||W_0||^p)^(1/p) + sqrt((p + beta b
    + d)/(beta m)) with the initial moment exact for the Gaussian start;
    `fitted_C` is the smallest universal constant making the bound hold.
    `fitted_C_bounded` flags whether max_p fitted_C <= 2 * fitted_C(2).
    """

    p_values: tuple[int, ...]
    empirical: tuple[float, ...]
    unit_C_rhs: tuple[float, ...]
    fitted_C: tuple[float, ...]
    n_samples: int
    fitted_C_bounded: bool

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _gaussian_norm_moment(d: int, s_sq: float, p: int) -> float:
    # (E ||W_0||^p)^(1/p) for W_0 ~ N(0, s_sq I_d): s * (E chi_d^p)^(1/p)
    logm = (p / 2.0) * math.log(2.0) + math.lgamma((d + p) / 2.0) - math.lgamma(d / 2.0)
    return math.sqrt(s_sq) * math.exp(logm / p)


def pth_moment_check(
    traces,
    p_list,
    lc,
    beta: float,
    d: int,
    s_sq: float,
) -> PthMomentReport:
    """Fit the universal constant of the p-th moment bound per p."""
    p_list = [int(p) for p in p_list]
    for p in p_list:
        if p % 2 != 0 or p < 2 or p > 12:
            raise ValueError(f"p must be an even integer in [2, 12], got {p}")
    finals = np.stack([tr.final_state for tr in traces])
    n = finals.shape[0]
    if n < max(30, 5 * max(p_list)):
        raise ValueError(
            f"{n} samples is too few for p up to {max(p_list)}; "
            f"need at least {max(30, 5 * max(p_list))}"
        )
    norms = np.linalg.norm(finals, axis=1)

    empirical, unit_rhs, fitted = [], [], []
    for p in p_list:
        emp = float(np.mean(norms**p) ** (1.0 / p))
        rhs = _gaussian_norm_moment(d, s_sq, p) + math.sqrt((p + beta * lc.b + d)
                                                            / (beta * lc.m))
        empirical.append(emp)
        unit_rhs.append(rhs)
        fitted.append(emp / rhs)
    bounded = max(fitted) <= 2.0 * fitted[p_list.index(2)] if 2 in p_list else True
    return PthMomentReport(
        p_values=tuple(p_list),
        empirical=tuple(empirical),
        unit_C_rhs=tuple(unit_rhs),
        fitted_C=tuple(fitted),
        n_samples=n,
        fitted_C_bounded=bounded,
    )


# --------------------------------------------------------------------- log-MGF


@dataclass(frozen=True)
class LogMgfReport:
    """Empirical log moment generating function against its envelope.

    Per grid point: the empirical log E exp(lambda (f - mean f)), a
    bootstrap percentile band, the envelope sigma_e_sq lambda^2 / 2, and
    whether the point estimate violates the envelope.
    """

    lambdas: tuple[float, ...]
    logmgf: tuple[float, ...]
    band_lo: tuple[float, ...]
    band_hi: tuple[float, ...]
    envelope: tuple[float, ...]
    n_violations: int
    n_samples: int
    n_bootstrap: int

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _log_mean_exp(x: np.ndarray) -> float:
    m = float(np.max(x))
    return m + math.log(float(np.mean(np.exp(x - m))))


def logmgf_check(
    loss_samples: np.ndarray,
    sigma_e_sq: float,
    nu: float,
    lambda_grid,
    rng_seed: int = 0,
    n_bootstrap: int = BOOTSTRAP_RESAMPLES,
) -> LogMgfReport:
    """Empirical log-MGF of centered loss samples on a lambda grid.

    The grid must stay inside the open interval |lambda| < 1/(2 nu), half
    the admissible region, where the empirical MGF is still estimable;
    anything outside is rejected. lambda = 0 returns exactly 0.
    """
    samples = np.asarray(loss_samples, dtype=float)
    if samples.ndim != 1 or samples.size < 2:
        raise ValueError("need a flat sample of at least 2 loss values")
    if not (sigma_e_sq > 0 and nu > 0):
        raise ValueError("sigma_e_sq and nu must be positive")
    lambdas = [float(lam) for lam in lambda_grid]
    cap = 1.0 / (2.0 * nu)
    for lam in lambdas:
        if not abs(lam) < cap:
            raise ValueError(f"lambda={lam} outside the admitted grid |lambda| < {cap}")

    centered = samples - samples.mean()
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x176F]))
    boot_idx = rng.integers(0, samples.size, size=(n_bootstrap, samples.size))

    vals, los, his, envs = [], [], [], []
    n_violations = 0
    for lam in lambdas:
        x = lam * centered
        point = _log_mean_exp(x) if lam != 0.0 else 0.0
        env = sigma_e_sq * lam**2 / 2.0
        if lam == 0.0:
            lo = hi = 0.0
        else:
            boot = np.empty(n_bootstrap)
            for bi in range(n_bootstrap):
                sub = samples[boot_idx[bi]]
                boot[bi] = _log_mean_exp(lam * (sub - sub.mean()))
            lo, hi = np.percentile(boot, [2.5, 97.5])
        if point > env:
            n_violations += 1
        vals.append(point)
        los.append(float(lo))
        his.append(float(hi))
        envs.append(env)
    return LogMgfReport(
        lambdas=tuple(lambdas),
        logmgf=tuple(vals),
        band_lo=tuple(los),
        band_hi=tuple(his),
        envelope=tuple(envs),
        n_violations=n_violations,
        n_samples=int(samples.size),
        n_bootstrap=int(n_bootstrap),
    )


# ------------------------------------------------------------------------ CSV


def write_estimates_csv(path, rows) -> None:
    """Emit estimate rows as CSV {estimator, t_or_lambda, mean, stderr, n}.

    `rows` is an iterable of (estimator_name, t_or_lambda, EstimateWithError)
    or raw (estimator, t_or_lambda, mean, stderr, n) tuples.
    """
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["estimator", "t_or_lambda", "mean", "stderr", "n"])
        for row in rows:
            if len(row) == 3 and isinstance(row[2], EstimateWithError):
                est = row[2]
                writer.writerow([row[0], row[1], repr(est.mean), repr(est.stderr),
                                 est.n_samples])
            else:
                name, tl, mean, stderr, n = row
                writer.writerow([name, tl, repr(float(mean)), repr(float(stderr)), n])


# ------------------------------------------------------------------ validity


def variance_trace_within_bound(
    estimates: list[EstimateWithError],
    trace,
    lc,
    slack_stderr: float = 3.0,
) -> int:
    """Count stored steps where the variance estimate exceeds its bound.

    The bound is the minibatch variance bound evaluated at each stored
    state's ||W_t||^2, with `slack_stderr` standard errors of slack.
    """
    cfg = trace.config
    violations = 0
    for est, step in zip(estimates, trace.stored_steps):
        w_sq = float(trace.w_norm_sq[step])
        bound = sg_variance_bound(lc, cfg.n, cfg.k, w_sq)
        if est.mean > bound + slack_stderr * est.stderr:
            violations += 1
    return violations
