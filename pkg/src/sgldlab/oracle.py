"""Exact Gaussian law of the full-batch chain on the quadratic loss.

With a quadratic loss and full batches the update is affine in the state
plus isotropic Gaussian noise, so the parameter law stays Gaussian with an
isotropic covariance and evolves by a scalar variance recursion. That gives
closed-form KL between the laws conditioned on two datasets, an exact
mutual-information upper bound by averaging that KL over dataset pairs, and
a ground truth against which the per-step KL inequality can be verified
with no discretization error.

Mini-batch chains are deliberately out of scope: their laws are mixtures
over batch paths, not single Gaussians.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .estimators import EstimateWithError
from .sgld import SGLDConfig

__all__ = [
    "GaussianState",
    "ou_step",
    "gaussian_kl",
    "OracleTrace",
    "oracle_trace",
    "oracle_mi_upper",
    "KLRecursionReport",
    "verify_kl_recursion",
]


@dataclass(frozen=True)
class GaussianState:
    """Isotropic Gaussian law N(mean, var * I) at step t."""

    mean: np.ndarray
    var: float
    t: int

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=float)
        if mean.ndim != 1:
            raise ValueError(f"mean must be a vector, got shape {mean.shape}")
        object.__setattr__(self, "mean", mean)
        if self.t < 0:
            raise ValueError(f"step index must be nonnegative, got {self.t}")
        # var = 0 is admitted only as a degenerate start; every step injects noise
        if self.t == 0:
            if self.var < 0:
                raise ValueError(f"var must be nonnegative at t=0, got {self.var}")
        elif not self.var > 0:
            raise ValueError(f"var must be positive for t >= 1, got {self.var}")

    @property
    def d(self) -> int:
        return self.mean.shape[0]


def ou_step(
    state: GaussianState, eta: float, beta: float, R: float, zbar: np.ndarray
) -> GaussianState:
    """One exact step of the full-batch chain law on the quadratic loss.

    mean' = (1 - eta R) mean + eta R zbar; var' = (1 - eta R)^2 var +
    2 eta / beta. Requires eta R < 2 for the affine map to be a
    contraction; beyond that the recursion diverges and a warning is
    issued, but the step is still computed.
    """
    if not (eta > 0 and beta > 0 and R > 0):
        raise ValueError("eta, beta, R must be positive")
    zbar = np.asarray(zbar, dtype=float)
    if zbar.shape != state.mean.shape:
        raise ValueError(f"zbar shape {zbar.shape} != mean shape {state.mean.shape}")
    if eta * R >= 2:
        warnings.warn(
            f"eta*R = {eta * R} >= 2: the mean recursion diverges", RuntimeWarning
        )
    decay = 1.0 - eta * R
    return GaussianState(
        mean=decay * state.mean + eta * R * zbar,
        var=decay**2 * state.var + 2.0 * eta / beta,
        t=state.t + 1,
    )


def gaussian_kl(p: GaussianState, q: GaussianState) -> float:
    """KL divergence between two isotropic d-dimensional Gaussians.

    (d/2)(var_p/var_q - 1 + log(var_q/var_p)) + ||mean_p - mean_q||^2 /
    (2 var_q). Equal variances collapse to the squared mean gap over twice
    the variance.
    """
    if p.d != q.d:
        raise ValueError(f"dimension mismatch: {p.d} vs {q.d}")
    if not (p.var > 0 and q.var > 0):
        raise ValueError("KL needs strictly positive variances")
    ratio = p.var / q.var
    diff = p.mean - q.mean
    return 0.5 * p.d * (ratio - 1.0 - math.log(ratio)) + float(diff @ diff) / (
        2.0 * q.var
    )


def _response_and_var(eta: float, beta: float, R: float, s_sq: float, T: int):
    """Unit response a_t and variance v_t of the affine recursion, t = 0..T.

    a_t is the coefficient of zbar in the mean after t steps from mean 0;
    v_t is the per-coordinate variance from v_0 = s^2. Shared by every
    dataset because neither depends on the data.
    """
    a = np.empty(T + 1)
    v = np.empty(T + 1)
    a[0], v[0] = 0.0, s_sq
    decay = 1.0 - eta * R
    add = 2.0 * eta / beta
    for t in range(T):
        a[t + 1] = decay * a[t] + eta * R
        v[t + 1] = decay**2 * v[t] + add
    return a, v


@dataclass(frozen=True)
class OracleTrace:
    """Exact law sequence for one dataset pair, with the KL between them.

    mean_norm tracks the chain conditioned on the first dataset; kl[t] is
    KL(law | first dataset, law | second dataset) at step t, zero at t=0
    where both start from the same initial Gaussian.
    """

    steps: np.ndarray
    mean_norm: np.ndarray
    var: np.ndarray
    kl: np.ndarray

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "mean_norm", "var", "kl"])
            for i in range(self.steps.shape[0]):
                writer.writerow(
                    [
                        int(self.steps[i]),
                        repr(float(self.mean_norm[i])),
                        repr(float(self.var[i])),
                        repr(float(self.kl[i])),
                    ]
                )


def oracle_trace(
    dataset: np.ndarray, dataset_alt: np.ndarray, config: SGLDConfig, R: float
) -> OracleTrace:
    """Exact per-step law and KL trace for a fixed dataset pair.

    Both chains start from the same N(0, s^2 I), so their variances agree
    at every step and the KL reduces to a_t^2 ||zbar - zbar'||^2 / (2 v_t).
    """
    if config.k != config.n:
        raise ValueError("the exact law covers full-batch chains only (k = n)")
    dataset = np.asarray(dataset, dtype=float)
    dataset_alt = np.asarray(dataset_alt, dtype=float)
    zbar = dataset.mean(axis=0)
    zbar_alt = dataset_alt.mean(axis=0)
    a, v = _response_and_var(config.eta, config.beta, R, config.s_sq, config.T)
    gap_sq = float((zbar - zbar_alt) @ (zbar - zbar_alt))
    return OracleTrace(
        steps=np.arange(config.T + 1),
        mean_norm=a * float(np.linalg.norm(zbar)),
        var=v.copy(),
        kl=a**2 * gap_sq / (2.0 * v),
    )


def oracle_mi_upper(
    mu_sampler,
    config: SGLDConfig,
    R: float,
    n_dataset_pairs: int,
    control_identical: bool = False,
) -> EstimateWithError:
    """Mutual-information upper bound from closed-form KL over dataset pairs.

    Averages KL(law of W_T given S, law of W_T given S') over independent
    dataset pairs; each pair's KL is exact, so the only error is the pair
    Monte Carlo. `control_identical` replaces S' by S, which must give 0.
    """
    if n_dataset_pairs < 1:
        raise ValueError(f"need at least 1 dataset pair, got {n_dataset_pairs}")
    if config.k != config.n:
        raise ValueError("the exact law covers full-batch chains only (k = n)")
    a, v = _response_and_var(config.eta, config.beta, R, config.s_sq, config.T)
    aT, vT = float(a[-1]), float(v[-1])

    root = np.random.SeedSequence(config.seed)
    kls = np.empty(n_dataset_pairs)
    for i, seq in enumerate(root.spawn(n_dataset_pairs)):
        s_seq, s_alt_seq = seq.spawn(2)
        S = np.asarray(mu_sampler(np.random.default_rng(s_seq), config.n), dtype=float)
        if control_identical:
            S_alt = S
        else:
            S_alt = np.asarray(
                mu_sampler(np.random.default_rng(s_alt_seq), config.n), dtype=float
            )
        diff = S.mean(axis=0) - S_alt.mean(axis=0)
        kls[i] = aT**2 * float(diff @ diff) / (2.0 * vT)
    n = n_dataset_pairs
    sd = float(kls.std(ddof=1)) if n > 1 else 0.0
    return EstimateWithError(
        mean=float(kls.mean()),
        stderr=sd / math.sqrt(n),
        n_samples=n,
        estimator_name="oracle_mi_upper",
    )


@dataclass(frozen=True)
class KLRecursionReport:
    """Per-step verdicts of KL_t <= contraction * KL_{t-1} + per_step_add."""

    satisfied: tuple
    n_violations: int
    worst_slack: float
    tol: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def verify_kl_recursion(
    kl_trace, contraction: float, per_step_add: float, tol: float = 0.0
) -> KLRecursionReport:
    """Check the one-step KL inequality along a trace.

    Slack at step t is contraction * KL_{t-1} + per_step_add - KL_t;
    negative slack beyond tol is a violation. worst_slack is the minimum
    over steps (trace of length < 2 has no steps to check).
    """
    kl = np.asarray(kl_trace, dtype=float)
    if kl.ndim != 1:
        raise ValueError("kl_trace must be a flat sequence")
    if not (contraction >= 0 and per_step_add >= 0 and tol >= 0):
        raise ValueError("contraction, per_step_add, tol must be nonnegative")
    if kl.shape[0] < 2:
        return KLRecursionReport(satisfied=(), n_violations=0,
                                 worst_slack=math.inf, tol=tol)
    slack = contraction * kl[:-1] + per_step_add - kl[1:]
    ok = slack >= -tol
    return KLRecursionReport(
        satisfied=tuple(bool(x) for x in ok),
        n_violations=int((~ok).sum()),
        worst_slack=float(slack.min()),
        tol=tol,
    )
