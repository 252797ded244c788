"""Derived theoretical constants for SGLD over certified losses.

Everything here is a closed-form function of the certified loss constants
(M, m, b, A, optionally R), the algorithm hyperparameters (eta, beta, k, n,
d, s_sq) and a handful of non-explicit universal constants that default to 1
and are flagged heuristic wherever they enter.

The constant chains, in dependency order:

* `minibatch_delta` / `sg_variance_bound`: variance of the minibatch
  gradient around the full-batch gradient is at most
  8 delta M^2 (||w||^2 + k/m) with delta = (n-k)/(k(n-1)).

* `moment_bound_C0`: along the whole trajectory E||W_t||^2 <= C0 with
  C0 = s^2 + 2 max(1, 1/m) (b + 10 eta M^2 b/m + d/beta), valid for
  eta in (0, min(1, m/(5 M^2))). `grad_sq_bound` = M^2 C0 + M^2 b/m then
  controls the expected squared gradient norm.

* `lsi_constant`: the stationary law of the dynamics satisfies a
  log-Sobolev inequality. Two modes:
  - strongly_convex: the Gibbs potential beta*F is beta*R-strongly convex,
    giving c_LS = 1/(2 beta R).
  - general_dissipative: an explicit but enormously conservative constant
    assembled from a drift term 2(2m^2+8M^2)/(beta m^2 M), a tail term
    6M(d+beta)/m, and a base-measure factor rho0_inv that is exponential in
    (b beta + d)/m. The universal prefactor C defaults to 1 (heuristic).

* KL-recursion constants `D1..D5` (built inside `derive_constants`): one
  discrete update contracts the KL divergence to the stationary law by
  exp(-eta/(4 beta c_LS)) and adds eta (D2/(4 beta c_LS) + D3/(2 beta)
  + beta D1/2). D2 and D5 contain constants from a short-time transition
  density expansion that the theory leaves unspecified; they are taken from
  `ParametrixOverrides` (defaults C1' = C2' = 1, C0~ = 1, C1~ = 0, flagged
  heuristic).

* `subexp_params`: the training loss evaluated along the dynamics is
  sub-exponential. From the moment growth (E|f(W_T)|^p)^(1/p)
  <= C0_f + C1_f p one gets E f^p <= C5^p p^p with C5 = C0_f + C1_f, and
  the moment generating function envelope constants sigma_e_sq = 4 e^2
  C5^2, nu = 1/(2 e C5). These satisfy sigma_e_sq * nu^2 = 1 identically.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

from .losses import LossConstants

__all__ = [
    "ParametrixOverrides",
    "DerivedConstants",
    "minibatch_delta",
    "sg_variance_bound",
    "moment_bound_C0",
    "lsi_constant",
    "kl_recursion_constants",
    "subexp_params",
    "derive_constants",
]


@dataclass(frozen=True)
class ParametrixOverrides:
    """Non-explicit constants of the short-time density expansion.

    The theory proves existence but gives no values; defaults are 1 (and 0
    for the quadratic-in-time coefficient, whose contribution over one step
    of length eta is negligible). Every derived constant using them is
    heuristic to the same degree.
    """

    C1_prime: float = 1.0
    C2_prime: float = 1.0
    C0_tilde: float = 1.0
    C1_tilde: float = 0.0
    heuristic: bool = True

    def __post_init__(self) -> None:
        for name in ("C1_prime", "C2_prime", "C0_tilde", "C1_tilde"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class DerivedConstants:
    """Full record of the derived constant chain for one configuration.

    Fields:
        c_LS: log-Sobolev constant of the stationary law.
        C0: uniform-in-time second-moment bound E||W_t||^2 <= C0.
        grad_sq_bound: E||grad F||^2 <= M^2 C0 + M^2 b/m.
        delta: minibatch variance factor (n-k)/(k(n-1)); zero iff full batch.
        D1..D5: per-step KL-recursion constants; D1 = 2(D4 + D5).
        sigma_e_sq, nu, C5: sub-exponential parameters of the training loss.
        parametrix_overrides: the heuristic expansion constants used.
        notes: provenance flags (heuristic constants, LSI mode).
    """

    c_LS: float
    C0: float
    grad_sq_bound: float
    delta: float
    D1: float
    D2: float
    D3: float
    D4: float
    D5: float
    sigma_e_sq: float
    nu: float
    C5: float
    parametrix_overrides: ParametrixOverrides = field(default_factory=ParametrixOverrides)
    notes: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("c_LS", "C0", "grad_sq_bound", "D1", "D2", "D3", "D4", "D5",
                     "sigma_e_sq", "nu", "C5"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"derived constant {name} must be positive and finite, got {v}")
        if not 0.0 <= self.delta <= 1.0:
            raise ValueError(f"delta must lie in [0, 1], got {self.delta}")
        if abs(self.D1 - 2.0 * (self.D4 + self.D5)) > 1e-12 * max(1.0, self.D1):
            raise ValueError(f"D1 must equal 2 (D4 + D5), got D1={self.D1}, "
                             f"D4={self.D4}, D5={self.D5}")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["parametrix_overrides"] = self.parametrix_overrides.to_dict()
        out["notes"] = list(self.notes)
        return out


# ----------------------------------------------------------------- minibatch


def minibatch_delta(n: int, k: int) -> float:
    """Variance factor delta = (n-k)/(k(n-1)) of uniform size-k minibatches.

    Equals 1 at k=1 and 0 at k=n (full batch).
    """
    if n < 2:
        raise ValueError(f"dataset size n must be at least 2, got {n}")
    if not 1 <= k <= n:
        raise ValueError(f"batch size k must satisfy 1 <= k <= n, got k={k}, n={n}")
    return (n - k) / (k * (n - 1))


def sg_variance_bound(lc: LossConstants, n: int, k: int, w_norm_sq: float) -> float:
    """Upper bound on E||grad_full(w) - grad_batch(w)||^2 at one point w.

    The bound is 8 delta M^2 (||w||^2 + k/m).
    """
    if w_norm_sq < 0:
        raise ValueError(f"w_norm_sq must be nonnegative, got {w_norm_sq}")
    delta = minibatch_delta(n, k)
    return 8.0 * delta * lc.M**2 * (w_norm_sq + k / lc.m)


# ------------------------------------------------------------------- moments


def moment_bound_C0(lc: LossConstants, eta: float, beta: float, d: int, s_sq: float) -> float:
    """Uniform-in-time second-moment bound of the iterates.

    C0 = s^2 + 2 max(1, 1/m) (b + 10 eta M^2 b/m + d/beta), valid for step
    sizes eta in (0, min(1, m/(5 M^2))).
    """
    _check_positive(beta=beta, s_sq=s_sq)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    eta_cap = min(1.0, lc.m / (5.0 * lc.M**2))
    if not 0.0 < eta < eta_cap:
        raise ValueError(
            f"eta={eta} outside the validity range (0, {eta_cap}) "
            f"= (0, min(1, m/(5 M^2)))"
        )
    return s_sq + 2.0 * max(1.0, 1.0 / lc.m) * (
        lc.b + 10.0 * eta * lc.M**2 * lc.b / lc.m + d / beta
    )


def _eta_free_moment_core(lc: LossConstants, beta: float, d: int, s_sq: float) -> float:
    # worst case of the C0 formula over eta in (0, 1]; used by the
    # recursion constants, which must not depend on the step size
    return s_sq + 2.0 * max(1.0, 1.0 / lc.m) * (
        lc.b + 10.0 * lc.M**2 * lc.b / lc.m + d / beta
    )


# ----------------------------------------------------------------------- LSI


def lsi_constant(
    lc: LossConstants,
    beta: float,
    d: int,
    mode: str = "general_dissipative",
    universal_C: float = 1.0,
) -> float:
    """Log-Sobolev constant of the stationary law, by one of two routes.

    strongly_convex: requires the family's strong-convexity modulus R; the
    Gibbs potential beta*F is then beta*R-strongly convex and
    c_LS = 1/(2 beta R).

    general_dissipative: requires beta >= 2/m; returns
    2 drift + 2 rho0_inv (tail + 2) with
        drift    = (2 m^2 + 8 M^2) / (beta m^2 M)
        tail     = 6 M (d + beta) / m
        rho0_inv = (2 C (d + b beta) / (m beta))
                   * exp((2/m)(M + B)(b beta + d) + beta (A + B))
                   + 1/(m beta (d + b beta))
    where B = M sqrt(b/m) bounds the gradient at the origin and C is an
    unspecified universal constant (default 1, heuristic). The exponential
    makes this astronomically conservative; it exists to make the chain
    fully explicit, not to be tight.
    """
    _check_positive(beta=beta)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if mode == "strongly_convex":
        if lc.R is None:
            raise ValueError("strongly_convex mode requires a strong-convexity modulus R")
        return 1.0 / (2.0 * beta * lc.R)
    if mode != "general_dissipative":
        raise ValueError(f"unknown mode {mode!r}")
    if beta < 2.0 / lc.m:
        raise ValueError(f"general_dissipative mode requires beta >= 2/m = {2.0 / lc.m}, "
                         f"got beta={beta}")
    if universal_C <= 0:
        raise ValueError(f"universal_C must be positive, got {universal_C}")
    M, m, b, A = lc.M, lc.m, lc.b, lc.A
    B = M * math.sqrt(b / m)
    drift = (2.0 * m**2 + 8.0 * M**2) / (beta * m**2 * M)
    tail = 6.0 * M * (d + beta) / m
    rho0_inv = (
        2.0 * universal_C * (d + b * beta) / (m * beta)
        * math.exp((2.0 / m) * (M + B) * (b * beta + d) + beta * (A + B))
        + 1.0 / (m * beta * (d + b * beta))
    )
    return 2.0 * drift + 2.0 * rho0_inv * (tail + 2.0)


# ------------------------------------------------------------- KL recursion


def _kl_recursion_D(
    lc: LossConstants,
    beta: float,
    d: int,
    s_sq: float,
    eta: float,
    overrides: ParametrixOverrides,
) -> tuple[float, float, float, float, float]:
    """The five constants (D1..D5) of the one-step KL recursion.

    All are step-size free except D5's quadratic-in-time expansion term,
    evaluated at its worst case t = eta over the step interval. Built from
    the eta-free second-moment core
    S = s^2 + 2 max(1, 1/m)(b + 10 M^2 b/m + d/beta).
    """
    M, m, b, A = lc.M, lc.m, lc.b, lc.A
    S = _eta_free_moment_core(lc, beta, d, s_sq)

    D2 = (
        beta**2 * M**2 * (S + b / m)
        + d * overrides.C1_prime / math.sqrt(2.0 * math.pi * s_sq)
        + d * overrides.C2_prime
    )
    B1 = (d / 2.0) * math.log(2.0 * math.pi * s_sq) + (1.0 / (2.0 * s_sq)) * (
        s_sq + 4.0 * max(1.0, 1.0 / m) * (b + 10.0 * M**2 * b / m + d / beta)
    )
    B2 = beta * M * S + beta * b / (2.0 * m) + A
    D3 = B1 + B2
    D4 = M**2 * S + M**2 * b / m
    D5 = 2.0 * M**2 * overrides.C0_tilde * (overrides.C1_tilde * eta**2 + S) + 2.0 * M**2 * b / m
    D1 = 2.0 * (D4 + D5)
    return D1, D2, D3, D4, D5


def kl_recursion_constants(
    lc: LossConstants,
    dc: DerivedConstants,
    eta: float,
    beta: float,
    d: int,
    s_sq: float,
) -> dict:
    """Per-step contraction and additive drift of the KL recursion.

    One discrete update satisfies
        KL_t <= contraction * KL_{t-1} + per_step_add
    with contraction = exp(-eta/(4 beta c_LS)) and
    per_step_add = eta (D2/(4 beta c_LS) + D3/(2 beta) + beta D1/2).
    The additive part splits into a gradient-stability piece
    stability_coeff = beta D1 / 2 and a constant piece
    const_coeff = D2/(4 beta c_LS) + D3/(2 beta), both per unit step.
    """
    _check_positive(eta=eta, beta=beta, s_sq=s_sq)
    tau = 4.0 * beta * dc.c_LS
    if eta >= tau:
        raise ValueError(
            f"eta={eta} >= 4 beta c_LS = {tau}; the unrolled recursion bound is invalid"
        )
    stability_coeff = beta * dc.D1 / 2.0
    const_coeff = dc.D2 / tau + dc.D3 / (2.0 * beta)
    return {
        "contraction": math.exp(-eta / tau),
        "per_step_add": eta * (stability_coeff + const_coeff),
        "stability_coeff": stability_coeff,
        "const_coeff": const_coeff,
    }


# ------------------------------------------------------------ sub-exponential


def subexp_params(
    lc: LossConstants,
    beta: float,
    d: int,
    s_sq: float,
    universal_C: float = 1.0,
) -> dict:
    """Sub-exponential parameters of the training loss along the dynamics.

    Chain: the p-th moments of ||W_T|| satisfy
        (E||W_T||^{2p})^{1/(2p)} <= a0 + a1 sqrt(p)
    with a0 = C (s sqrt(d) + sqrt(q0)), a1 = C (s sqrt(2) + sqrt(2/(beta m)))
    and q0 = (beta b + d)/(beta m), from the trajectory moment lemma plus
    exact Gaussian initial moments. The loss envelope |f(w, z)| <=
    M ||w||^2 + K with K = max(M b/(2m) + A, (b/2) log 3) then gives
        (E|f(W_T)|^p)^{1/p} <= C0_f + C1_f p,
        C0_f = M (a0^2 + a0 a1) + K,   C1_f = M (a1^2 + a0 a1),
    using sqrt(p) <= (1 + p)/2. Composing, E f^p <= C5^p p^p with
    C5 = C0_f + C1_f = M (a0 + a1)^2 + K, and finally
        sigma_e_sq = 4 e^2 C5^2,   nu = 1/(2 e C5),
    which satisfy sigma_e_sq * nu^2 = 1 identically. The universal constant
    C of the moment lemma defaults to 1 (heuristic).
    """
    _check_positive(beta=beta, s_sq=s_sq)
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    if universal_C <= 0:
        raise ValueError(f"universal_C must be positive, got {universal_C}")
    M, m, b, A = lc.M, lc.m, lc.b, lc.A
    s = math.sqrt(s_sq)
    q0 = (beta * b + d) / (beta * m)
    a0 = universal_C * (s * math.sqrt(d) + math.sqrt(q0))
    a1 = universal_C * (s * math.sqrt(2.0) + math.sqrt(2.0 / (beta * m)))
    K = max(M * b / (2.0 * m) + A, (b / 2.0) * math.log(3.0))
    C0_f = M * (a0**2 + a0 * a1) + K
    C1_f = M * (a1**2 + a0 * a1)
    C5 = C0_f + C1_f
    return {
        "sigma_e_sq": 4.0 * math.e**2 * C5**2,
        "nu": 1.0 / (2.0 * math.e * C5),
        "C5": C5,
        "C0_f": C0_f,
        "C1_f": C1_f,
    }


# ------------------------------------------------------------------ assembly


def derive_constants(
    lc: LossConstants,
    eta: float,
    beta: float,
    k: int,
    n: int,
    d: int,
    s_sq: float,
    lsi_mode: str = "general_dissipative",
    overrides: ParametrixOverrides | None = None,
    universal_C_lsi: float = 1.0,
    universal_C_moment: float = 1.0,
) -> DerivedConstants:
    """Assemble the full derived-constant record for one configuration."""
    overrides = overrides if overrides is not None else ParametrixOverrides()
    c_LS = lsi_constant(lc, beta, d, mode=lsi_mode, universal_C=universal_C_lsi)
    C0 = moment_bound_C0(lc, eta, beta, d, s_sq)
    grad_sq = lc.M**2 * C0 + lc.M**2 * lc.b / lc.m
    delta = minibatch_delta(n, k)
    D1, D2, D3, D4, D5 = _kl_recursion_D(lc, beta, d, s_sq, eta, overrides)
    sub = subexp_params(lc, beta, d, s_sq, universal_C=universal_C_moment)

    notes = [f"lsi_mode={lsi_mode}"]
    if lsi_mode == "general_dissipative":
        notes.append(f"heuristic-constant: LSI universal C = {universal_C_lsi}")
    if overrides.heuristic:
        notes.append("heuristic-constant: short-time expansion constants "
                     f"{overrides.to_dict()}")
    notes.append(f"heuristic-constant: moment-lemma universal C = {universal_C_moment}")

    return DerivedConstants(
        c_LS=c_LS,
        C0=C0,
        grad_sq_bound=grad_sq,
        delta=delta,
        D1=D1,
        D2=D2,
        D3=D3,
        D4=D4,
        D5=D5,
        sigma_e_sq=sub["sigma_e_sq"],
        nu=sub["nu"],
        C5=sub["C5"],
        parametrix_overrides=overrides,
        notes=tuple(notes),
    )


def _check_positive(**kwargs: float) -> None:
    for name, v in kwargs.items():
        if not (v > 0 and math.isfinite(v)):
            raise ValueError(f"{name} must be positive and finite, got {v}")
