"""Loss families with certified smoothness and dissipativity constants.

Every loss in this module is a map f(w, z) from a parameter vector w in R^d
and a data point z to a real value, together with its gradient in w and a
record of analytically derived constants:

    M            smoothness modulus:   ||grad(w,z) - grad(w',z)|| <= M ||w - w'||
    m, b         dissipativity:        <grad(w,z), w> >= m ||w||^2 - b
    A            origin bound:         |f(0, z)| <= A for every admissible z
    R            strong convexity modulus, when the family has one
    data_radius  radius of the ball containing every admissible z

Three concrete families are provided (quadratic, logistic with ridge,
cosine-perturbed ridge), chosen so that all constants above are closed form.
The `certify` operation stress-tests the claimed constants on a large random
sample and reports violations with witness points instead of trusting the
algebra.
"""

from __future__ import annotations

import copy
import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "LossConstants",
    "LossModel",
    "QuadraticLoss",
    "LogisticRidgeLoss",
    "NonconvexRidgeLoss",
    "make_quadratic",
    "make_logistic_ridge",
    "make_nonconvex_ridge",
    "InequalityCheck",
    "CertificationReport",
    "certify",
]

CERT_TOL = 1e-9          # slack allowed on O(1) inequality margins in float64
FD_REL_TOL = 1e-5        # central-difference gradient agreement threshold
FD_DEGENERATE_NORM = 1e-6  # skip FD relative error where the gradient vanishes


@dataclass(frozen=True)
class LossConstants:
    """Certified constants of one loss family.

    Args:
        M: smoothness modulus, > 0.
        m: dissipativity slope, > 0.
        b: dissipativity offset, >= 0.
        A: bound on |f(0, z)| over the data ball, >= 0.
        data_radius: radius of the ball containing all data points, > 0.
        R: strong-convexity modulus if the family has one (0 < R <= M).
        sigma_g_sq: sub-Gaussian proxy variance of the evaluation loss,
            when the experiment evaluates with a bounded surrogate.
    """

    M: float
    m: float
    b: float
    A: float
    data_radius: float
    R: float | None = None
    sigma_g_sq: float | None = None

    def __post_init__(self) -> None:
        if not (self.M > 0 and math.isfinite(self.M)):
            raise ValueError(f"M must be positive and finite, got {self.M}")
        if not (self.m > 0 and math.isfinite(self.m)):
            raise ValueError(f"m must be positive and finite, got {self.m}")
        if not (self.b >= 0 and math.isfinite(self.b)):
            raise ValueError(f"b must be nonnegative and finite, got {self.b}")
        if not (self.A >= 0 and math.isfinite(self.A)):
            raise ValueError(f"A must be nonnegative and finite, got {self.A}")
        if not (self.data_radius > 0 and math.isfinite(self.data_radius)):
            raise ValueError(f"data_radius must be positive, got {self.data_radius}")
        if self.R is not None and not (0 < self.R <= self.M + 1e-12):
            raise ValueError(f"R must satisfy 0 < R <= M, got R={self.R}, M={self.M}")
        if self.sigma_g_sq is not None and not self.sigma_g_sq > 0:
            raise ValueError(f"sigma_g_sq must be positive, got {self.sigma_g_sq}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class LossModel:
    """Contract shared by all loss families.

    Subclasses implement `eval`, `grad` and their vectorized variants, and
    must populate `self.d` (parameter dimension), `self.z_dim` (data point
    width) and `self._constants` in their constructor.
    """

    d: int
    z_dim: int
    _constants: LossConstants

    # -- scalar interface ---------------------------------------------------

    def eval(self, w: np.ndarray, z: np.ndarray) -> float:
        """Loss value at parameter w for a single data point z."""
        raise NotImplementedError

    def grad(self, w: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Gradient in w of the loss at a single data point z."""
        raise NotImplementedError

    def constants(self) -> LossConstants:
        return self._constants

    # -- vectorized interface ----------------------------------------------

    def eval_many(self, W: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """Row-wise loss values: out[i] = eval(W[i], Z[i]).

        Default implementation loops; subclasses override with array code.
        """
        W = np.atleast_2d(np.asarray(W, dtype=float))
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.array([self.eval(w, z) for w, z in zip(W, Z)])

    def grad_many(self, W: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """Row-wise gradients: out[i] = grad(W[i], Z[i])."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        return np.stack([self.grad(w, z) for w, z in zip(W, Z)])

    def grad_minibatch(self, W: np.ndarray, Zb: np.ndarray) -> np.ndarray:
        """Per-chain mean gradient over per-chain minibatches.

        Args:
            W: (c, d) stacked parameter states, one row per chain.
            Zb: (c, k, z_dim) per-chain minibatch of data points.

        Returns:
            (c, d) array; row i is the mean over k points of grad(W[i], .).
        """
        W = np.asarray(W, dtype=float)
        Zb = np.asarray(Zb, dtype=float)
        c, k = Zb.shape[0], Zb.shape[1]
        flatW = np.repeat(W, k, axis=0)
        flatZ = Zb.reshape(c * k, -1)
        return self.grad_many(flatW, flatZ).reshape(c, k, -1).mean(axis=1)

    def eval_mean(self, w: np.ndarray, Z: np.ndarray) -> float:
        """Mean loss of a single parameter vector over a set of data points."""
        w = np.asarray(w, dtype=float)
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        W = np.broadcast_to(w, (Z.shape[0], w.shape[0]))
        return float(self.eval_many(W, Z).mean())

    # -- data sampling ------------------------------------------------------

    def sample_data(self, rng: np.random.Generator, n_points: int) -> np.ndarray:
        """Draw n_points data points uniformly from the data ball."""
        return _uniform_ball(rng, n_points, self.z_dim, self._constants.data_radius)

    # -- utilities ----------------------------------------------------------

    def with_constants(self, **changes) -> "LossModel":
        """Copy of this model whose claimed constants are altered.

        Exists so the certifier's failure path can be exercised against a
        model with deliberately wrong claims.
        """
        other = copy.copy(self)
        other._constants = dataclasses.replace(self._constants, **changes)
        return other


def _uniform_ball(rng: np.random.Generator, n: int, d: int, radius: float) -> np.ndarray:
    """Uniform sample from the d-ball of the given radius."""
    x = rng.standard_normal((n, d))
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    r = radius * rng.random((n, 1)) ** (1.0 / d)
    return x / norms * r


# ======================================================================
# Concrete families
# ======================================================================


class QuadraticLoss(LossModel):
    """f(w, z) = (R/2) ||w - z||^2, R-strongly convex, gradient R (w - z).

    Constants: M = R (exact, gradient is R-Lipschitz with equality),
    m = R/2 and b = (R/2) r^2 from completing the square in
    <grad, w> = R||w||^2 - R<z, w>, A = (R/2) r^2 since f(0,z) = (R/2)||z||^2.
    """

    def __init__(self, R: float, data_radius: float, d: int):
        if not R > 0:
            raise ValueError(f"R must be positive, got {R}")
        if not data_radius > 0:
            raise ValueError(f"data_radius must be positive, got {data_radius}")
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            raise ValueError(f"d must be a positive integer, got {d}")
        self.R = float(R)
        self.d = int(d)
        self.z_dim = int(d)
        r2 = float(data_radius) ** 2
        self._constants = LossConstants(
            M=self.R,
            m=self.R / 2.0,
            b=self.R / 2.0 * r2,
            A=self.R / 2.0 * r2,
            data_radius=float(data_radius),
            R=self.R,
        )

    def eval(self, w, z):
        diff = np.asarray(w, dtype=float) - np.asarray(z, dtype=float)
        return 0.5 * self.R * float(diff @ diff)

    def grad(self, w, z):
        return self.R * (np.asarray(w, dtype=float) - np.asarray(z, dtype=float))

    def eval_many(self, W, Z):
        diff = np.atleast_2d(W) - np.atleast_2d(Z)
        return 0.5 * self.R * np.einsum("ij,ij->i", diff, diff)

    def grad_many(self, W, Z):
        return self.R * (np.atleast_2d(W) - np.atleast_2d(Z))

    def grad_minibatch(self, W, Zb):
        # gradient is linear in z, so the minibatch mean collapses to z-bar
        return self.R * (np.asarray(W, dtype=float) - np.asarray(Zb, dtype=float).mean(axis=1))


class LogisticRidgeLoss(LossModel):
    """f(w, (x, y)) = log(1 + exp(-y <w, x>)) + (lam/2) ||w||^2.

    Data points are stored as length d+1 vectors, the label y in the last
    slot. Labels are +-1 and ||x|| <= data_radius.

    Constants: the logistic Hessian term is bounded by ||x||^2 / 4, so
    M = r^2/4 + lam; <grad, w> >= lam ||w||^2 - ||x|| ||w|| gives
    m = lam/2, b = r^2 / (2 lam) by Young's inequality; f(0, z) = log 2 = A;
    the ridge term makes the loss lam-strongly convex, R = lam.
    """

    def __init__(self, lam: float, data_radius: float, d: int):
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        if not data_radius > 0:
            raise ValueError(f"data_radius must be positive, got {data_radius}")
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            raise ValueError(f"d must be a positive integer, got {d}")
        self.lam = float(lam)
        self.d = int(d)
        self.z_dim = int(d) + 1
        r = float(data_radius)
        self._constants = LossConstants(
            M=r * r / 4.0 + self.lam,
            m=self.lam / 2.0,
            b=r * r / (2.0 * self.lam),
            A=math.log(2.0),
            data_radius=r,
            R=self.lam,
        )

    @staticmethod
    def _softplus(t: np.ndarray) -> np.ndarray:
        # log(1 + exp(t)) without overflow for large |t|
        return np.logaddexp(0.0, t)

    def eval(self, w, z):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        margin = z[-1] * float(w @ z[:-1])
        return float(self._softplus(-margin)) + 0.5 * self.lam * float(w @ w)

    def grad(self, w, z):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        x, y = z[:-1], z[-1]
        margin = y * float(w @ x)
        sig = 1.0 / (1.0 + math.exp(margin)) if margin > -700 else 1.0
        return -y * sig * x + self.lam * w

    def eval_many(self, W, Z):
        W = np.atleast_2d(W)
        Z = np.atleast_2d(Z)
        X, Y = Z[:, :-1], Z[:, -1]
        margins = Y * np.einsum("ij,ij->i", W, X)
        return self._softplus(-margins) + 0.5 * self.lam * np.einsum("ij,ij->i", W, W)

    def grad_many(self, W, Z):
        W = np.atleast_2d(W)
        Z = np.atleast_2d(Z)
        X, Y = Z[:, :-1], Z[:, -1]
        margins = Y * np.einsum("ij,ij->i", W, X)
        sig = _expit(-margins)
        return -(Y * sig)[:, None] * X + self.lam * W

    def grad_minibatch(self, W, Zb):
        W = np.asarray(W, dtype=float)
        Zb = np.asarray(Zb, dtype=float)
        X, Y = Zb[:, :, :-1], Zb[:, :, -1]
        margins = Y * np.einsum("cd,ckd->ck", W, X)
        sig = _expit(-margins)
        return -np.einsum("ck,ckd->cd", Y * sig, X) / Zb.shape[1] + self.lam * W

    def sample_data(self, rng, n_points):
        x = _uniform_ball(rng, n_points, self.d, self._constants.data_radius)
        y = rng.integers(0, 2, size=(n_points, 1)) * 2.0 - 1.0
        return np.concatenate([x, y], axis=1)


class NonconvexRidgeLoss(LossModel):
    """f(w, z) = (lam/2) ||w||^2 + a cos(<w, z>), nonconvex for a > 0.

    Constants: the cosine perturbation has Hessian norm at most a ||z||^2,
    so M = lam + a r^2; <grad, w> >= lam ||w||^2 - a ||z|| ||w|| gives
    m = lam/2, b = a^2 r^2 / (2 lam); f(0, z) = a = A. No strong-convexity
    modulus is claimed.
    """

    def __init__(self, lam: float, a: float, data_radius: float, d: int):
        if not lam > 0:
            raise ValueError(f"lambda must be positive, got {lam}")
        if not a >= 0:
            raise ValueError(f"amplitude a must be nonnegative, got {a}")
        if not data_radius > 0:
            raise ValueError(f"data_radius must be positive, got {data_radius}")
        if not (isinstance(d, (int, np.integer)) and d >= 1):
            raise ValueError(f"d must be a positive integer, got {d}")
        self.lam = float(lam)
        self.a = float(a)
        self.d = int(d)
        self.z_dim = int(d)
        r = float(data_radius)
        self._constants = LossConstants(
            M=self.lam + self.a * r * r,
            m=self.lam / 2.0,
            b=self.a**2 * r * r / (2.0 * self.lam),
            A=self.a if self.a > 0 else 0.0,
            data_radius=r,
        )

    def eval(self, w, z):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        return 0.5 * self.lam * float(w @ w) + self.a * math.cos(float(w @ z))

    def grad(self, w, z):
        w = np.asarray(w, dtype=float)
        z = np.asarray(z, dtype=float)
        return self.lam * w - self.a * math.sin(float(w @ z)) * z

    def eval_many(self, W, Z):
        W = np.atleast_2d(W)
        Z = np.atleast_2d(Z)
        dots = np.einsum("ij,ij->i", W, Z)
        return 0.5 * self.lam * np.einsum("ij,ij->i", W, W) + self.a * np.cos(dots)

    def grad_many(self, W, Z):
        W = np.atleast_2d(W)
        Z = np.atleast_2d(Z)
        dots = np.einsum("ij,ij->i", W, Z)
        return self.lam * W - self.a * np.sin(dots)[:, None] * Z

    def grad_minibatch(self, W, Zb):
        W = np.asarray(W, dtype=float)
        Zb = np.asarray(Zb, dtype=float)
        dots = np.einsum("cd,ckd->ck", W, Zb)
        return self.lam * W - self.a * np.einsum("ck,ckd->cd", np.sin(dots), Zb) / Zb.shape[1]


def _expit(t: np.ndarray) -> np.ndarray:
    """Numerically safe logistic sigmoid."""
    out = np.empty_like(t, dtype=float)
    pos = t >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-t[pos]))
    e = np.exp(t[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def make_quadratic(R: float, data_radius: float, d: int) -> QuadraticLoss:
    """Strongly convex quadratic family f(w, z) = (R/2) ||w - z||^2."""
    return QuadraticLoss(R, data_radius, d)


def make_logistic_ridge(lam: float, data_radius: float, d: int) -> LogisticRidgeLoss:
    """Convex non-quadratic family: logistic loss plus (lam/2) ||w||^2."""
    return LogisticRidgeLoss(lam, data_radius, d)


def make_nonconvex_ridge(lam: float, a: float, data_radius: float, d: int) -> NonconvexRidgeLoss:
    """Nonconvex family: ridge plus a cosine perturbation of amplitude a."""
    return NonconvexRidgeLoss(lam, a, data_radius, d)


# ======================================================================
# Certification
# ======================================================================


@dataclass(frozen=True)
class InequalityCheck:
    """Outcome of stress-testing one claimed inequality.

    `worst_margin` is the smallest observed slack (inequality RHS minus LHS);
    a negative value beyond tolerance is a violation. `witness` holds the
    sampled point that attained the worst margin.
    """

    inequality_name: str
    n_samples: int
    n_violations: int
    worst_margin: float
    witness: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class CertificationReport:
    """Full certification outcome for one model's claimed constants."""

    model_name: str
    constants: LossConstants
    checks: tuple[InequalityCheck, ...]
    seed: int
    tol: float

    @property
    def passed(self) -> bool:
        return all(c.n_violations == 0 for c in self.checks)

    def to_dict(self) -> dict:
        return {
            "model_name": self.model_name,
            "constants": self.constants.to_dict(),
            "passed": self.passed,
            "seed": self.seed,
            "tol": self.tol,
            "checks": [c.to_dict() for c in self.checks],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _check_from_margins(
    name: str, margins: np.ndarray, witnesses: dict, tol: float
) -> InequalityCheck:
    worst_idx = int(np.argmin(margins))
    n_violations = int(np.sum(margins < -tol))
    witness = {key: np.asarray(val)[worst_idx].tolist() for key, val in witnesses.items()}
    witness["margin"] = float(margins[worst_idx])
    return InequalityCheck(
        inequality_name=name,
        n_samples=int(margins.size),
        n_violations=n_violations,
        worst_margin=float(margins[worst_idx]),
        witness=witness,
    )


def certify(
    model: LossModel,
    n_samples: int = 10_000,
    rng_seed: int = 0,
    tol: float = CERT_TOL,
) -> CertificationReport:
    """Stress-test a model's claimed constants on random samples.

    Parameters w are drawn uniformly from the cube of half-width
    10 * max(1, sqrt(b/m)), which covers the region where the dynamics
    concentrate; data points come from the model's data distribution.

    Checks performed:
      smoothness         ||grad(w,z) - grad(w',z)|| <= M ||w - w'||
      dissipativity      <grad(w,z), w> >= m ||w||^2 - b
      origin_gradient    ||grad(0,z)|| <= M sqrt(b/m)
      envelope_lower     f(w,z) >= (m/3) ||w||^2 - (b/2) log 3
      envelope_upper     f(w,z) <= (M/2) ||w||^2 + M sqrt(b/m) ||w|| + A
      gradient_fd        central differences match grad to rel. error 1e-5

    Returns a report with per-inequality violation counts and witness
    points. A wrong claim yields a failing report, never an exception.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be positive, got {n_samples}")
    lc = model.constants()
    half_width = 10.0 * max(1.0, math.sqrt(lc.b / lc.m))
    root_M_bm = lc.M * math.sqrt(lc.b / lc.m)

    seq = np.random.SeedSequence(rng_seed)
    checks: list[InequalityCheck] = []

    chunk = 4096
    margins: dict[str, list[np.ndarray]] = {
        k: [] for k in ("smoothness", "dissipativity", "origin_gradient",
                        "envelope_lower", "envelope_upper")
    }
    stash: dict[str, dict[str, list[np.ndarray]]] = {k: {} for k in margins}

    def _stash(name: str, m: np.ndarray, **wit: np.ndarray) -> None:
        margins[name].append(m)
        for key, val in wit.items():
            stash[name].setdefault(key, []).append(np.asarray(val))

    remaining = int(n_samples)
    for child in seq.spawn(max(1, -(-n_samples // chunk))):
        take = min(chunk, remaining)
        if take <= 0:
            break
        remaining -= take
        rng = np.random.default_rng(child)

        W = rng.uniform(-half_width, half_width, size=(take, model.d))
        Wbar = rng.uniform(-half_width, half_width, size=(take, model.d))
        Z = model.sample_data(rng, take)

        G = model.grad_many(W, Z)
        Gbar = model.grad_many(Wbar, Z)
        f_vals = model.eval_many(W, Z)
        w_norm = np.linalg.norm(W, axis=1)

        diff_g = np.linalg.norm(G - Gbar, axis=1)
        diff_w = np.linalg.norm(W - Wbar, axis=1)
        _stash("smoothness", lc.M * diff_w - diff_g, w=W, w_bar=Wbar, z=Z)

        inner = np.einsum("ij,ij->i", G, W)
        _stash("dissipativity", inner - (lc.m * w_norm**2 - lc.b), w=W, z=Z)

        G0 = model.grad_many(np.zeros((take, model.d)), Z)
        _stash("origin_gradient", root_M_bm - np.linalg.norm(G0, axis=1), z=Z)

        lower = lc.m / 3.0 * w_norm**2 - lc.b / 2.0 * math.log(3.0)
        _stash("envelope_lower", f_vals - lower, w=W, z=Z)

        upper = lc.M / 2.0 * w_norm**2 + root_M_bm * w_norm + lc.A
        _stash("envelope_upper", upper - f_vals, w=W, z=Z)

    for name in margins:
        all_m = np.concatenate(margins[name])
        wit = {k: np.concatenate(v) for k, v in stash[name].items()}
        checks.append(_check_from_margins(name, all_m, wit, tol))

    checks.append(_fd_gradient_check(model, seq.spawn(1)[0]))

    return CertificationReport(
        model_name=type(model).__name__,
        constants=lc,
        checks=tuple(checks),
        seed=int(rng_seed),
        tol=tol,
    )


def _fd_gradient_check(
    model: LossModel, seed_seq: np.random.SeedSequence, n_points: int = 100
) -> InequalityCheck:
    """Central-difference agreement of grad with eval at random points."""
    rng = np.random.default_rng(seed_seq)
    lc = model.constants()
    half_width = 10.0 * max(1.0, math.sqrt(lc.b / lc.m))
    W = rng.uniform(-half_width, half_width, size=(n_points, model.d))
    Z = model.sample_data(rng, n_points)

    margins = np.empty(n_points)
    witnesses = {"w": W, "z": Z, "rel_err": np.zeros(n_points)}
    for i in range(n_points):
        w, z = W[i], Z[i]
        g = model.grad(w, z)
        g_norm = float(np.linalg.norm(g))
        if g_norm < FD_DEGENERATE_NORM:
            margins[i] = FD_REL_TOL  # degenerate point: vacuously fine
            continue
        h = 1e-5 * (1.0 + float(np.linalg.norm(w)))
        fd = np.empty_like(w)
        for j in range(w.shape[0]):
            e = np.zeros_like(w)
            e[j] = h
            fd[j] = (model.eval(w + e, z) - model.eval(w - e, z)) / (2.0 * h)
        rel_err = float(np.linalg.norm(fd - g) / g_norm)
        witnesses["rel_err"][i] = rel_err
        margins[i] = FD_REL_TOL - rel_err
    # violations here mean rel. error at or past the threshold, not a
    # float-slack overrun, so the check uses tol = 0
    return _check_from_margins("gradient_fd", margins, witnesses, tol=0.0)
