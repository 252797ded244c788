"""SGLD engine: seeded chains, uniform minibatching, ensembles.

One update of the dynamics is

    W_{t+1} = W_t - eta * grad_F(W_t, B_t) + sqrt(2 eta / beta) * xi_t

with xi_t a standard Gaussian vector, B_t a uniformly random size-k subset
of the dataset indices, and grad_F the minibatch mean gradient. W_0 is
drawn from the centered isotropic Gaussian with per-coordinate variance
s_sq.

Reproducibility contract: a chain is fully determined by (seed, config,
dataset). Each chain owns three RNG substreams spawned from its seed
sequence, in order: initial state, minibatch indices, Gaussian noise. The
noise stream consumes exactly d Gaussian variates per step (d * T per
chain); minibatch indices use a partial Fisher-Yates shuffle, which is
exactly uniform over size-k subsets, and consume k integer draws per step
(none when k = n). Draws are made in blocks of `STEP_CHUNK` steps; the
block structure is fixed, so identical seeds give bit-identical traces.

Ensembles spawn one child sequence per dataset; each dataset child spawns
one sequence for sampling the dataset itself plus one per chain. Chains
sharing a dataset are advanced together in lockstep, vectorized across
chains; a single chain is the one-chain special case of the same code
path, so serial and ensemble runs agree bitwise.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .constants import lsi_constant
from .losses import LossModel

__all__ = [
    "SGLDConfig",
    "ChainTrace",
    "StrictModeError",
    "sample_initial",
    "sample_minibatch",
    "sgld_step",
    "run_chain",
    "run_ensemble",
    "strict_mode_failures",
    "dataset_fingerprint",
]

STEP_CHUNK = 512          # steps per pre-drawn RNG block
STATE_STORE_CAP = 10_000  # full state storage up to this many steps


@dataclass(frozen=True)
class SGLDConfig:
    """Hyperparameters of one SGLD run.

    Args:
        eta: step size, > 0.
        beta: inverse temperature, > 0.
        k: minibatch size, 1 <= k <= n.
        n: dataset size.
        T: number of updates, >= 0.
        d: parameter dimension.
        s_sq: variance of the Gaussian initial state, > 0.
        seed: 64-bit root seed.
        strict_mode: refuse to run outside the validated step-size and
            temperature ranges (see `strict_mode_failures`).
    """

    eta: float
    beta: float
    k: int
    n: int
    T: int
    d: int
    s_sq: float
    seed: int
    strict_mode: bool = False

    def __post_init__(self) -> None:
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.s_sq > 0 and math.isfinite(self.s_sq)):
            raise ValueError(f"s_sq must be positive, got {self.s_sq}")
        if self.n < 1:
            raise ValueError(f"n must be positive, got {self.n}")
        if not 1 <= self.k <= self.n:
            raise ValueError(f"k must satisfy 1 <= k <= n, got k={self.k}, n={self.n}")
        if self.T < 0:
            raise ValueError(f"T must be nonnegative, got {self.T}")
        if self.d < 1:
            raise ValueError(f"d must be positive, got {self.d}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {self.seed}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class StrictModeError(ValueError):
    """Raised when a strict-mode run is outside the validated ranges."""

    def __init__(self, failures: list[str]):
        self.failures = list(failures)
        super().__init__(
            "strict mode refused the configuration; failed checks: "
            + "; ".join(failures)
        )


def strict_mode_failures(config: SGLDConfig, model: LossModel) -> list[str]:
    """Which validated-range checks the configuration violates.

    Checks: beta >= 2/m, eta < m/(5 M^2), eta < 4 beta c_LS, eta < 1.
    The log-Sobolev constant uses the strongly-convex route when the model
    has one, otherwise the general dissipative route (which itself needs
    beta >= 2/m; if that fails the c_LS check is reported as unavailable).
    """
    lc = model.constants()
    failures = []
    if config.beta < 2.0 / lc.m:
        failures.append(f"beta >= 2/m violated: beta={config.beta} < {2.0 / lc.m}")
    cap_m = lc.m / (5.0 * lc.M**2)
    if config.eta >= cap_m:
        failures.append(f"eta < m/(5 M^2) violated: eta={config.eta} >= {cap_m}")
    if config.eta >= 1.0:
        failures.append(f"eta < 1 violated: eta={config.eta}")
    mode = "strongly_convex" if lc.R is not None else "general_dissipative"
    try:
        c_ls = lsi_constant(lc, config.beta, config.d, mode=mode)
    except ValueError:
        failures.append("eta < 4 beta c_LS unavailable: c_LS undefined "
                        "(general dissipative route requires beta >= 2/m)")
    else:
        cap_ls = 4.0 * config.beta * c_ls
        if config.eta >= cap_ls:
            failures.append(f"eta < 4 beta c_LS violated: eta={config.eta} >= {cap_ls}")
    return failures


@dataclass
class ChainTrace:
    """Recorded output of one SGLD chain.

    `states` holds every state when T <= 10^4, otherwise every
    ceil(T/10^4)-th state plus the final one; `stored_steps` gives the step
    index of each stored row. The scalar series are always complete:
    `w_norm_sq` has T+1 entries (one per state); the gradient series have
    one entry per update, `grad_var_sample[t]` being the squared deviation
    ||grad_batch(W_t) - grad_full(W_t)||^2 of the minibatch gradient
    actually used at step t.
    """

    config: SGLDConfig
    dataset_id: str
    states: np.ndarray
    stored_steps: np.ndarray
    w_norm_sq: np.ndarray
    grad_var_sample: np.ndarray
    grad_fullbatch_norm: np.ndarray
    grad_minibatch_norm: np.ndarray
    noise_variates: int

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    def validate(self) -> None:
        T = self.config.T
        if self.w_norm_sq.shape != (T + 1,):
            raise ValueError("w_norm_sq must have one entry per state")
        for name in ("grad_var_sample", "grad_fullbatch_norm", "grad_minibatch_norm"):
            if getattr(self, name).shape != (T,):
                raise ValueError(f"{name} must have one entry per update")
        if self.stored_steps.shape[0] != self.states.shape[0]:
            raise ValueError("stored_steps and states disagree")
        if np.any(self.w_norm_sq < 0):
            raise ValueError("norms must be nonnegative")

    def to_csv(self, path) -> None:
        """Columnar per-step record; update columns are empty on the final row."""
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t", "w_norm_sq", "grad_var_sample",
                            "grad_fullbatch_norm", "grad_minibatch_norm"])
            T = self.config.T
            for t in range(T + 1):
                if t < T:
                    writer.writerow([t, repr(float(self.w_norm_sq[t])),
                                     repr(float(self.grad_var_sample[t])),
                                     repr(float(self.grad_fullbatch_norm[t])),
                                     repr(float(self.grad_minibatch_norm[t]))])
                else:
                    writer.writerow([t, repr(float(self.w_norm_sq[t])), "", "", ""])

    def save_final_state(self, path) -> None:
        np.save(path, self.final_state)


def dataset_fingerprint(dataset: np.ndarray) -> str:
    """Stable short identifier of a dataset's exact contents."""
    dataset = np.ascontiguousarray(dataset, dtype=float)
    h = hashlib.sha256()
    h.update(str(dataset.shape).encode())
    h.update(dataset.tobytes())
    return h.hexdigest()[:16]


# ------------------------------------------------------------ primitive ops


def sample_initial(d: int, s_sq: float, rng: np.random.Generator) -> np.ndarray:
    """Draw W_0 from the centered Gaussian with per-coordinate variance s_sq."""
    if not s_sq > 0:
        raise ValueError(f"s_sq must be positive, got {s_sq}")
    if d < 1:
        raise ValueError(f"d must be positive, got {d}")
    return math.sqrt(s_sq) * rng.standard_normal(d)


def sample_minibatch(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly random size-k index subset via partial Fisher-Yates.

    Consumes k integer draws (one vectorized call); none when k = n, where
    the full index set is the only subset.
    """
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= n, got k={k}, n={n}")
    if k == n:
        return np.arange(n)
    offsets = rng.integers(0, n - np.arange(k))
    idx = np.arange(n)
    for j in range(k):
        target = j + offsets[j]
        idx[j], idx[target] = idx[target], idx[j]
    return idx[:k]


def sgld_step(
    w: np.ndarray,
    model: LossModel,
    dataset: np.ndarray,
    batch: np.ndarray,
    eta: float,
    beta: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """One SGLD update; always consumes exactly d Gaussian variates.

    eta = 0 is allowed and returns w unchanged (drift and noise scale both
    vanish), still consuming the noise draw so stream positions match.
    """
    w = np.asarray(w, dtype=float)
    if eta < 0:
        raise ValueError(f"eta must be nonnegative, got {eta}")
    if not beta > 0:
        raise ValueError(f"beta must be positive, got {beta}")
    batch = np.asarray(batch)
    if batch.size == 0:
        raise ValueError("batch must be nonempty")
    if w.shape != (model.d,):
        raise ValueError(f"parameter dimension mismatch: {w.shape} vs ({model.d},)")
    g = model.grad_minibatch(w[None], dataset[batch][None])[0]
    xi = rng.standard_normal(w.shape[0])
    return w - eta * g + math.sqrt(2.0 * eta / beta) * xi


# ------------------------------------------------------------------- engine


def _fy_subset_rows(offsets: np.ndarray, n: int) -> np.ndarray:
    """Apply partial Fisher-Yates swaps rowwise; offsets is (c, k)."""
    c, k = offsets.shape
    base = np.broadcast_to(np.arange(n), (c, n)).copy()
    rows = np.arange(c)
    for j in range(k):
        target = j + offsets[:, j]
        tmp = base[rows, j].copy()
        base[rows, j] = base[rows, target]
        base[rows, target] = tmp
    return base[:, :k]


def _run_chains_lockstep(
    config: SGLDConfig,
    model: LossModel,
    datasets: np.ndarray,
    chain_seqs: list[np.random.SeedSequence],
    dataset_ids: list[str],
) -> list[ChainTrace]:
    """Advance several chains together, vectorized across chains.

    `datasets` is (c, n, z_dim), row i being chain i's dataset (a broadcast
    view when chains share one). Per-chain RNG draws are issued chain by
    chain, so each chain's stream is independent of how chains are grouped.
    """
    c = len(chain_seqs)
    T, d, n, k = config.T, config.d, config.n, config.k
    eta, beta = config.eta, config.beta
    noise_scale = math.sqrt(2.0 * eta / beta)

    rng_init, rng_batch, rng_noise = [], [], []
    for seq in chain_seqs:
        init_s, batch_s, noise_s = seq.spawn(3)
        rng_init.append(np.random.default_rng(init_s))
        rng_batch.append(np.random.default_rng(batch_s))
        rng_noise.append(np.random.default_rng(noise_s))

    W = np.stack([sample_initial(d, config.s_sq, r) for r in rng_init])

    stride = 1 if T <= STATE_STORE_CAP else -(-T // STATE_STORE_CAP)
    stored_steps = list(range(0, T + 1, stride))
    if stored_steps[-1] != T:
        stored_steps.append(T)
    stored_steps = np.asarray(stored_steps)
    store_pos = {int(t): i for i, t in enumerate(stored_steps)}

    states = np.empty((c, len(stored_steps), d))
    w_norm_sq = np.empty((c, T + 1))
    grad_var = np.empty((c, T))
    grad_full_norm = np.empty((c, T))
    grad_mini_norm = np.empty((c, T))

    w_norm_sq[:, 0] = np.einsum("ij,ij->i", W, W)
    if 0 in store_pos:
        states[:, store_pos[0]] = W
    noise_count = 0

    high = (n - np.arange(k)).astype(np.int64)
    for start in range(0, T, STEP_CHUNK):
        cl = min(STEP_CHUNK, T - start)
        if k < n:
            offs = np.stack([r.integers(0, high, size=(cl, k)) for r in rng_batch])
        xis = np.stack([r.standard_normal((cl, d)) for r in rng_noise])
        noise_count += cl * d

        for s in range(cl):
            t = start + s
            if k < n:
                idx = _fy_subset_rows(offs[:, s], n)
                Zb = np.take_along_axis(datasets, idx[:, :, None], axis=1)
            else:
                Zb = datasets
            G = model.grad_minibatch(W, Zb)
            Gfull = G if k == n else model.grad_minibatch(W, datasets)
            diff = G - Gfull
            grad_var[:, t] = np.einsum("ij,ij->i", diff, diff)
            grad_full_norm[:, t] = np.sqrt(np.einsum("ij,ij->i", Gfull, Gfull))
            grad_mini_norm[:, t] = np.sqrt(np.einsum("ij,ij->i", G, G))

            W = W - eta * G + noise_scale * xis[:, s]
            w_norm_sq[:, t + 1] = np.einsum("ij,ij->i", W, W)
            if (t + 1) in store_pos:
                states[:, store_pos[t + 1]] = W

    return [
        ChainTrace(
            config=config,
            dataset_id=dataset_ids[i],
            states=states[i],
            stored_steps=stored_steps.copy(),
            w_norm_sq=w_norm_sq[i],
            grad_var_sample=grad_var[i],
            grad_fullbatch_norm=grad_full_norm[i],
            grad_minibatch_norm=grad_mini_norm[i],
            noise_variates=noise_count,
        )
        for i in range(c)
    ]


def run_chain(
    config: SGLDConfig,
    model: LossModel,
    dataset: np.ndarray,
    seed_seq: np.random.SeedSequence | None = None,
) -> ChainTrace:
    """Run one chain; deterministic given (seed, config, dataset).

    `seed_seq` overrides the default SeedSequence(config.seed); ensembles
    use this to hand each chain its spawned substream.
    """
    dataset = np.asarray(dataset, dtype=float)
    if dataset.shape[0] != config.n:
        raise ValueError(f"dataset has {dataset.shape[0]} rows, config.n = {config.n}")
    if dataset.ndim != 2 or dataset.shape[1] != model.z_dim:
        raise ValueError(f"dataset must be (n, {model.z_dim}), got {dataset.shape}")
    if config.d != model.d:
        raise ValueError(f"config.d = {config.d} but model.d = {model.d}")
    if config.strict_mode:
        failures = strict_mode_failures(config, model)
        if failures:
            raise StrictModeError(failures)
    if seed_seq is None:
        seed_seq = np.random.SeedSequence(config.seed)
    trace = _run_chains_lockstep(
        config, model, dataset[None], [seed_seq], [dataset_fingerprint(dataset)]
    )[0]
    trace.validate()
    return trace


def run_ensemble(
    config: SGLDConfig,
    model: LossModel,
    dataset_sampler=None,
    n_chains: int = 1,
    n_datasets: int = 1,
) -> list[ChainTrace]:
    """Independent chains over freshly sampled datasets.

    Spawn layout from SeedSequence(config.seed): one child per dataset;
    each dataset child spawns 1 + n_chains sequences, the first for the
    dataset sample and the rest one per chain. Returns traces grouped
    dataset-major; `n_chains=1, n_datasets=1` reproduces `run_chain` on
    the sampled dataset bitwise.

    Args:
        dataset_sampler: callable (rng, n) -> (n, z_dim) array; defaults to
            the model's data distribution.
    """
    if n_chains < 1 or n_datasets < 1:
        raise ValueError("n_chains and n_datasets must be positive")
    if dataset_sampler is None:
        dataset_sampler = model.sample_data
    if config.strict_mode:
        failures = strict_mode_failures(config, model)
        if failures:
            raise StrictModeError(failures)

    root = np.random.SeedSequence(config.seed)
    chain_seqs: list[np.random.SeedSequence] = []
    dataset_ids: list[str] = []
    per_dataset: list[np.ndarray] = []
    for ds_seq in root.spawn(n_datasets):
        children = ds_seq.spawn(1 + n_chains)
        dataset = np.asarray(
            dataset_sampler(np.random.default_rng(children[0]), config.n), dtype=float
        )
        if dataset.shape != (config.n, model.z_dim):
            raise ValueError(f"dataset sampler returned shape {dataset.shape}, "
                             f"expected ({config.n}, {model.z_dim})")
        per_dataset.append(dataset)
        fp = dataset_fingerprint(dataset)
        chain_seqs.extend(children[1:])
        dataset_ids.extend([fp] * n_chains)

    if n_datasets == 1:
        datasets = np.broadcast_to(per_dataset[0],
                                   (n_chains, config.n, model.z_dim))
    else:
        datasets = np.repeat(np.stack(per_dataset), n_chains, axis=0)
    traces = _run_chains_lockstep(config, model, datasets, chain_seqs, dataset_ids)
    for tr in traces:
        tr.validate()
    return traces
