"""
Multi-task Gaussian process over (hormone, day).

The covariance of block ``b`` is ``K_b (x) k_b(t, t') + D_b (x) I`` with an
exponential periodic time kernel ``k_b``, a low-rank-plus-diagonal task
matrix ``K_b = V V^T + diag(v)`` and per-hormone noise ``D_b``.  Blocks are
independent, so the full matrix is block diagonal across blocks.  Vectors
over (hormone, day) pairs are always hormone-major: all days of hormone 0,
then all days of hormone 1, and so on, in global ``Hormone`` order.
"""

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import linalg

from .hormones import HORMONE_NAMES, N_HORMONES, T_DAYS, Hormone

log = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)

FULL = ((0, 1, 2, 3, 4),)
BLOCKWISE = ((int(Hormone.E), int(Hormone.P), int(Hormone.Ih)), (int(Hormone.FSH), int(Hormone.LH)))
INDEPENDENT = tuple((h,) for h in range(N_HORMONES))
BLOCK_STRUCTURES = {"full": FULL, "blockwise": BLOCKWISE, "independent": INDEPENDENT}

JITTER_START = 1e-8
JITTER_MAX = 1e-4

# Box on log-parameters during fitting; keeps the Cholesky factorizable.
LENGTHSCALE_BOUNDS = (0.02, 50.0)
NOISE_BOUNDS = (1e-6, 10.0)
TASK_DIAG_BOUNDS = (1e-6, 100.0)
PERIOD_BOUNDS = (5.0, 2.0 * T_DAYS)


class CholeskyError(np.linalg.LinAlgError):
    pass


class FitError(RuntimeError):
    """Every restart produced a non-finite likelihood."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


def check_blocks(blocks):
    """Validate a partition of the five hormones and return it as tuples."""
    blocks = tuple(tuple(int(h) for h in b) for b in blocks)
    flat = [h for b in blocks for h in b]
    if sorted(flat) != list(range(N_HORMONES)):
        raise ValueError(f"blocks {blocks} must partition hormones 0..{N_HORMONES - 1}")
    if any(len(b) == 0 for b in blocks):
        raise ValueError("empty block")
    return blocks


# ---------------------------------------------------------------------------
# Data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ObservationSet:
    """Simultaneous 5-hormone measurements on a set of days (standardized units)."""

    days: np.ndarray
    values: np.ndarray  # (n_days, 5)
    individual_id: str = ""

    def __post_init__(self):
        days = np.asarray(self.days, dtype=int).ravel()
        values = np.asarray(self.values, dtype=float).reshape(days.size, N_HORMONES)
        if days.size and np.any(np.diff(days) <= 0):
            raise ValueError("observation days must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise ValueError("observations must be finite")
        object.__setattr__(self, "days", days)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_series(cls, values, days, individual_id=""):
        """Pick 1-based ``days`` out of an (H, T) matrix."""
        days = np.unique(np.asarray(days, dtype=int))
        return cls(days=days, values=np.asarray(values)[:, days - 1].T, individual_id=individual_id)

    def __len__(self):
        return self.days.size


@dataclass(frozen=True)
class BlockParams:
    hormones: tuple
    period: float
    lengthscale: float
    V: np.ndarray  # (H_b, rank)
    v: np.ndarray  # (H_b,)
    noise: np.ndarray  # (H_b,)

    @property
    def task_matrix(self):
        return task_kernel(self.V, self.v)

    def to_dict(self):
        return {
            "hormones": [HORMONE_NAMES[h] for h in self.hormones],
            "period": self.period,
            "lengthscale": self.lengthscale,
            "V": self.V.tolist(),
            "v": self.v.tolist(),
            "noise": self.noise.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            hormones=tuple(int(Hormone[name]) for name in d["hormones"]),
            period=float(d["period"]),
            lengthscale=float(d["lengthscale"]),
            V=np.asarray(d["V"], dtype=float).reshape(len(d["hormones"]), -1),
            v=np.asarray(d["v"], dtype=float),
            noise=np.asarray(d["noise"], dtype=float),
        )


@dataclass(frozen=True)
class MgpHyperparams:
    blocks: tuple  # of BlockParams
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def structure(self):
        return tuple(b.hormones for b in self.blocks)

    @property
    def noise(self):
        d = np.empty(N_HORMONES)
        for b in self.blocks:
            d[list(b.hormones)] = b.noise
        return d

    def with_noise(self, value):
        """Copy with every per-hormone noise variance set to ``value``."""
        return replace(
            self,
            blocks=tuple(replace(b, noise=np.full(len(b.hormones), float(value))) for b in self.blocks),
        )

    def to_dict(self):
        return {
            "blocks": [b.to_dict() for b in self.blocks],
            "diagnostics": self.diagnostics,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            blocks=tuple(BlockParams.from_dict(b) for b in d["blocks"]),
            diagnostics=dict(d.get("diagnostics", {})),
        )


@dataclass(frozen=True)
class PosteriorSeries:
    """Latent posterior over the daily grid.

    ``cov`` is the joint (H*T, H*T) covariance in hormone-major order;
    entries between different blocks are exactly zero.
    """

    mean: np.ndarray  # (H, T)
    cov: np.ndarray  # (H*T, H*T)
    days: np.ndarray
    structure: tuple = FULL
    individual_id: str = ""

    @property
    def var(self):
        return np.diag(self.cov).reshape(self.mean.shape).copy()

    @property
    def std(self):
        return np.sqrt(np.clip(self.var, 0.0, None))


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 500
    learning_rate: float = 0.05
    restarts: int = 3
    rank: int = None  # None: 2 for multi-hormone blocks, 1 for singletons
    seed: int = 0


# ---------------------------------------------------------------------------
# Kernels and covariance
# ---------------------------------------------------------------------------


def periodic_kernel(t, t2, period, lengthscale):
    """Exponential periodic kernel ``exp(-2 sin^2(pi |t - t'| / p) / l^2)``.

    Broadcasts over ``t`` and ``t2``.
    """
    s = np.sin(np.pi * np.abs(np.subtract(t, t2)) / period)
    return np.exp(-2.0 * s * s / (lengthscale * lengthscale))


def _periodic_with_grads(tau, period, lengthscale):
    """Kernel matrix on lags ``tau`` and its derivatives w.r.t. log p and log l."""
    arg = np.pi * tau / period
    s = np.sin(arg)
    l2 = lengthscale * lengthscale
    k = np.exp(-2.0 * s * s / l2)
    # d/dp of -2 sin^2(pi tau / p) / l^2 = 2 pi tau sin(2 pi tau / p) / (l^2 p^2)
    dk_dlogp = k * (2.0 * arg * np.sin(2.0 * arg) / l2)
    dk_dlogl = k * (4.0 * s * s / l2)
    return k, dk_dlogp, dk_dlogl


def task_kernel(V, v):
    """Coregionalization matrix ``V V^T + diag(v)``."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    v = np.asarray(v, dtype=float)
    if V.shape[0] != v.size:
        raise ValueError(f"V has {V.shape[0]} rows but v has {v.size} entries")
    return V @ V.T + np.diag(v)


def cholesky_with_jitter(A, start=JITTER_START, max_jitter=JITTER_MAX):
    """Lower Cholesky factor of ``A``, escalating diagonal jitter on failure.

    The first attempt is jitter-free; then ``start * mean(diag(A))`` is added
    and multiplied by ten until ``max_jitter * mean(diag(A))``.

    Returns
    -------
    L : ndarray
    jitter : float
        Absolute jitter that was added (0.0 if none was needed).
    """
    scale = float(np.mean(np.diag(A))) if A.size else 1.0
    scale = scale if scale > 0 else 1.0
    jitter = 0.0
    rel = start
    n = A.shape[0]
    while True:
        try:
            L = linalg.cholesky(A + jitter * np.eye(n), lower=True, check_finite=False)
            if np.all(np.isfinite(L)):
                return L, jitter
        except linalg.LinAlgError:
            pass
        if rel > max_jitter * (1 + 1e-9):
            raise CholeskyError(f"matrix not positive definite even with jitter {jitter:.3g}")
        jitter = rel * scale
        rel *= 10.0


def _block_index(hormones, n):
    """Global hormone-major indices of a block's (hormone, day) entries."""
    return (np.asarray(hormones)[:, None] * n + np.arange(n)[None, :]).ravel()


def block_covariance(bp, days, days2=None, with_noise=False):
    """``K_b (x) k_b`` between two day lists (block-local hormone-major order)."""
    days = np.asarray(days, dtype=float)
    days2 = days if days2 is None else np.asarray(days2, dtype=float)
    k = periodic_kernel(days[:, None], days2[None, :], bp.period, bp.lengthscale)
    S = np.kron(bp.task_matrix, k)
    if with_noise:
        if days2 is not days and (days2.shape != days.shape or np.any(days2 != days)):
            raise ValueError("noise only applies to a square covariance")
        S[np.diag_indices_from(S)] += np.repeat(bp.noise, days.size)
    return S


def build_covariance(hyper, days, with_noise=True):
    """Joint covariance over all (hormone, day) pairs, hormone-major.

    Parameters
    ----------
    hyper : MgpHyperparams
    days : array_like of int
    with_noise : bool
        Add the per-hormone noise variance on the diagonal.
    """
    days = np.asarray(days)
    if days.size == 0:
        raise ValueError("need at least one day")
    n = days.size
    S = np.zeros((N_HORMONES * n, N_HORMONES * n))
    for bp in hyper.blocks:
        idx = _block_index(bp.hormones, n)
        S[np.ix_(idx, idx)] = block_covariance(bp, days, with_noise=with_noise)
    return S


# ---------------------------------------------------------------------------
# Marginal likelihood
# ---------------------------------------------------------------------------


def _block_targets(obs, hormones):
    return obs.values[:, list(hormones)].T.ravel()


def log_marginal_likelihood(hyper, obs):
    """``log N(y | 0, Sigma_obs)`` summed over independent blocks."""
    if len(obs) == 0:
        raise ValueError("empty observation set")
    total = 0.0
    for bp in hyper.blocks:
        y = _block_targets(obs, bp.hormones)
        S = block_covariance(bp, obs.days, with_noise=True)
        L, _ = cholesky_with_jitter(S)
        alpha = linalg.cho_solve((L, True), y, check_finite=False)
        total += -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * LOG_2PI
    return float(total)


def _pack(bp):
    return np.concatenate(
        [[math.log(bp.period), math.log(bp.lengthscale)], bp.V.ravel(), np.log(bp.v), np.log(bp.noise)]
    )


def _unpack(theta, hormones, rank):
    hb = len(hormones)
    i = 2 + hb * rank
    return BlockParams(
        hormones=tuple(hormones),
        period=float(np.exp(theta[0])),
        lengthscale=float(np.exp(theta[1])),
        V=theta[2:i].reshape(hb, rank).copy(),
        v=np.exp(theta[i : i + hb]),
        noise=np.exp(theta[i + hb : i + 2 * hb]),
    )


def _box(hb, rank):
    """Lower/upper bounds on the packed log-parameter vector."""
    lo = np.full(2 + hb * rank + 2 * hb, -np.inf)
    hi = np.full_like(lo, np.inf)
    lo[0], hi[0] = np.log(PERIOD_BOUNDS)
    lo[1], hi[1] = np.log(LENGTHSCALE_BOUNDS)
    i = 2 + hb * rank
    lo[i : i + hb], hi[i : i + hb] = np.log(TASK_DIAG_BOUNDS)
    lo[i + hb :], hi[i + hb :] = np.log(NOISE_BOUNDS)
    return lo, hi


def block_lml_and_grad(theta, hormones, rank, days, y):
    """Block log marginal likelihood and its gradient w.r.t. packed log-parameters.

    Returns ``(-inf, None)`` when the covariance cannot be factorized.
    """
    hb = len(hormones)
    n = len(days)
    bp = _unpack(theta, hormones, rank)
    tau = np.abs(np.subtract.outer(days, days)).astype(float)
    k, dk_dlogp, dk_dlogl = _periodic_with_grads(tau, bp.period, bp.lengthscale)
    K = bp.task_matrix
    S = np.kron(K, k)
    S[np.diag_indices_from(S)] += np.repeat(bp.noise, n)
    try:
        L = linalg.cholesky(S, lower=True, check_finite=False)
    except linalg.LinAlgError:
        return -np.inf, None
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * y.size * LOG_2PI
    if not np.isfinite(lml):
        return -np.inf, None

    # d lml / d S = 0.5 * W with W = alpha alpha^T - S^-1
    Sinv = linalg.cho_solve((L, True), np.eye(S.shape[0]), check_finite=False)
    W4 = (np.outer(alpha, alpha) - Sinv).reshape(hb, n, hb, n)
    G_K = np.einsum("atbs,ts->ab", W4, k)
    Wt = np.einsum("atbs,ab->ts", W4, K)
    grad = np.empty_like(theta)
    grad[0] = 0.5 * np.sum(Wt * dk_dlogp)
    grad[1] = 0.5 * np.sum(Wt * dk_dlogl)
    i = 2 + hb * rank
    grad[2:i] = (G_K @ bp.V).ravel()
    grad[i : i + hb] = 0.5 * np.diag(G_K) * bp.v
    grad[i + hb :] = 0.5 * np.einsum("atat->a", W4) * bp.noise
    return float(lml), grad


def log_marginal_likelihood_grad(hyper, obs):
    """Gradient of the log marginal likelihood, one packed vector per block.

    Block vectors are ``[log p, log l, vec(V), log v, log d]``.
    """
    grads = []
    for bp in hyper.blocks:
        rank = bp.V.shape[1]
        _, g = block_lml_and_grad(
            _pack(bp), bp.hormones, rank, obs.days.astype(float), _block_targets(obs, bp.hormones)
        )
        if g is None:
            raise CholeskyError("covariance not positive definite")
        grads.append(g)
    return grads


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def default_rank(n_hormones):
    return 2 if n_hormones >= 2 else 1


def init_hyperparams(blocks, period=29.0, rng=None, rank=None):
    """Starting point: p = cycle length, l = 1, V ~ N(0, 0.1^2), v = 0.5, d = 0.1."""
    rng = np.random.default_rng(0) if rng is None else rng
    out = []
    for hormones in check_blocks(blocks):
        hb = len(hormones)
        r = default_rank(hb) if rank is None else rank
        out.append(
            BlockParams(
                hormones=hormones,
                period=float(period),
                lengthscale=1.0,
                V=0.1 * rng.standard_normal((hb, r)),
                v=np.full(hb, 0.5),
                noise=np.full(hb, 0.1),
            )
        )
    return MgpHyperparams(blocks=tuple(out))


def _adam_ascent(theta0, objective, iterations, lr, lo, hi):
    """Projected Adam ascent keeping the best iterate seen.

    A non-finite objective reverts to the best point and halves the step.
    """
    b1, b2, eps = 0.9, 0.999, 1e-8
    theta = np.clip(theta0, lo, hi)
    f, g = objective(theta)
    start = f
    best_f, best_theta = f, theta.copy()
    if not np.isfinite(f):
        return theta, f, start
    m = np.zeros_like(theta)
    s = np.zeros_like(theta)
    for it in range(1, iterations + 1):
        m = b1 * m + (1 - b1) * g
        s = b2 * s + (1 - b2) * g * g
        step = lr * (m / (1 - b1**it)) / (np.sqrt(s / (1 - b2**it)) + eps)
        candidate = np.clip(theta + step, lo, hi)
        f_new, g_new = objective(candidate)
        if not np.isfinite(f_new):
            theta = best_theta.copy()
            lr *= 0.5
            m[:] = 0.0
            s[:] = 0.0
            f, g = objective(theta)
            continue
        theta, f, g = candidate, f_new, g_new
        if f > best_f:
            best_f, best_theta = f, theta.copy()
    return best_theta, best_f, start


def fit(obs, blocks=BLOCKWISE, init=None, config=None, period=29.0):
    """Maximize the log marginal likelihood, block by block.

    Parameters
    ----------
    obs : ObservationSet
    blocks : sequence of hormone-index tuples
    init : MgpHyperparams, optional
        Start of the first restart.  Defaults to :func:`init_hyperparams`
        with ``period`` as the period.
    config : FitConfig, optional
    period : float
        Period initialization (the individual's cycle length, if known).

    Returns
    -------
    MgpHyperparams
        With ``diagnostics`` holding the final likelihood, per-block restart
        likelihoods and iteration count.
    """
    config = FitConfig() if config is None else config
    blocks = check_blocks(blocks)
    rng = np.random.default_rng(config.seed)
    if init is None:
        init = init_hyperparams(blocks, period=period, rng=rng, rank=config.rank)
    if init.structure != blocks:
        raise ValueError(f"init structure {init.structure} does not match blocks {blocks}")

    if len(obs) < 4 or config.iterations == 0:
        status = "too few observations" if len(obs) < 4 else "no iterations"
        if len(obs) < 4:
            log.debug("%s: %d observed days, returning init", obs.individual_id, len(obs))
        diag = {"status": status, "iterations": 0, "restarts": 0}
        if len(obs):
            diag["log_likelihood"] = log_marginal_likelihood(init, obs)
        return replace(init, diagnostics=diag)

    days = obs.days.astype(float)
    fitted, restart_lmls, total = [], [], 0.0
    for b, bp0 in enumerate(init.blocks):
        rank = bp0.V.shape[1]
        hb = len(bp0.hormones)
        y = _block_targets(obs, bp0.hormones)
        lo, hi = _box(hb, rank)

        def objective(theta):
            return block_lml_and_grad(theta, bp0.hormones, rank, days, y)

        best_theta, best_f, lmls = None, -np.inf, []
        for r in range(config.restarts):
            theta0 = _pack(bp0)
            if r > 0:
                theta0[1] += 0.5 * rng.standard_normal()
                theta0[2 : 2 + hb * rank] = 0.1 * rng.standard_normal(hb * rank)
            theta, f, start = _adam_ascent(theta0, objective, config.iterations, config.learning_rate, lo, hi)
            lmls.append(float(f))
            if np.isfinite(f) and f > best_f:
                best_theta, best_f = theta, f
        if best_theta is None:
            raise FitError(
                f"{obs.individual_id}: all restarts diverged for block {bp0.hormones}",
                best=MgpHyperparams(blocks=tuple(fitted)),
            )
        fitted.append(_unpack(best_theta, bp0.hormones, rank))
        restart_lmls.append(lmls)
        total += best_f
    diag = {
        "status": "ok",
        "log_likelihood": float(total),
        "restart_log_likelihoods": restart_lmls,
        "iterations": config.iterations,
        "restarts": config.restarts,
    }
    return MgpHyperparams(blocks=tuple(fitted), diagnostics=diag)


# ---------------------------------------------------------------------------
# Posterior
# ---------------------------------------------------------------------------


def _block_posterior(bp, obs, query, full_cov=True):
    y = _block_targets(obs, bp.hormones)
    S = block_covariance(bp, obs.days, with_noise=True)
    L, _ = cholesky_with_jitter(S)
    Kq = block_covariance(bp, obs.days, query)
    alpha = linalg.cho_solve((L, True), y, check_finite=False)
    mean = Kq.T @ alpha
    A = linalg.solve_triangular(L, Kq, lower=True, check_finite=False)
    if full_cov:
        cov = block_covariance(bp, query) - A.T @ A
        return mean, cov
    k0 = periodic_kernel(0.0, 0.0, bp.period, bp.lengthscale)
    var = np.repeat(np.diag(bp.task_matrix), len(query)) * k0 - np.sum(A * A, axis=0)
    return mean, var


def posterior(hyper, obs, query_days=None):
    """Gaussian conditioning of the latent (noise-free) process on ``obs``.

    Returns
    -------
    PosteriorSeries
        Mean (H, T) and joint covariance over ``query_days`` (default 1..105).
    """
    query = np.arange(1, T_DAYS + 1) if query_days is None else np.asarray(query_days)
    n = query.size
    mean = np.zeros(N_HORMONES * n)
    cov = np.zeros((N_HORMONES * n, N_HORMONES * n))
    for bp in hyper.blocks:
        idx = _block_index(bp.hormones, n)
        if len(obs) == 0:
            m, c = np.zeros(idx.size), block_covariance(bp, query)
        else:
            m, c = _block_posterior(bp, obs, query)
        mean[idx] = m
        cov[np.ix_(idx, idx)] = c
    cov = 0.5 * (cov + cov.T)
    return PosteriorSeries(
        mean=mean.reshape(N_HORMONES, n),
        cov=cov,
        days=query,
        structure=hyper.structure,
        individual_id=obs.individual_id,
    )


def posterior_marginals(hyper, obs, query_days=None):
    """Posterior mean and marginal variance, each (H, len(query_days)).

    Cheaper than :func:`posterior` when only per-point moments are needed.
    """
    query = np.arange(1, T_DAYS + 1) if query_days is None else np.asarray(query_days)
    n = query.size
    mean = np.zeros(N_HORMONES * n)
    var = np.zeros(N_HORMONES * n)
    for bp in hyper.blocks:
        idx = _block_index(bp.hormones, n)
        m, v = _block_posterior(bp, obs, query, full_cov=False)
        mean[idx] = m
        var[idx] = v
    return mean.reshape(N_HORMONES, n), np.clip(var, 0.0, None).reshape(N_HORMONES, n)


def draw_streams(post, S, rng):
    """Draw ``S`` joint sample paths ``mean + L eps``, shape (S, H, T).

    Blocks are factorized separately; cross-block covariance is zero so this
    is the Cholesky factor of the joint covariance up to a permutation.
    """
    if S < 1:
        raise ValueError(f"need at least one stream, got {S}")
    H, n = post.mean.shape
    eps = rng.standard_normal((S, H * n))
    out = np.broadcast_to(post.mean.ravel(), (S, H * n)).copy()
    for hormones in post.structure:
        idx = _block_index(hormones, n)
        C = post.cov[np.ix_(idx, idx)]
        if not np.any(C):
            continue
        L, _ = cholesky_with_jitter(C)
        out[:, idx] += eps[:, idx] @ L.T
    return out.reshape(S, H, n)
