"""Exact ground truth for verification: likelihood bounds along noising
paths, frequency-domain attenuation of noisy conditioning, and maximum-
likelihood combination of score estimates.

The likelihood bound is evaluated in closed form for Gaussian sequence laws:
every trajectory expectation reduces to affine-map algebra because the exact
posterior denoiser is linear in its observations. Grouping the bound's terms
per frame (each frame's final 1 -> 0 reversal is that frame's reconstruction
term, intermediate reversals are KL terms) avoids the degenerate conditionals
that appear when a frame reaches level 0 mid-path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import GaussianSeqSpec, posterior_affine
from .gaussian import exact_conditional_score as _exact_score
from .guidance import TaskSpec
from .schedules import DiscreteNoiseGrid, NoiseSchedule


class PathError(ValueError):
    pass


@dataclass(frozen=True)
class PathSpec:
    """A monotone sequence of per-frame integer noise levels 0..K."""

    steps: np.ndarray  # (N+1, T) int
    max_level: int

    def __post_init__(self):
        steps = np.asarray(self.steps, dtype=np.int64)
        object.__setattr__(self, "steps", steps)
        if steps.ndim != 2:
            raise PathError("path must be a (N+1, T) level array")
        if np.any(steps[0] != 0):
            raise PathError("path must begin at zero noise")
        if np.any(steps[-1] != self.max_level):
            raise PathError(f"path must terminate at full noise K={self.max_level}")
        diffs = np.diff(steps, axis=0)
        if np.any(diffs < 0):
            raise PathError("noise levels must be entrywise non-decreasing")
        if np.any((steps < 0) | (steps > self.max_level)):
            raise PathError("levels outside 0..K")

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0] - 1

    @property
    def n_frames(self) -> int:
        return self.steps.shape[1]

    def is_single_increment(self) -> bool:
        return bool(np.all(np.diff(self.steps, axis=0) <= 1))


def make_path(kind: str, n_frames: int, max_level: int, steps=None) -> PathSpec:
    """Construct a noising path.

    - full-sequence: all frames advance together, N = K.
    - autoregressive: levels increase lexicographically frame by frame,
      N = T * K.
    - custom: validate the provided (N+1, T) level array.
    """
    if n_frames < 1 or max_level < 1:
        raise PathError("need n_frames >= 1 and max_level >= 1")
    if kind == "full-sequence":
        rows = np.repeat(
            np.arange(max_level + 1, dtype=np.int64)[:, None], n_frames, axis=1
        )
    elif kind == "autoregressive":
        rows = [np.zeros(n_frames, dtype=np.int64)]
        for t in range(n_frames):
            for level in range(1, max_level + 1):
                nxt = rows[-1].copy()
                nxt[t] = level
                rows.append(nxt)
        rows = np.asarray(rows)
    elif kind == "custom":
        if steps is None:
            raise PathError("custom path needs explicit steps")
        rows = np.asarray(steps, dtype=np.int64)
    else:
        raise PathError(f"unknown path kind {kind!r}")
    return PathSpec(steps=rows, max_level=max_level)


def random_path(
    n_frames: int, max_level: int, rng: np.random.Generator
) -> PathSpec:
    """A random monotone single-increment path (random frame subsets advance)."""
    current = np.zeros(n_frames, dtype=np.int64)
    rows = [current.copy()]
    while np.any(current < max_level):
        eligible = np.flatnonzero(current < max_level)
        pick = eligible[rng.random(len(eligible)) < 0.5]
        if pick.size == 0:
            pick = eligible[[rng.integers(len(eligible))]]
        current[pick] += 1
        rows.append(current.copy())
    return PathSpec(steps=np.asarray(rows), max_level=max_level)


def elbo_coefficients(grid: DiscreteNoiseGrid) -> np.ndarray:
    """The per-level loss coefficients c_i = (1-alpha_i)^2 abar_{i-1} /
    (2 sigma_i^2 (1-abar_i)^2), i = 1..K, with the level-1 variance floored
    to beta_1 (the formulaic variance vanishes there)."""
    c = np.empty(grid.n_steps)
    for i in range(1, grid.n_steps + 1):
        var = _model_variance(grid, i)
        beta_i = grid.beta[i]
        abar_prev = grid.alpha_bar[i - 1]
        abar_i = grid.alpha_bar[i]
        c[i - 1] = beta_i**2 * abar_prev / (2.0 * var * (1.0 - abar_i) ** 2)
    return c


def _model_variance(grid: DiscreteNoiseGrid, i: int) -> float:
    """Reverse-kernel variance at level i; beta_1 at i=1 where the formula is 0."""
    if i == 1:
        return float(grid.beta[1])
    abar_prev = grid.alpha_bar[i - 1]
    return float(grid.beta[i] * (1.0 - math.sqrt(abar_prev)) / (1.0 - grid.alpha_bar[i]))


def _forward_posterior_coeffs(grid: DiscreteNoiseGrid, i: int):
    """q(x^{i-1} | x^i, x^0) = N(a x^i + b x^0, s2): returns (a, b, s2)."""
    beta_i = grid.beta[i]
    alpha_i = 1.0 - beta_i
    abar_prev = grid.alpha_bar[i - 1]
    abar_i = grid.alpha_bar[i]
    a = math.sqrt(alpha_i) * (1.0 - abar_prev) / (1.0 - abar_i)
    b = math.sqrt(abar_prev) * beta_i / (1.0 - abar_i)
    s2 = beta_i * (1.0 - abar_prev) / (1.0 - abar_i)
    return a, b, s2


@dataclass
class ElboResult:
    bound: float
    reconstruction: float
    per_step_kl: np.ndarray  # KL penalty per path step (steps with no KL: 0)
    prior_kl: float
    coefficients: np.ndarray  # c_i for i = 1..K


def elbo(
    spec: GaussianSeqSpec,
    data: np.ndarray,
    path: PathSpec,
    grid: DiscreteNoiseGrid,
    denoiser=None,
    mc_samples: int = 0,
    rng: np.random.Generator | None = None,
) -> ElboResult:
    """Evidence lower bound on the spec's log-likelihood of ``data`` along a path.

    With ``denoiser=None`` the generative kernels are the exact reverse
    conditionals of the noising process applied to the spec's law, and every
    expectation is closed form; the bound then telescopes to the exact
    log-likelihood up to floating-point error, and can never exceed it.

    Passing a denoiser (anything with ``predict``) switches to the scalar-
    variance kernel parameterization around the denoiser's clean-frame
    predictions, with squared errors estimated by Monte Carlo over
    ``mc_samples`` trajectory marginals; such bounds are valid for the
    corresponding generative chain and are reported with MC error.
    """
    if path.n_frames != spec.n_frames:
        raise PathError("path frame count does not match the spec")
    if path.max_level != grid.n_steps:
        raise PathError("path level count K must equal the discrete grid size")
    if not path.is_single_increment():
        raise PathError("bound evaluation requires single-increment paths")
    x0 = np.asarray(data, dtype=np.float64).reshape(spec.n_frames, spec.dim)
    prior = _prior_kl(grid, x0)
    recon = 0.0
    per_step = np.zeros(path.n_steps)
    for j in range(1, path.n_steps + 1):
        prev, cur = path.steps[j - 1], path.steps[j]
        changed = np.flatnonzero(cur > prev)
        if changed.size == 0:
            continue
        if denoiser is None:
            recon_j, kl_j = _exact_step_terms(spec, grid, prev, cur, changed, x0)
        else:
            recon_j, kl_j = _parametric_step_terms(
                spec, grid, prev, cur, changed, x0, denoiser, mc_samples, rng
            )
        recon += recon_j
        per_step[j - 1] = kl_j
    bound = recon - per_step.sum() - prior
    return ElboResult(
        bound=bound,
        reconstruction=recon,
        per_step_kl=per_step,
        prior_kl=prior,
        coefficients=elbo_coefficients(grid),
    )


def _exact_step_terms(spec, grid, prev, cur, changed, x0):
    """One path step with exact reverse kernels; returns (recon_j, kl_j).

    u = the changed frames at their target (cur-1) levels; y = the full
    sequence at the cur levels. The reverse kernel p(u | y) is the exact
    conditional of the joint noising law; frames landing at level 0
    contribute a reconstruction term (p evaluated at the data), the rest a
    KL between the forward posterior q(u | y, x0) and p.
    """
    dim = spec.dim
    flat0 = x0.reshape(-1)
    abar = grid.alpha_bar
    cc = spec.frame_indices(changed)
    lvl_u = cur[changed] - 1
    lvl_y = cur
    a_u = np.repeat(np.sqrt(abar[lvl_u]), dim)
    a_y = np.repeat(np.sqrt(abar[lvl_y]), dim)
    var_u = np.repeat(1.0 - abar[lvl_u], dim)
    var_y = np.repeat(1.0 - abar[lvl_y], dim)
    chain = np.sqrt(abar[cur[changed]] / abar[lvl_u])  # sqrt(alpha_i) per changed frame

    # unconditional joint of (u, y) under the spec's law
    sigma = spec.cov
    j_yy = a_y[:, None] * sigma * a_y[None, :] + np.diag(var_y)
    j_uu = a_u[:, None] * sigma[np.ix_(cc, cc)] * a_u[None, :] + np.diag(var_u)
    j_uy = a_u[:, None] * sigma[cc, :] * a_y[None, :]
    for row, t in enumerate(changed):
        cols = spec.frame_indices([t])
        rows = np.arange(row * dim, (row + 1) * dim)
        j_uy[rows, cols] += chain[row] * (1.0 - abar[lvl_u[row]])
    e_u = a_u * spec.mean[cc]
    e_y = a_y * spec.mean
    w_p = np.linalg.solve(j_yy, j_uy.T).T
    sig_p = j_uu - w_p @ j_uy.T
    b_p = e_u - w_p @ e_y

    # moments given the data: frames independent, same-frame chain cross-cov
    mu_y = a_y * flat0
    mu_u = a_u * flat0[cc]
    cross = np.zeros((len(cc), len(flat0)))
    for row, t in enumerate(changed):
        cols = spec.frame_indices([t])
        rows = np.arange(row * dim, (row + 1) * dim)
        cross[rows, cols] = chain[row] * (1.0 - abar[lvl_u[row]])

    det_rows = np.repeat(lvl_u == 0, dim)
    rand_rows = ~det_rows
    d_idx, r_idx = np.flatnonzero(det_rows), np.flatnonzero(rand_rows)

    recon_j = 0.0
    if d_idx.size:
        w_d = w_p[d_idx]
        m = flat0[cc][d_idx] - (w_d @ mu_y + b_p[d_idx])
        s_dd = sig_p[np.ix_(d_idx, d_idx)]
        spread = w_d * var_y[None, :] @ w_d.T
        sign, logdet = np.linalg.slogdet(s_dd)
        qform = m @ np.linalg.solve(s_dd, m) + np.trace(np.linalg.solve(s_dd, spread))
        recon_j = -0.5 * (d_idx.size * math.log(2.0 * math.pi) + logdet + qform)

    kl_j = 0.0
    if r_idx.size:
        if d_idx.size:
            gain = np.linalg.solve(
                sig_p[np.ix_(d_idx, d_idx)], sig_p[np.ix_(d_idx, r_idx)]
            ).T
            a2 = w_p[r_idx] - gain @ w_p[d_idx]
            c2 = b_p[r_idx] + gain @ (flat0[cc][d_idx] - b_p[d_idx])
            sig2 = sig_p[np.ix_(r_idx, r_idx)] - gain @ sig_p[np.ix_(d_idx, r_idx)]
        else:
            a2, c2, sig2 = w_p, b_p, sig_p
        # forward posterior q(u_rand | y, x0): per-frame scalar coefficients
        a_q = np.zeros_like(a2)
        c_q = np.zeros(r_idx.size)
        var_q = np.zeros(r_idx.size)
        for pos, row_coord in enumerate(r_idx):
            row = row_coord // dim
            i = int(cur[changed[row]])
            a_fw, b_fw, s2_fw = _forward_posterior_coeffs(grid, i)
            coord_in_frame = row_coord % dim
            col = spec.frame_indices([changed[row]])[coord_in_frame]
            a_q[pos, col] = a_fw
            c_q[pos] = b_fw * flat0[col]
            var_q[pos] = s2_fw
        diff_a = a2 - a_q
        m_delta = diff_a @ mu_y + (c2 - c_q)
        s_delta = diff_a * var_y[None, :] @ diff_a.T
        # correction: u_rand does not appear here, only y does; q and p means
        # are both affine in y alone given (x0, u_det), so this is complete
        sign2, logdet2 = np.linalg.slogdet(sig2)
        sol_q = np.linalg.solve(sig2, np.diag(var_q))
        qform = m_delta @ np.linalg.solve(sig2, m_delta) + np.trace(
            np.linalg.solve(sig2, s_delta)
        )
        kl_j = 0.5 * (
            np.trace(sol_q) - r_idx.size + logdet2 - float(np.log(var_q).sum()) + qform
        )
    return recon_j, kl_j


def _parametric_step_terms(spec, grid, prev, cur, changed, x0, denoiser, mc_samples, rng):
    """One path step with scalar-variance kernels around a denoiser's
    clean-frame predictions; squared errors by Monte Carlo."""
    dim = spec.dim
    err2 = _sq_errors(spec, grid, cur, x0, denoiser, mc_samples, rng)
    recon_j = 0.0
    kl_j = 0.0
    for t in changed:
        i = int(cur[t])
        var = _model_variance(grid, i)
        if i == 1:
            recon_j += -0.5 * dim * math.log(2.0 * math.pi * var) - err2[t] / (2.0 * var)
        else:
            _, b, s2 = _forward_posterior_coeffs(grid, i)
            kl = 0.5 * dim * (s2 / var - 1.0 - math.log(s2 / var))
            kl += b**2 * err2[t] / (2.0 * var)
            kl_j += kl
    return recon_j, kl_j


def _prior_kl(grid: DiscreteNoiseGrid, x0: np.ndarray) -> float:
    abar_k = grid.alpha_bar[-1]
    if abar_k == 0.0:
        return 0.0
    var = 1.0 - abar_k
    dim = x0.size
    return 0.5 * (dim * var + abar_k * float((x0**2).sum()) - dim - dim * math.log(var))


def _sq_errors(spec, grid, levels, x0, denoiser, mc_samples, rng):
    """E || x_t^0 - x0_hat_t(x^{levels}) ||^2 per frame, given the data."""
    a = np.sqrt(grid.alpha_bar[levels])
    s = np.sqrt(1.0 - grid.alpha_bar[levels])
    flat0 = x0.reshape(-1)
    if denoiser is None:
        w, b, _ = posterior_affine(spec, a, s)
        mu_y = np.repeat(a, spec.dim) * flat0
        mean_err = flat0 - (w @ mu_y + b)
        var_y = np.repeat(s**2, spec.dim)
        var_term = (w**2 * var_y[None, :]).sum(axis=1)
        per_coord = mean_err**2 + var_term
        return per_coord.reshape(spec.n_frames, spec.dim).sum(axis=1)
    if mc_samples < 1 or rng is None:
        raise PathError("neural-model bound needs mc_samples >= 1 and an rng")
    z = rng.standard_normal((mc_samples, spec.n_frames, spec.dim))
    y = a[None, :, None] * x0[None] + s[None, :, None] * z
    k_cont = levels / grid.n_steps
    pred = denoiser.predict(y, np.broadcast_to(k_cont, (mc_samples, spec.n_frames)))
    err = ((pred - x0[None]) ** 2).sum(axis=2).mean(axis=0)
    return err


def exact_conditional_score(
    spec: GaussianSeqSpec,
    task: TaskSpec,
    x_g_noised: np.ndarray,
    k,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """Score of the exact noised conditional p_k(x_G^k | x_H) for a task."""
    return _exact_score(
        spec, task.history, task.history_values, x_g_noised, k, schedule
    )


# ---------------------------------------------------------------------------
# Frequency-domain analysis


@dataclass(frozen=True)
class FourierSpec:
    """Power-law spectrum: Sigma_hat_x = C * diag(i^-alpha), i = 1..d."""

    d: int
    power_law_scale: float = 1.0  # C
    power_law_exponent: float = 0.0  # alpha

    def __post_init__(self):
        if self.d < 2 or self.d % 2 != 0:
            raise ValueError("dimension d must be even and >= 2")
        if self.power_law_scale <= 0 or self.power_law_exponent < 0:
            raise ValueError("need C > 0 and alpha >= 0")

    def spectrum(self) -> np.ndarray:
        i = np.arange(1, self.d + 1, dtype=np.float64)
        return self.power_law_scale * i ** (-self.power_law_exponent)


def real_dft_matrix(d: int) -> np.ndarray:
    """Real sin/cos-split transform F with F/sqrt(d) orthogonal.

    First half rows: sine frequencies 1..d/2-1 plus the alternating Nyquist
    row; second half: cosine frequencies 1..d/2-1 plus the constant row.
    Rows have squared norm d, so ||F x||^2 / d = ||x||^2 (Parseval).
    """
    if d < 2 or d % 2 != 0:
        raise ValueError("dimension d must be even and >= 2")
    i = np.arange(1, d + 1, dtype=np.float64)
    rows = []
    for freq in range(1, d // 2):
        rows.append(math.sqrt(2.0) * np.sin(2.0 * np.pi * i * freq / d))
    rows.append(np.cos(np.pi * i))  # alternating +-1
    for freq in range(1, d // 2):
        rows.append(math.sqrt(2.0) * np.cos(2.0 * np.pi * i * freq / d))
    rows.append(np.ones(d))
    return np.asarray(rows)


def fourier_attenuation(fspec: FourierSpec, sigma: float) -> np.ndarray:
    """Diagonal of S_hat(sigma): entries 1 / (1 + d sigma^2 i^alpha / C)."""
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    i = np.arange(1, fspec.d + 1, dtype=np.float64)
    return 1.0 / (
        1.0 + fspec.d * sigma**2 * i**fspec.power_law_exponent / fspec.power_law_scale
    )


# ---------------------------------------------------------------------------
# Maximum-likelihood score combination


@dataclass
class ScoreEnsembleSpec:
    """n score estimators with Gaussian errors; covariance over the stacked
    (n*d)-dimensional error vector."""

    n_estimators: int
    dim: int
    error_cov: np.ndarray

    def __post_init__(self):
        self.error_cov = np.asarray(self.error_cov, dtype=np.float64)
        nd = self.n_estimators * self.dim
        if self.error_cov.shape != (nd, nd):
            raise ValueError(f"error covariance must be ({nd}, {nd})")
        if not np.allclose(self.error_cov, self.error_cov.T, atol=1e-10):
            raise ValueError("error covariance must be symmetric")
        if np.linalg.eigvalsh(self.error_cov).min() <= 0:
            raise np.linalg.LinAlgError("error covariance must be positive definite")


def mle_weights(spec: ScoreEnsembleSpec) -> np.ndarray:
    """The (d x n*d) linear map (I^T Sigma^-1 I)^-1 I^T Sigma^-1."""
    n, d = spec.n_estimators, spec.dim
    stack = np.tile(np.eye(d), (n, 1))  # I: (n*d, d)
    sinv_i = np.linalg.solve(spec.error_cov, stack)
    gram = stack.T @ sinv_i
    return np.linalg.solve(gram, sinv_i.T)


def mle_combine(spec: ScoreEnsembleSpec, estimates: np.ndarray) -> np.ndarray:
    """Combine (n, d) stacked estimates into the MLE (d,) estimate."""
    estimates = np.asarray(estimates, dtype=np.float64)
    if estimates.shape != (spec.n_estimators, spec.dim):
        raise ValueError(
            f"estimates shape {estimates.shape} != ({spec.n_estimators}, {spec.dim})"
        )
    return mle_weights(spec) @ estimates.reshape(-1)


def mle_error_cov(spec: ScoreEnsembleSpec) -> np.ndarray:
    """Exact error covariance of the combined estimate: (I^T Sigma^-1 I)^-1."""
    n, d = spec.n_estimators, spec.dim
    stack = np.tile(np.eye(d), (n, 1))
    gram = stack.T @ np.linalg.solve(spec.error_cov, stack)
    return np.linalg.inv(gram)


def partition_example_mse(
    n: int, n_draws: int = 1_000_000, rng: np.random.Generator | None = None
) -> tuple[float, float]:
    """Complementary-error construction: n indicator estimators of a zero
    target, each wrong on its own probability-1/n cell. Returns the measured
    (single-estimator MSE, averaged-estimator MSE); the population values are
    1/n and 1/n^2."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = rng or np.random.default_rng(0)
    cells = rng.integers(0, n, size=n_draws)
    estimator_0 = (cells == 0).astype(np.float64)
    individual = float(np.mean(estimator_0**2))
    averaged_estimator = np.zeros(n_draws)
    for i in range(n):
        averaged_estimator += cells == i
    averaged_estimator /= n
    averaged = float(np.mean(averaged_estimator**2))
    return individual, averaged
