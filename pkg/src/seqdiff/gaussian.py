"""Exact joint-Gaussian sequence laws and their closed-form conditionals.

Everything here is deliberately dumb, dense linear algebra over the flattened
(T*D)-dimensional sequence space. These laws serve as ground truth for
denoisers, scores, sampler output distributions, and likelihood bounds, so
clarity and exactness win over scalability.

Frame-major flattening convention throughout: index (t, d) -> t * D + d.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .schedules import NoiseSchedule, Parameterization, validate_noise_level


class NonPSDError(ValueError):
    pass


def _check_psd(cov: np.ndarray, tol: float = 1e-10) -> None:
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise NonPSDError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise NonPSDError("covariance is not symmetric")
    eig = np.linalg.eigvalsh(cov)
    if eig.min() < -tol * max(1.0, eig.max()):
        raise NonPSDError(f"covariance has negative eigenvalue {eig.min():.3e}")


@dataclass
class GaussianSeqSpec:
    """A joint Gaussian law over a T-frame, D-dim-per-frame sequence.

    Construct either from an explicit (mean, cov) over T*D, or as a
    stationary AR(1) law (mean 0, unit marginal variance, correlation rho,
    independent across feature dims).

    ``readout`` / ``readout_noise`` optionally define a linear observation
    model y = A x + noise for Lemma-form conditional problems.
    """

    n_frames: int
    dim: int
    mean: np.ndarray
    cov: np.ndarray
    rho: float | None = None
    readout: np.ndarray | None = None
    readout_noise: np.ndarray | None = None
    _chol: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        n = self.n_frames * self.dim
        if self.mean.shape != (n,) or self.cov.shape != (n, n):
            raise NonPSDError(
                f"mean/cov shapes {self.mean.shape}/{self.cov.shape} "
                f"inconsistent with T={self.n_frames}, D={self.dim}"
            )
        _check_psd(self.cov)

    @classmethod
    def from_moments(cls, mean, cov, n_frames: int, dim: int) -> "GaussianSeqSpec":
        return cls(n_frames=n_frames, dim=dim, mean=mean, cov=cov)

    @classmethod
    def ar1(cls, rho: float, dim: int, n_frames: int) -> "GaussianSeqSpec":
        if not abs(rho) < 1:
            raise NonPSDError("AR(1) correlation must satisfy |rho| < 1")
        t = np.arange(n_frames)
        frame_cov = rho ** np.abs(t[:, None] - t[None, :])
        cov = np.kron(frame_cov, np.eye(dim))
        spec = cls(
            n_frames=n_frames,
            dim=dim,
            mean=np.zeros(n_frames * dim),
            cov=cov,
            rho=rho,
        )
        return spec

    @property
    def size(self) -> int:
        return self.n_frames * self.dim

    def window(self, n_frames: int) -> "GaussianSeqSpec":
        """The law of the leading n_frames frames (AR(1) stays AR(1))."""
        if n_frames > self.n_frames:
            raise ValueError(f"window of {n_frames} frames exceeds T={self.n_frames}")
        if self.rho is not None:
            return GaussianSeqSpec.ar1(self.rho, self.dim, n_frames)
        n = n_frames * self.dim
        return GaussianSeqSpec(
            n_frames=n_frames, dim=self.dim, mean=self.mean[:n], cov=self.cov[:n, :n]
        )

    def frame_indices(self, frames) -> np.ndarray:
        frames = np.asarray(sorted(frames), dtype=int)
        return (frames[:, None] * self.dim + np.arange(self.dim)[None, :]).reshape(-1)

    def sample(self, rng: np.random.Generator, n_samples: int) -> np.ndarray:
        """Draw (n_samples, T, D) sequences."""
        if self._chol is None:
            # tiny jitter tolerates PSD-singular covariances
            jitter = 1e-12 * np.trace(self.cov) / self.size
            self._chol = np.linalg.cholesky(self.cov + jitter * np.eye(self.size))
        z = rng.standard_normal((n_samples, self.size))
        flat = self.mean[None, :] + z @ self._chol.T
        return flat.reshape(n_samples, self.n_frames, self.dim)

    def log_likelihood(self, x: np.ndarray) -> float:
        """Exact log density of one (T, D) sequence."""
        flat = np.asarray(x, dtype=np.float64).reshape(-1)
        diff = flat - self.mean
        sign, logdet = np.linalg.slogdet(self.cov)
        if sign <= 0:
            raise NonPSDError("covariance is singular; log-likelihood undefined")
        sol = np.linalg.solve(self.cov, diff)
        return float(-0.5 * (self.size * np.log(2 * np.pi) + logdet + diff @ sol))


def posterior_affine(
    spec: GaussianSeqSpec, a: np.ndarray, s: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Posterior of x given per-frame observations y_t = a_t x_t + s_t eps_t.

    Returns (W, b, cov) with E[x | y] = W y + b, both over the flattened
    space; a and s are per-frame scalars broadcast across feature dims.
    """
    a = np.repeat(np.asarray(a, dtype=np.float64), spec.dim)
    s = np.repeat(np.asarray(s, dtype=np.float64), spec.dim)
    if a.shape != (spec.size,):
        raise ValueError("per-frame coefficient length must equal T")
    asig = spec.cov * a[None, :]  # Sigma A^T
    m_obs = a[:, None] * spec.cov * a[None, :] + np.diag(s**2)
    w = np.linalg.solve(m_obs, asig.T).T  # Sigma A^T M^{-1}
    b = spec.mean - w @ (a * spec.mean)
    cov = spec.cov - w @ asig.T
    return w, b, cov


def conditional_moments(
    spec: GaussianSeqSpec, history_frames, history_values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Exact (mean, cov) of the generation frames given clean history frames.

    history_frames: iterable of 0-based frame indices; history_values shaped
    (|H|, D) in sorted-frame order. Returns moments over the remaining frames
    (sorted order), flattened.
    """
    h_frames = sorted(history_frames)
    g_frames = [t for t in range(spec.n_frames) if t not in set(h_frames)]
    g_idx = spec.frame_indices(g_frames) if g_frames else np.array([], dtype=int)
    if not h_frames:
        return spec.mean[g_idx].copy(), spec.cov[np.ix_(g_idx, g_idx)].copy()
    h_idx = spec.frame_indices(h_frames)
    v = np.asarray(history_values, dtype=np.float64).reshape(-1)
    if v.shape != (len(h_idx),):
        raise ValueError(f"history values shape {v.shape} != {len(h_idx)}")
    s_hh = spec.cov[np.ix_(h_idx, h_idx)]
    s_gh = spec.cov[np.ix_(g_idx, h_idx)]
    sol = np.linalg.solve(s_hh, (v - spec.mean[h_idx]))
    mean = spec.mean[g_idx] + s_gh @ sol
    cov = spec.cov[np.ix_(g_idx, g_idx)] - s_gh @ np.linalg.solve(s_hh, s_gh.T)
    return mean, cov


def noised_conditional_moments(
    spec: GaussianSeqSpec,
    history_frames,
    history_values: np.ndarray,
    k,
    schedule: NoiseSchedule,
) -> tuple[np.ndarray, np.ndarray]:
    """Moments of x_G^k (generation frames diffused to level k) given history.

    k is a scalar or per-generation-frame vector of noise levels.
    """
    mean_c, cov_c = conditional_moments(spec, history_frames, history_values)
    n_g = mean_c.size // spec.dim
    k = validate_noise_level(k) * np.ones(n_g)
    alpha, sigma = schedule.alpha_sigma(k)
    a = np.repeat(np.asarray(alpha, dtype=np.float64), spec.dim)
    s = np.repeat(np.asarray(sigma, dtype=np.float64), spec.dim)
    mean_k = a * mean_c
    cov_k = a[:, None] * cov_c * a[None, :] + np.diag(s**2)
    return mean_k, cov_k


def exact_conditional_score(
    spec: GaussianSeqSpec,
    history_frames,
    history_values: np.ndarray,
    x_g_noised: np.ndarray,
    k,
    schedule: NoiseSchedule,
) -> np.ndarray:
    """grad log p_k(x_G^k | x_H) of the exact noised-marginal Gaussian.

    x_g_noised: (..., |G|, D); returns scores of the same shape.
    """
    mean_k, cov_k = noised_conditional_moments(
        spec, history_frames, history_values, k, schedule
    )
    x = np.asarray(x_g_noised, dtype=np.float64)
    lead = x.shape[:-2]
    flat = x.reshape(-1, mean_k.size)
    diff = flat - mean_k[None, :]
    score = -np.linalg.solve(cov_k, diff.T).T
    return score.reshape(*lead, mean_k.size // spec.dim, spec.dim)


def lemma_conditional(
    a_mat: np.ndarray,
    sigma_x: np.ndarray,
    sigma_y: np.ndarray,
    sigma: float,
    x_sigma: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Conditional of y given the additively noised x_sigma = x + sigma z.

    For x ~ N(0, sigma_x), y | x ~ N(A x, sigma_y): with
    S(sigma) = sigma_x (sigma_x + sigma^2 I)^{-1},
        y | x_sigma ~ N(A S(sigma) x_sigma, sigma_y + sigma^2 A S(sigma) A^T).
    """
    a_mat = np.asarray(a_mat, dtype=np.float64)
    sigma_x = np.asarray(sigma_x, dtype=np.float64)
    sigma_y = np.asarray(sigma_y, dtype=np.float64)
    _check_psd(sigma_x)
    d = sigma_x.shape[0]
    shrink = np.linalg.solve((sigma_x + sigma**2 * np.eye(d)).T, sigma_x.T).T
    mean = a_mat @ shrink @ np.asarray(x_sigma, dtype=np.float64)
    cov = sigma_y + sigma**2 * a_mat @ shrink @ a_mat.T
    return mean, cov


class GaussianPosteriorDenoiser:
    """Exact x0-parameterization denoiser backed by a GaussianSeqSpec.

    Treats each frame of the input as an observation alpha_{k_t} x_t +
    sigma_{k_t} eps_t of the clean frame and returns the exact posterior
    mean E[x^0 | observations]. Linear in its input by construction.

    Accepts variable-length inputs up to the spec's frame count (the law of
    a shorter window is the spec's leading-frames marginal).
    """

    parameterization = Parameterization.X0

    def __init__(self, spec: GaussianSeqSpec, schedule: NoiseSchedule):
        self.spec = spec
        self.schedule = schedule
        self._cache: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}

    def _map_for(self, k_vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        key = tuple(np.round(k_vec, 15))
        if key not in self._cache:
            spec = self.spec.window(len(k_vec))
            alpha, sigma = self.schedule.alpha_sigma(k_vec)
            w, b, _ = posterior_affine(spec, np.atleast_1d(alpha), np.atleast_1d(sigma))
            self._cache[key] = (w, b)
        return self._cache[key]

    def predict(self, x: np.ndarray, k, actions=None) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3:
            raise ValueError(f"expected (B, T, D) input, got {x.shape}")
        batch, n_frames, dim = x.shape
        if dim != self.spec.dim or n_frames > self.spec.n_frames:
            raise ValueError(
                f"input frames ({n_frames}, {dim}) incompatible with spec "
                f"({self.spec.n_frames}, {self.spec.dim})"
            )
        k = validate_noise_level(k)
        flat = x.reshape(batch, n_frames * dim)
        out = np.empty_like(flat)
        if k.ndim <= 1:
            k_vec = np.broadcast_to(k, (n_frames,))
            w, b = self._map_for(np.asarray(k_vec))
            out = flat @ w.T + b[None, :]
        else:
            if k.shape != (batch, n_frames):
                raise ValueError(f"noise levels shape {k.shape} != (B, T)")
            uniq, inverse = np.unique(k, axis=0, return_inverse=True)
            for i, k_vec in enumerate(uniq):
                w, b = self._map_for(k_vec)
                rows = inverse == i
                out[rows] = flat[rows] @ w.T + b[None, :]
        return out.reshape(batch, n_frames, dim)
