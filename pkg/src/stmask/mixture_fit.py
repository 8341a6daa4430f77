"""Per-frequency mixture fitting for the complex spherical Student's t
family: responsibilities, bound-weighted scatter accumulation, weight and
component updates (full and rank-one shapes, finite and infinite degrees of
freedom), spherical k-means initialization, and the angular-central-Gaussian
reference fit used for recovery testing.

The module exposes the per-frequency operations on plain types plus a batched
engine (`fit_all_frequencies`) that runs every frequency bin of a spectrogram
in parallel vectorized form.  Component updates come in two flavors:

* ``hca`` -- the high-concentration closed forms (eigenvalues -G/sigma_j,
  concentration G(M-1)/sum of minor scatter eigenvalues);
* ``exact`` -- damped Newton maximization of the exact minorized objective,
  using the exact normalizer and its moments.  At nu = M the exact update has
  a closed form that reproduces the angular-central-Gaussian fixed point.

Infinite nu always uses the exact limit-model updates (exponential-family
normalizers), started from the high-concentration values.
"""

import math
import warnings
from dataclasses import dataclass

import numpy as np

from ._dd import (
    simplex_mean_exp,
    simplex_mean_exp_grad,
    simplex_mean_exp_hess,
    simplex_mean_neg_power,
    simplex_mean_neg_power_grad,
    simplex_mean_neg_power_hess,
)
from .dirstats import (
    CanonicalHermitian,
    CstParams,
    RankOneParams,
    log_normalizer_full,
    log_normalizer_rank_one,
    log_unnormalized_density,
)
from .validation import check_positive_int, check_rng

__all__ = [
    "MixtureState",
    "Responsibilities",
    "FitConfig",
    "WeightedScatter",
    "posterior_masks",
    "update_phi",
    "update_weights",
    "weighted_scatter",
    "update_full_component",
    "update_rank_one_component",
    "log_likelihood",
    "kmeans_init",
    "fit_frequency",
    "fit_all_frequencies",
    "cacg_reference_fit",
    "acg_fit_all_frequencies",
]

_DELTA_REG = 1e-12
_KAPPA_MAX = 1e8
_LAMBDA_FLOOR = -1e8
_EMPTY_REL = 1e-12

# Dissimilarity differences below this are treated as exact ties during
# k-means assignment (and as "no spread" for empty-cluster re-seeding), so
# degenerate single-direction data settles into one cluster.
_KMEANS_TIE_TOL = 1e-12
_NEWTON_TOL = 1e-10
_NEWTON_MAX_ITER = 80


# ---------------------------------------------------------------------------
# Types


@dataclass(frozen=True)
class MixtureState:
    """Fitted per-frequency mixture: weights, one component per source (all
    sharing nu and shape kind), and the recorded log-likelihood trace."""

    weights: np.ndarray
    components: tuple
    loglik_trace: np.ndarray
    failed: bool = False

    @property
    def n_sources(self):
        return self.weights.shape[0]


@dataclass(frozen=True)
class Responsibilities:
    """Soft masks per frame and source.  Valid frames hold normalized rows;
    invalid frames hold the uniform 1/N row."""

    gamma: np.ndarray

    @property
    def n_sources(self):
        return self.gamma.shape[-1]


@dataclass(frozen=True)
class FitConfig:
    """Configuration of a per-frequency fit.

    ``eigenvalue_update`` selects between the exact minorizer maximization
    ("exact", default) and the high-concentration closed form ("hca") for
    finite nu; infinite nu always uses the exact limit-model solve.
    ``epsilon`` records the observation-validity threshold used upstream when
    the valid-frame set was derived; it is carried for provenance."""

    n_sources: int
    nu: float = 1.0
    shape: str = "full"
    max_outer_iters: int = 20
    kmeans_attempts: int = 4
    warmstart_iters: int = 5
    epsilon: float | None = None
    seed: int = 0
    eigenvalue_update: str = "exact"

    def __post_init__(self):
        check_positive_int(self.n_sources, "n_sources")
        if not float(self.nu) > 0:
            raise ValueError("nu must be positive or infinite")
        if self.shape not in ("full", "rank_one"):
            raise ValueError("shape must be 'full' or 'rank_one'")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be >= 1")
        if self.warmstart_iters < 0:
            raise ValueError("warmstart_iters must be >= 0")
        if self.kmeans_attempts < 1:
            raise ValueError("kmeans_attempts must be >= 1")
        if self.eigenvalue_update not in ("exact", "hca"):
            raise ValueError("eigenvalue_update must be 'exact' or 'hca'")


@dataclass(frozen=True)
class WeightedScatter:
    """Bound-weighted outer-product sum S and effective count G."""

    S: np.ndarray
    G: float

    @property
    def m_dim(self):
        return self.S.shape[0]


# ---------------------------------------------------------------------------
# Small numerical helpers


def _phase_fix_columns(u):
    """Multiply each eigenvector column by a unit phase so its
    largest-magnitude entry is real positive (deterministic representative)."""
    idx = np.argmax(np.abs(u), axis=-2, keepdims=True)
    pivot = np.take_along_axis(u, idx, axis=-2)
    phase = pivot / np.maximum(np.abs(pivot), 1e-300)
    return u * phase.conj()


def _eigh_descending(s_mat):
    """Batched Hermitian eigendecomposition sorted descending, with
    deterministic column phases."""
    vals, vecs = np.linalg.eigh(s_mat)
    vals = vals[..., ::-1]
    vecs = vecs[..., ::-1]
    return vals, _phase_fix_columns(vecs)


def _regularize_scatter(s_mat):
    m_dim = s_mat.shape[-1]
    tr = np.trace(s_mat, axis1=-2, axis2=-1).real
    eye = np.eye(m_dim)
    return s_mat + (_DELTA_REG * tr / m_dim)[..., None, None] * eye


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = m.squeeze(axis) + np.log(np.sum(np.exp(a - m), axis=axis))
    return out


# ---------------------------------------------------------------------------
# Exact component solvers (batched over rows).  All take the descending
# scatter eigenvalues sigma (R, M) and counts g (R,) and return the shape
# parameters in the node space c = 1 - 2 lambda / nu (finite) or the
# eigenvalues themselves (infinite nu).


def _solve_full_exact(sigma, g, nu):
    """Maximize -G log Zhat(c) - (nu/2) sum_j c_j sigma_j over c > 0 by
    damped Newton (the objective is strictly concave).  Returns c (R, M);
    the caller rescales to the canonical gauge."""
    n_rows, m_dim = sigma.shape
    s_exp = (nu + m_dim) / 2.0
    if abs(nu - m_dim) <= 1e-12 * m_dim:
        return 2.0 * g[:, None] / (m_dim * sigma)
    c = np.ones_like(sigma)
    c[:, 1:] = 1.0 + 2.0 * g[:, None] / (nu * sigma[:, 1:])
    # rescale onto the stationary gauge sphere sum c sigma = G (nu+M)/nu
    c *= (s_exp * g / ((nu / 2.0) * np.sum(c * sigma, axis=1)))[:, None]

    def objective(c_rows, g_rows, sig_rows):
        mean = simplex_mean_neg_power(c_rows, s_exp)
        return -g_rows * np.log(mean) - (nu / 2.0) * np.sum(c_rows * sig_rows, axis=1), mean

    f_cur, _ = objective(c, g, sigma)
    active = np.ones(n_rows, dtype=bool)
    for _ in range(_NEWTON_MAX_ITER):
        if not active.any():
            break
        ca, ga, sa = c[active], g[active], sigma[active]
        mean = simplex_mean_neg_power(ca, s_exp)
        grad_m = simplex_mean_neg_power_grad(ca, s_exp)
        gvec = ga[:, None] * s_exp * grad_m / mean[:, None] - (nu / 2.0) * sa
        scale = (nu / 2.0) * sa
        converged = np.max(np.abs(gvec) / scale, axis=1) <= _NEWTON_TOL
        if converged.all():
            active[np.flatnonzero(active)] = False
            break
        hess_m = simplex_mean_neg_power_hess(ca, s_exp)
        ratio_g = grad_m / mean[:, None]
        curv = ga[:, None, None] * (
            s_exp * (s_exp + 1.0) * hess_m / mean[:, None, None]
            - s_exp**2 * ratio_g[:, :, None] * ratio_g[:, None, :]
        )
        # curv is the negated objective Hessian (positive definite)
        try:
            step = np.linalg.solve(curv, gvec[..., None])[..., 0]
        except np.linalg.LinAlgError:
            ridge = 1e-10 * np.trace(curv, axis1=1, axis2=2)[:, None, None] * np.eye(m_dim)
            step = np.linalg.solve(curv + ridge, gvec[..., None])[..., 0]
        # backtracking line search: positivity plus objective increase
        t = np.ones(len(ca))
        f_old = f_cur[active]
        c_new = ca.copy()
        f_new = f_old.copy()
        pending = ~converged
        for _ in range(40):
            if not pending.any():
                break
            trial = ca[pending] + t[pending, None] * step[pending]
            ok_pos = trial.min(axis=1) > 0
            f_t = np.full(pending.sum(), -np.inf)
            if ok_pos.any():
                f_t[ok_pos], _ = objective(
                    trial[ok_pos], ga[pending][ok_pos], sa[pending][ok_pos]
                )
            accept = ok_pos & (f_t >= f_old[pending] - 1e-13 * np.abs(f_old[pending]))
            idx = np.flatnonzero(pending)
            acc_idx = idx[accept]
            c_new[acc_idx] = trial[accept]
            f_new[acc_idx] = f_t[accept]
            pending[acc_idx] = False
            t[idx[~accept]] *= 0.5
            give_up = t < 1e-12
            pending &= ~give_up
        rows = np.flatnonzero(active)
        c[rows] = c_new
        f_cur[rows] = f_new
        active[rows[converged]] = False
    return c


def _solve_bingham(sigma, g, max_iter=_NEWTON_MAX_ITER):
    """Exponential-limit eigenvalue solve: with the top eigenvalue pinned to
    zero, find lambda_j <= 0 with G E[r_j e^{lambda.r}]/E[e^{lambda.r}] =
    sigma_j for j >= 2 (damped Newton on the concave expected-complete-data
    objective)."""
    n_rows, m_dim = sigma.shape
    lam = np.zeros_like(sigma)
    lam[:, 1:] = np.maximum(-g[:, None] / np.maximum(sigma[:, 1:], 1e-300), _LAMBDA_FLOOR)

    def objective(lam_rows, g_rows, sig_rows):
        mean = simplex_mean_exp(lam_rows)
        return np.sum(lam_rows * sig_rows, axis=1) - g_rows * np.log(mean), mean

    f_cur, _ = objective(lam, g, sigma)
    active = np.ones(n_rows, dtype=bool)
    for _ in range(max_iter):
        if not active.any():
            break
        la, ga, sa = lam[active], g[active], sigma[active]
        mean = simplex_mean_exp(la)
        grad_m = simplex_mean_exp_grad(la)
        ratio = grad_m / mean[:, None]
        gvec = sa[:, 1:] - ga[:, None] * ratio[:, 1:]
        scale = np.maximum(sa[:, 1:], _EMPTY_REL * ga[:, None])
        converged = np.max(np.abs(gvec) / scale, axis=1) <= _NEWTON_TOL
        if converged.all():
            active[np.flatnonzero(active)] = False
            break
        hess_m = simplex_mean_exp_hess(la)
        cov = hess_m / mean[:, None, None] - ratio[:, :, None] * ratio[:, None, :]
        curv = ga[:, None, None] * cov[:, 1:, 1:]
        try:
            step = np.linalg.solve(curv, gvec[..., None])[..., 0]
        except np.linalg.LinAlgError:
            ridge = (
                1e-10 * np.maximum(np.trace(curv, axis1=1, axis2=2), 1e-300)[:, None, None]
            ) * np.eye(m_dim - 1)
            step = np.linalg.solve(curv + ridge, gvec[..., None])[..., 0]
        t = np.ones(len(la))
        f_old = f_cur[active]
        lam_new = la.copy()
        f_new = f_old.copy()
        pending = ~converged
        for _ in range(40):
            if not pending.any():
                break
            trial = la[pending].copy()
            trial[:, 1:] = np.clip(
                trial[:, 1:] + t[pending, None] * step[pending], _LAMBDA_FLOOR, 0.0
            )
            f_t, _ = objective(trial, ga[pending], sa[pending])
            accept = f_t >= f_old[pending] - 1e-13 * np.abs(f_old[pending])
            idx = np.flatnonzero(pending)
            acc_idx = idx[accept]
            lam_new[acc_idx] = trial[accept]
            f_new[acc_idx] = f_t[accept]
            pending[acc_idx] = False
            t[idx[~accept]] *= 0.5
            pending &= ~(t < 1e-12)
        rows = np.flatnonzero(active)
        lam[rows] = lam_new
        f_cur[rows] = f_new
        active[rows[converged]] = False
    return lam


def _rank_one_c_profile(b, m_dim):
    """Node profile (1, 1+b, ..., 1+b) for rank-one shapes; b (R,)."""
    c = np.ones((b.shape[0], m_dim))
    c[:, 1:] = 1.0 + b[:, None]
    return c


def _solve_rank_one_exact(sigma1, tau, g, nu, m_dim):
    """Exact rank-one concentration for finite nu: maximize the profiled
    minorized objective over b = 2 kappa / nu >= 0 (1-D damped Newton on the
    analytic profile gradient)."""
    s_exp = (nu + m_dim) / 2.0
    if abs(nu - m_dim) <= 1e-12 * m_dim:
        return np.maximum((m_dim - 1) * sigma1 / tau - 1.0, 0.0)
    b_cap = 2.0 * _KAPPA_MAX / nu
    b = np.clip(2.0 * g * (m_dim - 1) / (nu * tau), 0.0, b_cap)

    def residual(b_rows, s1, tv, gv):
        """Profile gradient; also returns the pieces the derivative needs."""
        c = _rank_one_c_profile(b_rows, m_dim)
        mean_s = simplex_mean_neg_power(c, s_exp)
        mean_s1 = simplex_mean_neg_power(c, s_exp + 1.0)
        g1 = simplex_mean_neg_power_grad(c, s_exp, cols=[0])[:, 0]
        a_val = mean_s1 - g1
        denom = s1 + (1.0 + b_rows) * tv
        r = gv * s_exp * a_val / mean_s - s_exp * gv * tv / denom
        return r, (c, mean_s, a_val, denom)

    def derivative(b_rows, tv, gv, cache):
        c, mean_s, a_val, denom = cache
        g1_s1 = simplex_mean_neg_power_grad(c, s_exp + 1.0, cols=[0])[:, 0]
        h11 = simplex_mean_neg_power_hess(c, s_exp, pairs=[(0, 0)])[:, 0]
        mean_s2 = simplex_mean_neg_power(c, s_exp + 2.0)
        da = -(s_exp + 1.0) * (mean_s2 - 2.0 * g1_s1 + h11)
        return gv * s_exp * (da / mean_s + s_exp * (a_val / mean_s) ** 2) + (
            s_exp * gv * tv**2 / denom**2
        )

    # rows whose gradient at b = 0 is nonpositive sit on the boundary
    r0, _ = residual(np.zeros_like(b), sigma1, tau, g)
    boundary = r0 <= 0
    b[boundary] = 0.0
    active = ~boundary
    r_act, cache_act = residual(b[active], sigma1[active], tau[active], g[active])
    for _ in range(_NEWTON_MAX_ITER):
        if not active.any():
            break
        ba, s1, tv, gv = b[active], sigma1[active], tau[active], g[active]
        scale = s_exp * gv * tv / (s1 + (1.0 + ba) * tv)
        converged = np.abs(r_act) <= _NEWTON_TOL * np.maximum(scale, 1e-300)
        if converged.all():
            active[np.flatnonzero(active)] = False
            break
        dr = derivative(ba, tv, gv, cache_act)
        step = -r_act / dr
        new_b = np.clip(ba + step, 0.0, b_cap)
        r_new, cache_new = residual(new_b, s1, tv, gv)
        # halve toward the current point while the step worsens the residual
        worse = np.abs(r_new) > np.abs(r_act)
        halved = worse.any()
        shrink = 1.0
        for _ in range(25):
            if not worse.any():
                break
            shrink *= 0.5
            new_b[worse] = np.clip(ba[worse] + shrink * step[worse], 0.0, b_cap)
            r_sub, _ = residual(new_b[worse], s1[worse], tv[worse], gv[worse])
            r_new[worse] = r_sub
            worse[worse] = np.abs(r_sub) > (1.0 - 1e-4) * np.abs(r_act[worse])
        rows = np.flatnonzero(active)
        b[rows] = np.where(converged, ba, new_b)
        active[rows[converged]] = False
        if converged.any() or halved:
            # cache no longer lines up with the active rows; recompute
            r_act, cache_act = residual(
                b[active], sigma1[active], tau[active], g[active]
            )
        else:
            r_act, cache_act = r_new, cache_new
    return b


def _solve_watson(sigma1, tau, g, m_dim):
    """Exponential-limit rank-one concentration: solve
    G <u>_kappa = tau with <u> the mean of u ~ Beta(M-1, 1) tilted by
    e^{-kappa u} (monotone 1-D Newton); boundary kappa = 0 when the target
    is reachable at zero concentration."""
    target = tau / g
    kappa = np.clip(g * (m_dim - 1) / np.maximum(tau, 1e-300), 0.0, _KAPPA_MAX)
    boundary = target >= (m_dim - 1) / m_dim
    kappa[boundary] = 0.0
    active = ~boundary
    for _ in range(_NEWTON_MAX_ITER):
        if not active.any():
            break
        ka, ta = kappa[active], target[active]
        lam = np.zeros((ka.shape[0], m_dim))
        lam[:, 1:] = -ka[:, None]
        mean = simplex_mean_exp(lam)
        ratio1 = simplex_mean_exp_grad(lam, cols=[0])[:, 0] / mean
        u2 = 1.0 - 2.0 * ratio1 + simplex_mean_exp_hess(lam, pairs=[(0, 0)])[:, 0] / mean
        u1 = 1.0 - ratio1
        var = np.maximum(u2 - u1**2, 1e-300)
        resid = u1 - ta
        converged = np.abs(resid) <= _NEWTON_TOL * np.maximum(ta, 1e-12)
        new_k = np.clip(ka + resid / var, 0.0, _KAPPA_MAX)
        rows = np.flatnonzero(active)
        kappa[rows] = np.where(converged, ka, new_k)
        active[rows[converged]] = False
    return kappa


# ---------------------------------------------------------------------------
# Spec-level per-frequency operations


def _component_log_normalizer(comp):
    if comp.is_rank_one:
        return log_normalizer_rank_one(comp.shape.kappa, comp.nu, comp.m_dim).value
    return log_normalizer_full(comp.shape, comp.nu, method="auto").value


def posterior_masks(z_f, valid_f, state):
    """Responsibilities gamma proportional to w_n times the normalized
    component density, computed in the log domain; invalid frames get the
    uniform row."""
    z_f = np.asarray(z_f)
    valid_f = np.asarray(valid_f, dtype=bool)
    n_sources = state.n_sources
    n_frames = z_f.shape[0]
    gamma = np.full((n_frames, n_sources), 1.0 / n_sources)
    if state.failed or not valid_f.any():
        return Responsibilities(gamma=gamma)
    zv = z_f[valid_f]
    logits = np.empty((zv.shape[0], n_sources))
    with np.errstate(divide="ignore"):
        log_w = np.log(state.weights)
    for n, comp in enumerate(state.components):
        logits[:, n] = (
            log_w[n]
            + _component_log_normalizer(comp)
            + log_unnormalized_density(zv, comp)
        )
    lse = _logsumexp(logits, axis=1)
    gamma[valid_f] = np.exp(logits - lse[:, None])
    return Responsibilities(gamma=gamma)


def update_phi(z_tf, component):
    """Tangent-bound auxiliary variable phi = (2/nu) z^H A z (canonical form
    keeps it <= 0); identically zero in the infinite-nu limit."""
    z_tf = np.asarray(z_tf)
    if math.isinf(component.nu):
        return np.zeros(z_tf.shape[:-1]) if z_tf.ndim > 1 else 0.0
    if component.is_rank_one:
        quad = -component.shape.kappa * (
            1.0 - np.abs(np.einsum("...m,m->...", z_tf.conj(), component.shape.a)) ** 2
        )
    else:
        proj = np.abs(np.einsum("...m,mk->...k", z_tf.conj(), component.shape.eigvecs)) ** 2
        quad = proj @ component.shape.eigvals
    return (2.0 / component.nu) * quad


def update_weights(gamma, valid_f):
    """Mixture weights: the mean responsibility over valid frames (uniform
    when no frame is valid)."""
    gamma = np.asarray(gamma, dtype=float)
    valid_f = np.asarray(valid_f, dtype=bool)
    n_sources = gamma.shape[-1]
    if not valid_f.any():
        return np.full(n_sources, 1.0 / n_sources)
    w = gamma[valid_f].mean(axis=0)
    return w / w.sum()


def weighted_scatter(z_f, gamma_n, phi_n, nu, M):
    """Bound-weighted scatter S = ((nu+M)/nu) sum_t gamma_t/(1-phi_t) z z^H
    and effective count G = sum_t gamma_t.  Pass responsibilities already
    zeroed on invalid frames (their z rows are zero, but G counts gamma)."""
    z_f = np.asarray(z_f)
    gamma_n = np.asarray(gamma_n, dtype=float)
    phi_n = np.asarray(phi_n, dtype=float)
    m_dim = check_positive_int(M, "M")
    if z_f.shape[-1] != m_dim:
        raise ValueError("observation dimension does not match M")
    factor = 1.0 if math.isinf(nu) else (nu + m_dim) / nu
    wts = factor * gamma_n / (1.0 - phi_n)
    s_mat = np.einsum("t,tm,tk->mk", wts, z_f, z_f.conj())
    s_mat = (s_mat + s_mat.conj().T) / 2.0
    return WeightedScatter(S=s_mat, G=float(gamma_n.sum()))


def update_full_component(scatter, nu, mode="hca"):
    """Full-shape eigenvalue update.  Finite nu with mode="hca" applies the
    high-concentration stationary point (lambda_1 = 0, lambda_j = -G/sigma_j);
    mode="exact" maximizes the exact minorized objective.  Infinite nu solves
    the exponential limit model exactly."""
    if not scatter.G > 0:
        raise ValueError("component update requires positive effective count G")
    s_reg = _regularize_scatter(scatter.S)
    sigma, vecs = _eigh_descending(s_reg)
    if not np.all(sigma > 0):
        raise ValueError("scatter is rank deficient even after regularization")
    m_dim = scatter.m_dim
    g_arr = np.array([scatter.G])
    if math.isinf(nu):
        lam = np.sort(_solve_bingham(sigma[None, :], g_arr)[0])[::-1]
    elif mode == "hca":
        lam = np.zeros(m_dim)
        lam[1:] = -scatter.G / sigma[1:]
    elif mode == "exact":
        c = _solve_full_exact(sigma[None, :], g_arr, float(nu))[0]
        lam = _canonical_eigvals_from_nodes(c[None, :], float(nu))[0]
    else:
        raise ValueError("mode must be 'hca' or 'exact'")
    lam = np.minimum(lam, 0.0)
    lam[0] = 0.0
    return CanonicalHermitian(eigvecs=vecs, eigvals=lam)


def _canonical_eigvals_from_nodes(c, nu):
    """Map unconstrained node vectors to canonical eigenvalues: rescale so
    the smallest node is one, then lambda = nu (1 - c) / 2 (descending).

    The maximizer pairs the largest scatter eigenvalue with the smallest
    node; node rows are sorted ascending defensively so tiny solver noise
    at ties cannot break the monotone pairing."""
    c = np.sort(c, axis=-1)
    c_min = c[..., :1]
    lam = nu * (1.0 - c / c_min) / 2.0
    lam[..., 0] = 0.0
    return lam


def update_rank_one_component(scatter, M):
    """Rank-one update: preferred direction from the principal scatter
    eigenvector, concentration from the high-concentration form
    kappa = G (M-1) / (tr S - sigma_1), clamped when the minor scatter mass
    vanishes."""
    if not scatter.G > 0:
        raise ValueError("component update requires positive effective count G")
    m_dim = check_positive_int(M, "M")
    if scatter.m_dim != m_dim:
        raise ValueError("scatter dimension does not match M")
    s_reg = _regularize_scatter(scatter.S)
    sigma, vecs = _eigh_descending(s_reg)
    tau = float(sigma[1:].sum())
    if tau <= 0:
        kappa = _KAPPA_MAX
    else:
        kappa = min(scatter.G * (m_dim - 1) / tau, _KAPPA_MAX)
    return RankOneParams(a=vecs[:, 0], kappa=float(kappa))


def log_likelihood(z_f, valid_f, state):
    """Total log-likelihood of the valid frames under the mixture."""
    z_f = np.asarray(z_f)
    valid_f = np.asarray(valid_f, dtype=bool)
    if state.failed or not valid_f.any():
        return 0.0
    zv = z_f[valid_f]
    logits = np.empty((zv.shape[0], state.n_sources))
    with np.errstate(divide="ignore"):
        log_w = np.log(state.weights)
    for n, comp in enumerate(state.components):
        logits[:, n] = (
            log_w[n]
            + _component_log_normalizer(comp)
            + log_unnormalized_density(zv, comp)
        )
    return float(_logsumexp(logits, axis=1).sum())


# ---------------------------------------------------------------------------
# Spherical k-means initialization (batched across frequencies)


def _principal_eigvecs(scatters):
    _, vecs = _eigh_descending(scatters)
    return vecs[..., 0]


def _kmeans_batched(z, valid, n_sources, attempts, rngs, max_iter=30):
    """Best-of-`attempts` spherical k-means on the phase-invariant
    dissimilarity 1 - |c^H z|^2 per frequency.  Returns one-hot masks
    (F, T, N) with uniform rows on invalid frames."""
    n_freq, n_frames, m_dim = z.shape
    best_cost = np.full(n_freq, np.inf)
    best_assign = np.zeros((n_freq, n_frames), dtype=np.int64)
    n_valid = valid.sum(axis=1)
    for _ in range(attempts):
        centroids = np.zeros((n_freq, n_sources, m_dim), dtype=complex)
        # seeding: first centroid uniform over valid frames, then farthest-
        # biased draws proportional to the current nearest dissimilarity
        min_d = np.ones((n_freq, n_frames))
        for n in range(n_sources):
            weights = np.where(valid, min_d if n else 1.0, 0.0)
            totals = weights.sum(axis=1)
            for f in range(n_freq):
                if n_valid[f] == 0:
                    continue
                w_f = weights[f]
                tot = totals[f]
                if tot <= 0:
                    w_f = valid[f].astype(float)
                    tot = w_f.sum()
                u = rngs[f].random() * tot
                idx = int(np.searchsorted(np.cumsum(w_f), u, side="right"))
                centroids[f, n] = z[f, min(idx, n_frames - 1)]
            d_new = 1.0 - np.abs(np.einsum("ftm,fm->ft", z.conj(), centroids[:, n])) ** 2
            min_d = np.minimum(min_d, np.maximum(d_new, 0.0)) if n else np.maximum(d_new, 0.0)
        assign = np.zeros((n_freq, n_frames), dtype=np.int64)
        for _ in range(max_iter):
            dissim = 1.0 - np.abs(np.einsum("ftm,fnm->ftn", z.conj(), centroids)) ** 2
            # lowest index within tolerance of the minimum, so frames that are
            # projectively identical collapse into one cluster instead of
            # splitting on rounding noise
            near_min = dissim <= dissim.min(axis=2, keepdims=True) + _KMEANS_TIE_TOL
            new_assign = np.argmax(near_min, axis=2)
            new_assign[~valid] = 0
            if np.array_equal(new_assign, assign):
                break
            assign = new_assign
            onehot = np.zeros((n_freq, n_frames, n_sources))
            np.put_along_axis(onehot, assign[..., None], 1.0, axis=2)
            onehot *= valid[..., None]
            counts = onehot.sum(axis=1)
            # re-seed empty clusters at the farthest valid frame, but only
            # when some frame is meaningfully far from its centroid; with no
            # projective spread an empty cluster is the honest outcome
            empty = counts == 0
            if empty.any():
                nearest = np.take_along_axis(dissim, assign[..., None], axis=2)[..., 0]
                nearest = np.where(valid, nearest, -1.0)
                far_idx = np.argmax(nearest, axis=1)
                for f, n in zip(*np.nonzero(empty)):
                    if n_valid[f] == 0:
                        continue
                    if nearest[f, far_idx[f]] <= _KMEANS_TIE_TOL:
                        continue
                    centroids[f, n] = z[f, far_idx[f]]
                    assign[f, far_idx[f]] = n
                    onehot[f, far_idx[f]] = 0.0
                    onehot[f, far_idx[f], n] = 1.0
            scatters = np.einsum("ftn,ftm,ftk->fnmk", onehot, z, z.conj())
            nonempty = onehot.sum(axis=1) > 0
            scatters[~nonempty] = np.eye(m_dim)
            new_centroids = _principal_eigvecs(scatters)
            centroids = np.where(nonempty[..., None], new_centroids, centroids)
        dissim = 1.0 - np.abs(np.einsum("ftm,fnm->ftn", z.conj(), centroids)) ** 2
        cost = np.where(
            valid, np.take_along_axis(dissim, assign[..., None], axis=2)[..., 0], 0.0
        ).sum(axis=1)
        better = cost < best_cost
        best_cost[better] = cost[better]
        best_assign[better] = assign[better]
    gamma = np.zeros((n_freq, n_frames, n_sources))
    np.put_along_axis(gamma, best_assign[..., None], 1.0, axis=2)
    gamma = np.where(valid[..., None], gamma, 1.0 / n_sources)
    return gamma


def kmeans_init(z_f, N, attempts, rng):
    """Best-of-attempts spherical k-means initialization for one frequency,
    returned as one-hot responsibilities (uniform on invalid frames)."""
    z_f = np.asarray(z_f)
    n_sources = check_positive_int(N, "N")
    rng = check_rng(rng)
    norms = np.linalg.norm(z_f, axis=-1)
    valid = norms > 0
    if valid.sum() < n_sources:
        gamma = np.full((z_f.shape[0], n_sources), 1.0 / n_sources)
        idx = np.flatnonzero(valid)
        gamma[idx] = 0.0
        gamma[idx, rng.integers(0, n_sources, size=idx.size)] = 1.0
        warnings.warn("fewer valid frames than clusters; random one-hot assignment")
        return Responsibilities(gamma=gamma)
    gamma = _kmeans_batched(
        z_f[None], valid[None], n_sources, int(attempts), [rng]
    )[0]
    return Responsibilities(gamma=gamma)


# ---------------------------------------------------------------------------
# Batched fitting engine


class _EngineParams:
    """Mutable batched component parameters for the fitting loops."""

    def __init__(self, n_freq, n_sources, m_dim, shape, nu):
        self.shape = shape
        self.nu = nu
        self.m_dim = m_dim
        if shape == "full":
            self.eigvecs = np.broadcast_to(
                np.eye(m_dim, dtype=complex), (n_freq, n_sources, m_dim, m_dim)
            ).copy()
            self.eigvals = np.zeros((n_freq, n_sources, m_dim))
        else:
            a0 = np.zeros((n_freq, n_sources, m_dim), dtype=complex)
            a0[..., 0] = 1.0
            self.a = a0
            self.kappa = np.zeros((n_freq, n_sources))


def _engine_densities(z, params):
    """Per-bin unnormalized log-density pieces and per-component log
    normalizers for the current parameters.

    Returns (log_quotient, log_norm) where the bin log-density is
    log_norm[f, n] + log_quotient[f, t, n]."""
    nu = params.nu
    if params.shape == "full":
        proj = np.abs(np.einsum("ftm,fnmk->ftnk", z.conj(), params.eigvecs)) ** 2
        if math.isinf(nu):
            quad = np.einsum("ftnk,fnk->ftn", proj, params.eigvals)
            log_norm = -np.log(simplex_mean_exp(params.eigvals))
            return quad, log_norm
        c_nodes = 1.0 - 2.0 * params.eigvals / nu
        q = np.einsum("ftnk,fnk->ftn", proj, c_nodes)
        s_exp = (nu + params.m_dim) / 2.0
        log_norm = -np.log(simplex_mean_neg_power(c_nodes, s_exp))
        with np.errstate(divide="ignore", invalid="ignore"):
            log_q = np.log(np.maximum(q, 1e-300))
        return -s_exp * log_q, log_norm
    r_proj = np.abs(np.einsum("ftm,fnm->ftn", z.conj(), params.a)) ** 2
    miss = np.maximum(1.0 - r_proj, 0.0)
    m_dim = params.m_dim
    if math.isinf(nu):
        lam = np.zeros(params.kappa.shape + (m_dim,))
        lam[..., 1:] = -params.kappa[..., None]
        log_norm = -np.log(simplex_mean_exp(lam))
        return -params.kappa[:, None, :] * miss, log_norm
    s_exp = (nu + m_dim) / 2.0
    b = 2.0 * params.kappa / nu
    c_nodes = np.ones(params.kappa.shape + (m_dim,))
    c_nodes[..., 1:] = 1.0 + b[..., None]
    log_norm = -np.log(simplex_mean_neg_power(c_nodes, s_exp))
    return -s_exp * np.log1p(b[:, None, :] * miss), log_norm


def _engine_bound_weights(z, params, gamma_valid):
    """Responsibilities divided by the tangent-bound denominator (1 - phi),
    times the (nu+M)/nu factor; reduces to gamma in the infinite-nu limit."""
    nu = params.nu
    if math.isinf(nu):
        return gamma_valid
    m_dim = params.m_dim
    if params.shape == "full":
        proj = np.abs(np.einsum("ftm,fnmk->ftnk", z.conj(), params.eigvecs)) ** 2
        c_nodes = 1.0 - 2.0 * params.eigvals / nu
        q = np.einsum("ftnk,fnk->ftn", proj, c_nodes)
    else:
        r_proj = np.abs(np.einsum("ftm,fnm->ftn", z.conj(), params.a)) ** 2
        q = 1.0 + (2.0 * params.kappa / nu)[:, None, :] * np.maximum(1.0 - r_proj, 0.0)
    q = np.maximum(q, 1e-300)
    return ((nu + m_dim) / nu) * gamma_valid / q


def _engine_m_step(z, params, gamma_valid, mode):
    """One component update sweep from responsibilities (already zeroed on
    invalid frames).  Empty components keep their previous parameters."""
    nu = params.nu
    m_dim = params.m_dim
    bw = _engine_bound_weights(z, params, gamma_valid)
    s_mat = np.einsum("ftn,ftm,ftk->fnmk", bw, z, z.conj())
    s_mat = (s_mat + np.swapaxes(s_mat, -1, -2).conj()) / 2.0
    s_mat = _regularize_scatter(s_mat)
    g_counts = gamma_valid.sum(axis=1)
    total = g_counts.sum(axis=1, keepdims=True)
    active = (g_counts > _EMPTY_REL * np.maximum(total, 1e-300)) & (
        np.trace(s_mat, axis1=-2, axis2=-1).real > 0
    )
    sigma, vecs = _eigh_descending(s_mat)
    sigma = np.maximum(sigma, 1e-300)
    rows = active.reshape(-1)
    sig_r = sigma.reshape(-1, m_dim)[rows]
    g_r = g_counts.reshape(-1)[rows]
    if params.shape == "full":
        if sig_r.size:
            if math.isinf(nu):
                lam_r = np.sort(_solve_bingham(sig_r, g_r), axis=-1)[:, ::-1]
            elif mode == "hca":
                lam_r = np.zeros_like(sig_r)
                lam_r[:, 1:] = -g_r[:, None] / sig_r[:, 1:]
            else:
                c_r = _solve_full_exact(sig_r, g_r, nu)
                lam_r = _canonical_eigvals_from_nodes(c_r, nu)
            lam_flat = params.eigvals.reshape(-1, m_dim).copy()
            vec_flat = params.eigvecs.reshape(-1, m_dim, m_dim).copy()
            lam_flat[rows] = np.minimum(lam_r, 0.0)
            lam_flat[rows, 0] = 0.0
            vec_flat[rows] = vecs.reshape(-1, m_dim, m_dim)[rows]
            params.eigvals = lam_flat.reshape(params.eigvals.shape)
            params.eigvecs = vec_flat.reshape(params.eigvecs.shape)
    else:
        if sig_r.size:
            tau_r = sig_r[:, 1:].sum(axis=1)
            if math.isinf(nu):
                kap_r = _solve_watson(sig_r[:, 0], tau_r, g_r, m_dim)
            elif mode == "hca":
                kap_r = np.clip(g_r * (m_dim - 1) / tau_r, 0.0, _KAPPA_MAX)
            else:
                b_r = _solve_rank_one_exact(sig_r[:, 0], tau_r, g_r, nu, m_dim)
                kap_r = np.clip(nu * b_r / 2.0, 0.0, _KAPPA_MAX)
            kap_flat = params.kappa.reshape(-1).copy()
            a_flat = params.a.reshape(-1, m_dim).copy()
            kap_flat[rows] = kap_r
            a_flat[rows] = vecs.reshape(-1, m_dim, m_dim)[rows][:, :, 0]
            params.kappa = kap_flat.reshape(params.kappa.shape)
            params.a = a_flat.reshape(params.a.shape)
    return g_counts


def _engine_e_step(z, valid, params, weights):
    """Posterior responsibilities and per-frequency log-likelihood."""
    log_quot, log_norm = _engine_densities(z, params)
    with np.errstate(divide="ignore"):
        logits = np.log(weights)[:, None, :] + log_norm[:, None, :] + log_quot
    lse = _logsumexp(logits, axis=2)
    gamma = np.exp(logits - lse[..., None])
    gamma = np.where(valid[..., None], gamma, 1.0 / params_n(params))
    loglik = np.where(valid, lse, 0.0).sum(axis=1)
    return gamma, loglik


def params_n(params):
    if params.shape == "full":
        return params.eigvals.shape[1]
    return params.kappa.shape[1]


def _state_from_engine(params, weights, trace, failed, f):
    n_sources = weights.shape[1]
    comps = []
    for n in range(n_sources):
        if params.shape == "full":
            shape = CanonicalHermitian(
                eigvecs=params.eigvecs[f, n].copy(), eigvals=params.eigvals[f, n].copy()
            )
        else:
            shape = RankOneParams(a=params.a[f, n].copy(), kappa=float(params.kappa[f, n]))
        comps.append(CstParams(shape, params.nu))
    return MixtureState(
        weights=weights[f].copy(),
        components=tuple(comps),
        loglik_trace=trace[f].copy(),
        failed=bool(failed[f]),
    )


def fit_all_frequencies(z, valid, config, rngs=None):
    """Fit every frequency bin independently (vectorized across bins).

    Parameters: ``z`` (F, T, M) unit-normalized observations with zero rows
    on invalid bins, ``valid`` (F, T) boolean, ``config`` a FitConfig.
    ``rngs`` optionally supplies one Generator per frequency; by default
    independent child streams of ``config.seed`` are used.

    Returns (masks (F, T, N), states, failed) where masks are the trailing
    posterior responsibilities and states is a list of MixtureState."""
    z = np.asarray(z, dtype=complex)
    valid = np.asarray(valid, dtype=bool)
    n_freq, n_frames, m_dim = z.shape
    n_sources = config.n_sources
    nu = float(config.nu)
    if rngs is None:
        seqs = np.random.SeedSequence(config.seed).spawn(n_freq)
        rngs = [np.random.default_rng(s) for s in seqs]
    failed = valid.sum(axis=1) == 0

    gamma0 = _kmeans_batched(z, valid, n_sources, config.kmeans_attempts, rngs)
    params = _EngineParams(n_freq, n_sources, m_dim, config.shape, nu)
    weights = np.full((n_freq, n_sources), 1.0 / n_sources)
    valid_f = valid & ~failed[:, None]
    vcount = np.maximum(valid_f.sum(axis=1), 1)

    def weight_update(gamma):
        gv = gamma * valid_f[..., None]
        w = gv.sum(axis=1) / vcount[:, None]
        return w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300)

    mode = config.eigenvalue_update
    gamma0_valid = gamma0 * valid_f[..., None]
    for _ in range(config.warmstart_iters):
        weights = weight_update(gamma0)
        _engine_m_step(z, params, gamma0_valid, mode)
    initialized = config.warmstart_iters > 0

    trace = np.zeros((n_freq, config.max_outer_iters + 1))
    for it in range(config.max_outer_iters):
        if initialized:
            gamma, loglik = _engine_e_step(z, valid_f, params, weights)
        else:
            gamma, loglik = gamma0, np.zeros(n_freq)
        trace[:, it] = loglik
        weights = weight_update(gamma)
        _engine_m_step(z, params, gamma * valid_f[..., None], mode)
        initialized = True
    masks, loglik = _engine_e_step(z, valid_f, params, weights)
    trace[:, -1] = loglik

    # flag frequencies whose parameters went non-finite and reset their masks
    if params.shape == "full":
        bad = ~np.isfinite(params.eigvals).all(axis=(1, 2))
        bad |= ~np.isfinite(params.eigvecs).all(axis=(1, 2, 3))
    else:
        bad = ~np.isfinite(params.kappa).all(axis=1)
        bad |= ~np.isfinite(params.a).all(axis=(1, 2))
    bad |= ~np.isfinite(masks).any(axis=(1, 2))
    failed |= bad
    if failed.any():
        masks[failed] = 1.0 / n_sources
        weights[failed] = 1.0 / n_sources
        trace[failed] = 0.0
        if params.shape == "full":
            params.eigvals[failed] = 0.0
            params.eigvecs[failed] = np.eye(m_dim, dtype=complex)
        else:
            params.kappa[failed] = 0.0
            a0 = np.zeros(m_dim, dtype=complex)
            a0[0] = 1.0
            params.a[failed] = a0
    states = [
        _state_from_engine(params, weights, trace, failed, f) for f in range(n_freq)
    ]
    return masks, states, failed


def fit_frequency(z_f, valid_f, config, rng):
    """Fit the mixture at a single frequency: k-means initialization,
    warm-start component-only iterations with frozen initial masks, then full
    posterior/update iterations with the log-likelihood recorded per
    iteration (plus a final evaluation)."""
    z_f = np.asarray(z_f, dtype=complex)
    valid_f = np.asarray(valid_f, dtype=bool)
    rng = check_rng(rng)
    _, states, _ = fit_all_frequencies(z_f[None], valid_f[None], config, rngs=[rng])
    return states[0]


# ---------------------------------------------------------------------------
# Angular central Gaussian reference fit


def _cacg_fit_batched(z, valid, n_sources, iters, init, warmstart_iters=0):
    """Standard angular-central-Gaussian mixture EM from given initial masks,
    vectorized across frequencies; mirrors the structure of the main engine
    (warm component-only steps with frozen masks, then E/M sweeps, trailing
    E-step).  Returns the final masks (F, T, N)."""
    z = np.asarray(z, dtype=complex)
    valid = np.asarray(valid, dtype=bool)
    n_freq, n_frames, m_dim = z.shape
    gamma0 = np.asarray(init, dtype=float)
    b_mats = np.broadcast_to(
        np.eye(m_dim, dtype=complex), (n_freq, n_sources, m_dim, m_dim)
    ).copy()
    vcount = np.maximum(valid.sum(axis=1), 1)

    def weight_update(gamma):
        gv = gamma * valid[..., None]
        w = gv.sum(axis=1) / vcount[:, None]
        return w / np.maximum(w.sum(axis=1, keepdims=True), 1e-300)

    def quad_terms(b_cur):
        b_inv = np.linalg.inv(b_cur)
        d = np.einsum("ftm,fnmk,ftk->ftn", z.conj(), b_inv, z).real
        return np.maximum(d, 1e-300)

    def m_step(gamma, b_cur, have_params):
        gv = gamma * valid[..., None]
        d = quad_terms(b_cur) if have_params else np.ones((n_freq, n_frames, n_sources))
        g_counts = gv.sum(axis=1)
        num = np.einsum("ftn,ftm,ftk->fnmk", gv / d, z, z.conj())
        num = (num + np.swapaxes(num, -1, -2).conj()) / 2.0
        total = g_counts.sum(axis=1, keepdims=True)
        active = g_counts > _EMPTY_REL * np.maximum(total, 1e-300)
        b_new = b_cur.copy()
        safe_g = np.maximum(g_counts, 1e-300)
        cand = m_dim * num / safe_g[..., None, None]
        tr = np.trace(cand, axis1=-2, axis2=-1).real
        cand = np.where(
            active[..., None, None], cand * (m_dim / np.maximum(tr, 1e-300))[..., None, None], b_new
        )
        # regularize only rows detected as singular
        min_eig = np.linalg.eigvalsh(cand)[..., 0]
        tr2 = np.trace(cand, axis1=-2, axis2=-1).real
        bad = min_eig <= 1e-13 * tr2 / m_dim
        if bad.any():
            cand = cand + np.where(bad, 1e-10 * tr2 / m_dim, 0.0)[..., None, None] * np.eye(
                m_dim
            )
        return cand

    def e_step(b_cur, w_cur):
        d = quad_terms(b_cur)
        sign, logdet = np.linalg.slogdet(b_cur)
        del sign
        with np.errstate(divide="ignore"):
            logits = (
                np.log(np.maximum(w_cur, 1e-300))[:, None, :]
                - logdet[:, None, :]
                - m_dim * np.log(d)
            )
        lse = _logsumexp(logits, axis=2)
        gamma = np.exp(logits - lse[..., None])
        return np.where(valid[..., None], gamma, 1.0 / n_sources)

    weights = weight_update(gamma0)
    initialized = False
    for _ in range(warmstart_iters):
        weights = weight_update(gamma0)
        b_mats = m_step(gamma0, b_mats, initialized)
        initialized = True
    gamma = gamma0
    for _ in range(iters):
        if initialized:
            gamma = e_step(b_mats, weights)
        weights = weight_update(gamma)
        b_mats = m_step(gamma, b_mats, initialized)
        initialized = True
    if initialized:
        gamma = e_step(b_mats, weights)
    return gamma


def acg_fit_all_frequencies(z, valid, config, rngs=None):
    """Angular-central-Gaussian reference EM across all frequency bins.

    Uses the same seeded k-means initialization scheme as
    :func:`fit_all_frequencies`, so runs that share ``config.seed`` (and the
    k-means settings) start from identical masks; only the component model
    differs.  ``config.nu`` and ``config.shape`` are ignored.  Returns
    ``(masks (F, T, N), failed (F,))`` where failed bins carry uniform masks.
    """
    z = np.asarray(z, dtype=complex)
    valid = np.asarray(valid, dtype=bool)
    n_freq = z.shape[0]
    n_sources = config.n_sources
    if rngs is None:
        seqs = np.random.SeedSequence(config.seed).spawn(n_freq)
        rngs = [np.random.default_rng(s) for s in seqs]
    failed = valid.sum(axis=1) == 0
    gamma0 = _kmeans_batched(z, valid, n_sources, config.kmeans_attempts, rngs)
    masks = _cacg_fit_batched(
        z, valid, n_sources, config.max_outer_iters, gamma0, config.warmstart_iters
    )
    failed = failed | ~np.isfinite(masks).all(axis=(1, 2))
    if failed.any():
        masks[failed] = 1.0 / n_sources
    return masks, failed


def cacg_reference_fit(z_f, valid_f, N, iters, init, warmstart_iters=0):
    """Reference angular-central-Gaussian mixture EM at one frequency,
    started from the given masks; the concentration matrices are
    trace-normalized every iteration and regularized only when detected
    singular.  With zero iterations the initial masks are returned."""
    z_f = np.asarray(z_f, dtype=complex)
    valid_f = np.asarray(valid_f, dtype=bool)
    n_sources = check_positive_int(N, "N")
    init_arr = init.gamma if isinstance(init, Responsibilities) else np.asarray(init, dtype=float)
    masks = _cacg_fit_batched(
        z_f[None], valid_f[None], n_sources, int(iters), init_arr[None], int(warmstart_iters)
    )[0]
    return Responsibilities(gamma=masks)
