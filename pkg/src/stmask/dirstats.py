"""Densities, canonicalization, and normalizers for the complex spherical
Student's t family and its included models on the complex unit sphere.

All densities are taken with respect to the normalized uniform measure on the
complex unit sphere, so the zero-matrix shape parameter gives density one.
The normalizing constant of the full-shape density is an average over the
probability simplex of squared-modulus coordinates; it is evaluated either by
nested adaptive quadrature, by a truncated hypergeometric-type series, by the
exact divided-difference closed form, or by the dedicated infinite-dof limit
branch.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.integrate
import scipy.signal

from ._dd import simplex_mean_exp, simplex_mean_neg_power
from .validation import check_hermitian, check_positive_int, check_rng, check_unit_norm

__all__ = [
    "CanonicalHermitian",
    "RankOneParams",
    "CstParams",
    "LogNormalizer",
    "canonicalize",
    "log_unnormalized_density",
    "log_normalizer_full",
    "log_normalizer_rank_one",
    "sample_uniform_sphere",
    "mc_normalizer_oracle",
]

_EIG_TIE_TOL = 1e-12


@dataclass(frozen=True)
class CanonicalHermitian:
    """Eigendecomposition of a shape matrix in canonical form: eigenvalues
    sorted descending with the largest equal to zero and the rest <= 0."""

    eigvecs: np.ndarray
    eigvals: np.ndarray

    @property
    def m_dim(self):
        return self.eigvals.shape[0]

    @property
    def matrix(self):
        return (self.eigvecs * self.eigvals) @ self.eigvecs.conj().T


@dataclass(frozen=True)
class RankOneParams:
    """Rank-one constrained shape: a preferred unit direction ``a`` holding
    the single zero eigenvalue, all orthogonal directions at ``-kappa``."""

    a: np.ndarray
    kappa: float

    @property
    def m_dim(self):
        return self.a.shape[0]

    @property
    def matrix(self):
        eye = np.eye(self.m_dim, dtype=complex)
        outer = np.outer(self.a, self.a.conj())
        return -self.kappa * (eye - outer)


@dataclass(frozen=True)
class CstParams:
    """A component density: full or rank-one shape plus degrees of freedom
    ``nu`` (finite, or ``math.inf`` for the Bingham/Watson limit)."""

    shape: object
    nu: float

    @property
    def is_rank_one(self):
        return isinstance(self.shape, RankOneParams)

    @property
    def m_dim(self):
        return self.shape.m_dim


@dataclass(frozen=True)
class LogNormalizer:
    """log C together with the evaluation method actually used."""

    value: float
    method: str


def _phase_normalize_columns(u):
    """Rotate each column's global phase so its first significantly nonzero
    entry is real positive (deterministic representative)."""
    u = u.copy()
    mags = np.abs(u)
    thr = 1e-12 * np.maximum(mags.max(axis=0, keepdims=True), 1e-300)
    for k in range(u.shape[1]):
        nz = np.flatnonzero(mags[:, k] > thr[0, k])
        if nz.size:
            pivot = u[nz[0], k]
            u[:, k] = u[:, k] * (pivot.conjugate() / abs(pivot))
    return u


def _order_descending_with_tie_break(eigvals, eigvecs):
    """Sort eigenpairs by descending eigenvalue; break exact ties by
    lexicographic comparison of the phase-normalized eigenvector real parts."""
    order = np.argsort(-eigvals, kind="stable")
    eigvals = eigvals[order]
    eigvecs = eigvecs[:, order]
    eigvecs = _phase_normalize_columns(eigvecs)
    scale = max(np.max(np.abs(eigvals)), 1.0)
    m = eigvals.shape[0]
    start = 0
    while start < m:
        stop = start + 1
        while stop < m and abs(eigvals[stop] - eigvals[start]) <= _EIG_TIE_TOL * scale:
            stop += 1
        if stop - start > 1:
            keys = [tuple(np.round(eigvecs[:, k].real, 10)) for k in range(start, stop)]
            sub = sorted(range(start, stop), key=lambda k: keys[k - start])
            eigvecs[:, start:stop] = eigvecs[:, sub]
            eigvals[start:stop] = eigvals[sub]
        start = stop
    return eigvals, eigvecs


def canonicalize(hermitian, nu):
    """Shift and rescale a Hermitian shape matrix to the canonical form that
    defines the same normalized density: (A - aI)/(1 - 2a/nu) with a the
    largest eigenvalue, so the output's largest eigenvalue is exactly zero.
    """
    a_mat = check_hermitian(np.asarray(hermitian, dtype=complex), "hermitian")
    nu = float(nu)
    if not nu > 0:
        raise ValueError("nu must be positive (or infinite)")
    eigvals, eigvecs = np.linalg.eigh(a_mat)
    top = float(eigvals[-1])
    if math.isfinite(nu) and top >= nu / 2:
        raise ValueError(
            f"largest eigenvalue {top} violates the constraint lambda_max < nu/2 = {nu / 2}"
        )
    scale = 1.0 if math.isinf(nu) else 1.0 - 2.0 * top / nu
    shifted = (eigvals - top) / scale
    shifted[np.argmax(eigvals)] = 0.0
    vals, vecs = _order_descending_with_tie_break(shifted, eigvecs)
    vals = np.minimum(vals, 0.0)
    vals[0] = 0.0
    return CanonicalHermitian(eigvecs=vecs, eigvals=vals)


def _quad_form_eigvals(z, shape):
    """z^H A z via the eigenbasis; z may be batched in leading axes."""
    proj = np.abs(np.einsum("...m,mk->...k", z.conj(), shape.eigvecs)) ** 2
    return proj @ shape.eigvals


def log_unnormalized_density(z, params):
    """Log unnormalized density at unit vector(s) ``z`` (batched in leading
    axes).  Finite nu: -(nu+M)/2 * log(1 - (2/nu) z^H A z).  Infinite nu:
    the Bingham exponent z^H A z, or -kappa (1 - |a^H z|^2) for rank-one."""
    z = check_unit_norm(np.asarray(z, dtype=complex), "z")
    nu = float(params.nu)
    m_dim = params.m_dim
    if params.is_rank_one:
        quad = -params.shape.kappa * (1.0 - np.abs(z.conj() @ params.shape.a) ** 2)
    else:
        quad = _quad_form_eigvals(z, params.shape)
    if math.isinf(nu):
        return quad
    s_exp = (nu + m_dim) / 2.0
    return -s_exp * np.log1p(-2.0 * quad / nu)


def _simplex_quadrature(c, s_exp, tolerance):
    """Nested adaptive quadrature of E[(c . r)^-s] over the uniform simplex.

    Returns (value, success).  The recursion integrates the bare simplex
    integral; the (M-1)! volume factor converts it to a mean."""
    c = np.asarray(c, dtype=float)
    m_dim = c.shape[0]
    if m_dim == 1:
        return float(c[0] ** (-s_exp)), True
    failed = []

    def body(depth, remaining, acc):
        # depth indexes c[1:]; remaining is the unassigned simplex mass
        if depth == m_dim:
            return (acc + c[0] * remaining) ** (-s_exp)
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.integrate.IntegrationWarning)
            try:
                val, abserr = scipy.integrate.quad(
                    lambda u: body(depth + 1, remaining - u, acc + c[depth] * u),
                    0.0,
                    remaining,
                    epsabs=0.0,
                    epsrel=max(tolerance / 10.0, 1e-13),
                    limit=200,
                )
            except scipy.integrate.IntegrationWarning:
                failed.append(True)
                return 0.0
        if depth == 1:
            failed.append(abserr > 10.0 * tolerance * max(abs(val), 1e-300))
        return val

    raw = body(1, 1.0, 0.0)
    value = math.factorial(m_dim - 1) * raw
    return value, not any(failed)


def _series_mean(c, s_exp, tol=1e-12, max_terms=10_000):
    """Hypergeometric-type series for E[(c . r)^-s]: factor out the largest
    node and expand the remainder in complete homogeneous polynomials.

    Returns (value, success); success is False when the term ratio has not
    fallen below ``tol`` within the term cap."""
    c = np.asarray(c, dtype=float)
    m_dim = c.shape[0]
    c_max = float(c.max())
    d = 1.0 - c / c_max
    # h_k(d) via one geometric (IIR) convolution per node
    h = np.zeros(max_terms)
    h[0] = 1.0
    for dj in d:
        if dj != 0.0:
            h = scipy.signal.lfilter([1.0], [1.0, -dj], h)
    coef = 1.0  # (s)_k (M-1)! / (M-1+k)! at k = 0
    total = 0.0
    converged = False
    for k in range(max_terms):
        term = coef * h[k]
        total += term
        if k > 0 and abs(term) <= tol * abs(total):
            converged = True
            break
        coef *= (s_exp + k) / (m_dim + k)
    value = c_max ** (-s_exp) * total
    return value, converged


def log_normalizer_full(shape, nu, method="auto", tolerance=1e-10):
    """log C for the full-shape density with canonical eigenvalues.

    C^{-1} is the simplex mean of (1 - (2/nu) sum_j lambda_j r_j)^{-(nu+M)/2}.
    Methods: "simplex_quadrature" (adaptive, falls back to "series" on
    reported failure), "series", "closed_form" (exact divided differences),
    "limit" (infinite nu, exponential Bingham normalizer), or "auto".
    """
    eigvals = np.asarray(
        shape.eigvals if isinstance(shape, CanonicalHermitian) else shape, dtype=float
    )
    m_dim = eigvals.shape[0]
    nu = float(nu)
    if method == "auto":
        method = "limit" if math.isinf(nu) else "closed_form"
    if method == "limit":
        if not math.isinf(nu):
            raise ValueError("the limit method applies only to infinite nu")
        value = -math.log(float(simplex_mean_exp(eigvals)))
        return LogNormalizer(value=value, method="limit")
    if math.isinf(nu):
        raise ValueError(f"method {method!r} requires finite nu")
    s_exp = (nu + m_dim) / 2.0
    c_nodes = 1.0 - 2.0 * eigvals / nu
    if method == "closed_form":
        value = -math.log(float(simplex_mean_neg_power(c_nodes, s_exp)))
        return LogNormalizer(value=value, method="closed_form")
    if method == "simplex_quadrature":
        mean, ok = _simplex_quadrature(c_nodes, s_exp, tolerance)
        if ok and mean > 0:
            return LogNormalizer(value=-math.log(mean), method="simplex_quadrature")
        mean, ok = _series_mean(c_nodes, s_exp)
        if ok and mean > 0:
            return LogNormalizer(value=-math.log(mean), method="series")
        raise ArithmeticError(
            "both the simplex quadrature and the series fallback failed to converge"
        )
    if method == "series":
        mean, ok = _series_mean(c_nodes, s_exp)
        if not ok or not mean > 0:
            raise ArithmeticError("the normalizer series did not converge")
        return LogNormalizer(value=-math.log(mean), method="series")
    raise ValueError(f"unknown normalizer method {method!r}")


def log_normalizer_rank_one(kappa, nu, M):
    """log C for the rank-one constrained density.

    Z(kappa, nu) = (M-1) int_0^1 u^(M-2) (1 + (2 kappa/nu) u)^(-(nu+M)/2) du,
    evaluated exactly as a confluent simplex mean; the infinite-nu branch is
    the Watson-limit normalizer E[exp(-kappa u)] with u ~ Beta(M-1, 1).
    """
    kappa = float(kappa)
    m_dim = check_positive_int(M, "M")
    nu = float(nu)
    if kappa < 0:
        raise ValueError("kappa must be nonnegative")
    if kappa == 0.0:
        return LogNormalizer(value=0.0, method="closed_form" if math.isfinite(nu) else "limit")
    if math.isinf(nu):
        lam = np.full(m_dim, -kappa)
        lam[0] = 0.0
        value = -math.log(float(simplex_mean_exp(lam)))
        return LogNormalizer(value=value, method="limit")
    s_exp = (nu + m_dim) / 2.0
    c_nodes = np.full(m_dim, 1.0 + 2.0 * kappa / nu)
    c_nodes[0] = 1.0
    value = -math.log(float(simplex_mean_neg_power(c_nodes, s_exp)))
    return LogNormalizer(value=value, method="closed_form")


def sample_uniform_sphere(M, rng, n=None):
    """Uniform draw(s) on the complex unit sphere: normalized standard
    complex Gaussians.  Returns shape (M,) or (n, M)."""
    m_dim = check_positive_int(M, "M")
    rng = check_rng(rng)
    size = (m_dim,) if n is None else (int(n), m_dim)
    z = rng.standard_normal(size) + 1j * rng.standard_normal(size)
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    # a zero draw has probability zero; guard anyway
    norms = np.where(norms == 0, 1.0, norms)
    return z / norms


def mc_normalizer_oracle(params, n_samples, rng):
    """Monte Carlo estimate of C^{-1} = E_uniform[unnormalized density],
    with its standard error."""
    n_samples = check_positive_int(n_samples, "n_samples")
    rng = check_rng(rng)
    z = sample_uniform_sphere(params.m_dim, rng, n=n_samples)
    vals = np.exp(log_unnormalized_density(z, params))
    estimate = float(vals.mean())
    if n_samples == 1:
        return estimate, 0.0
    std_err = float(vals.std(ddof=1) / math.sqrt(n_samples))
    return estimate, std_err
