"""Input-checking helpers shared across the package.

scikit-learn's array validation rejects complex input, so the checks needed
for complex spectral data live here instead: small functions that fail early
with a message naming the offending argument.
"""

import numbers

import numpy as np

__all__ = [
    "check_rng",
    "check_positive_int",
    "check_real_array",
    "check_complex_array",
    "check_unit_norm",
    "check_hermitian",
    "check_nu",
    "check_probability_vector",
]


def check_rng(seed_or_rng):
    """Coerce ``seed_or_rng`` (None, int seed, or Generator) to a Generator."""
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


def check_positive_int(value, name, minimum=1):
    if not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    value = int(value)
    if value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return value


def check_real_array(x, name, ndim=None):
    x = np.asarray(x)
    if np.iscomplexobj(x):
        raise TypeError(f"{name} must be real-valued")
    x = x.astype(np.float64, copy=False)
    if ndim is not None and x.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_complex_array(x, name, ndim=None):
    x = np.asarray(x, dtype=np.complex128)
    if ndim is not None and x.ndim != ndim:
        raise ValueError(f"{name} must have {ndim} dimensions, got {x.ndim}")
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{name} contains non-finite values")
    return x


def check_unit_norm(v, name, tol=1e-12):
    """Check unit 2-norm along the last axis."""
    v = np.asarray(v)
    norms = np.linalg.norm(v, axis=-1)
    if not np.allclose(norms, 1.0, atol=tol, rtol=0.0):
        worst = float(np.max(np.abs(norms - 1.0)))
        raise ValueError(f"{name} must have unit norm (max deviation {worst:.3e})")
    return v


def check_hermitian(a, name, tol=1e-10):
    a = np.asarray(a, dtype=np.complex128)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{name} must be a square matrix, got shape {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a))))
    dev = float(np.max(np.abs(a - np.conj(np.swapaxes(a, -1, -2)))))
    if dev > tol * scale:
        raise ValueError(f"{name} is not Hermitian (deviation {dev:.3e})")
    return 0.5 * (a + np.conj(np.swapaxes(a, -1, -2)))


def check_nu(nu):
    """Validate degrees of freedom: a positive float or ``inf``."""
    nu = float(nu)
    if np.isnan(nu) or nu <= 0:
        raise ValueError(f"nu must be positive (or inf), got {nu}")
    return nu


def check_probability_vector(w, name, tol=1e-12):
    w = check_real_array(w, name, ndim=1)
    if np.any(w < -tol):
        raise ValueError(f"{name} has negative entries")
    total = float(w.sum())
    if abs(total - 1.0) > max(tol, 1e-12 * w.size):
        raise ValueError(f"{name} must sum to 1, got {total!r}")
    return np.clip(w, 0.0, None)
