"""Batched confluent divided differences and exact simplex moments.

Means of the form ``E[g(c . r)]`` with ``r`` uniform on the probability
simplex reduce exactly to divided differences of an iterated antiderivative
of ``g`` over the nodes ``c`` (the Hermite-Genocchi identity); moments
weighted by simplex coordinates are the same divided differences with the
corresponding node duplicated.  This module evaluates those divided
differences for the kernels needed by the density normalizers -- ``x**a``,
``x**a * log(x)`` and ``exp(x)`` -- in a batched, numerically guarded way:

* nodes are sorted, and near-equal nodes are snapped to exact ties so the
  confluent (derivative) entries of the Newton table apply;
* adjacent first differences use cancellation-free ``expm1``/``log1p`` forms;
* node sets with small spread are summed as a Taylor series around the
  cluster center using complete homogeneous symmetric polynomials;
* a rounding-error bound is propagated through the difference table, and rows
  whose bound exceeds the accuracy target are recomputed with mpmath.
"""

import math

import mpmath
import numpy as np

__all__ = [
    "dd_eval",
    "simplex_mean_neg_power",
    "simplex_mean_neg_power_grad",
    "simplex_mean_neg_power_hess",
    "simplex_mean_exp",
    "simplex_mean_exp_grad",
    "simplex_mean_exp_hess",
]

_EPS = float(np.finfo(np.float64).eps)
_SNAP_REL = 1e-13
_RESONANCE_SNAP = 1e-10
_REL_TARGET = 1e-11
_CLUSTER_TERMS = 48
_MP_DPS = 60


# ---------------------------------------------------------------------------
# Kernels.  Each is identified by a string kind plus the exponent ``alpha``
# (ignored for "exp").


def _kernel_value(x, kind, alpha):
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if kind == "power":
            return x**alpha
        if kind == "power_log":
            return x**alpha * np.log(x)
        if kind == "exp":
            return np.exp(x)
    raise ValueError(f"unknown kernel {kind!r}")


def _binom_seq(alpha, m_first, count):
    """Generalized binomial coefficients binom(alpha, m) for
    m = m_first, ..., m_first+count-1."""
    out = np.empty(count)
    b = 1.0
    for i in range(m_first):
        b *= (alpha - i) / (i + 1)
    for k in range(count):
        out[k] = b
        b *= (alpha - (m_first + k)) / (m_first + k + 1)
    return out


def _powerlog_ab(alpha, m):
    """Coefficients (A, B) with d^m/dx^m [x^a log x] / m! =
    x^(a-m) (A log x + B)."""
    a_c, b_c = 1.0, 0.0
    for ell in range(m):
        a_c, b_c = (alpha - ell) * a_c / (ell + 1), ((alpha - ell) * b_c + a_c) / (ell + 1)
    return a_c, b_c


def _kernel_deriv_over_fact(x, m, kind, alpha):
    """f^(m)(x)/m! elementwise, with a rounding-error bound."""
    if m == 0:
        v = _kernel_value(x, kind, alpha)
        return v, 4 * _EPS * np.abs(v)
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if kind == "exp":
            v = np.exp(x) / math.factorial(m)
            return v, 4 * _EPS * np.abs(v)
        if kind == "power":
            coef = _binom_seq(alpha, m, 1)[0]
            v = coef * x ** (alpha - m)
            return v, 4 * _EPS * np.abs(v)
        if kind == "power_log":
            a_c, b_c = _powerlog_ab(alpha, m)
            lx = np.log(x)
            scale = x ** (alpha - m)
            v = scale * (a_c * lx + b_c)
            err = 4 * _EPS * np.abs(scale) * (np.abs(a_c * lx) + abs(b_c))
            return v, err
    raise ValueError(f"unknown kernel {kind!r}")


def _pair_dd(a, b, kind, alpha):
    """Stable (f(b)-f(a))/(b-a) for sorted a < b, with error bound."""
    d = b - a
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if kind == "exp":
            dominant = d > 690
            v = np.where(
                dominant,
                np.exp(np.minimum(b, 700.0)) / d,
                np.exp(a) * np.expm1(np.minimum(d, 690.0)) / d,
            )
            return v, 4 * _EPS * np.abs(v)
        t = d / a
        w = np.log1p(t)
        u = alpha * w
        dominant = u > 690
        safe_u = np.minimum(u, 690.0)
        if kind == "power":
            v = np.where(dominant, b**alpha / d, a**alpha * np.expm1(safe_u) / d)
            return v, 4 * _EPS * np.abs(v)
        if kind == "power_log":
            la = np.log(a)
            p1 = la * np.expm1(safe_u)
            p2 = w * np.exp(safe_u)
            v = np.where(dominant, b**alpha * np.log(b) / d, a**alpha * (p1 + p2) / d)
            err = np.where(
                dominant,
                4 * _EPS * np.abs(v),
                4 * _EPS * np.abs(a**alpha / d) * (np.abs(p1) + np.abs(p2)),
            )
            return v, err
    raise ValueError(f"unknown kernel {kind!r}")


# ---------------------------------------------------------------------------
# Newton table with confluent entries and error propagation


def _sort_and_snap(x):
    x = np.sort(x, axis=-1)
    for i in range(x.shape[-1] - 1):
        gap = x[..., i + 1] - x[..., i]
        scale = np.maximum(np.abs(x[..., i]), np.abs(x[..., i + 1]))
        tie = gap <= _SNAP_REL * np.maximum(scale, 1e-300)
        x[..., i + 1] = np.where(tie, x[..., i], x[..., i + 1])
    return x


def _table_batch(x, kind, alpha):
    """Confluent Newton divided-difference table over sorted snapped nodes.

    Returns the order-(K-1) divided difference per row and a propagated
    rounding-error bound."""
    _, K = x.shape
    v = _kernel_value(x, kind, alpha)
    e = 4 * _EPS * np.abs(v)
    for level in range(1, K):
        lo = x[:, : K - level]
        hi = x[:, level:]
        dx = hi - lo
        tied = dx == 0
        dx_safe = np.where(tied, 1.0, dx)
        with np.errstate(over="ignore", under="ignore", invalid="ignore"):
            new_v = (v[:, 1:] - v[:, :-1]) / dx_safe
            new_e = (
                e[:, 1:] + e[:, :-1] + _EPS * (np.abs(v[:, 1:]) + np.abs(v[:, :-1]))
            ) / np.abs(dx_safe) + _EPS * np.abs(new_v)
        if level == 1:
            pv, pe = _pair_dd(lo, hi, kind, alpha)
            new_v = np.where(tied, new_v, pv)
            new_e = np.where(tied, new_e, pe)
        if tied.any():
            dv, de = _kernel_deriv_over_fact(lo, level, kind, alpha)
            new_v = np.where(tied, dv, new_v)
            new_e = np.where(tied, de, new_e)
        v, e = new_v, new_e
    return v[:, 0], e[:, 0]


# ---------------------------------------------------------------------------
# Cluster series: dd over K nodes = sum_k f^(K-1+k)(center)/(K-1+k)! * h_k(delta)


def _homog_sym(delta, n_terms):
    """Complete homogeneous symmetric polynomials h_0..h_{n-1} of the rows of
    ``delta``, plus the same recurrence on |delta| as a magnitude bound."""
    b_rows, k_nodes = delta.shape
    h = np.zeros((b_rows, n_terms))
    habs = np.zeros((b_rows, n_terms))
    h[:, 0] = 1.0
    habs[:, 0] = 1.0
    for i in range(k_nodes):
        d = delta[:, i]
        ad = np.abs(d)
        for k in range(1, n_terms):
            h[:, k] += d * h[:, k - 1]
            habs[:, k] += ad * habs[:, k - 1]
    return h, habs


def _cluster_batch(x, kind, alpha):
    """Taylor-series evaluation around the cluster center.  Returns values,
    error bounds, and an accept mask (series judged converged)."""
    _, K = x.shape
    center = x.mean(axis=1)
    m0 = K - 1
    n_t = _CLUSTER_TERMS
    with np.errstate(over="ignore", under="ignore", divide="ignore", invalid="ignore"):
        if kind == "exp":
            h, habs = _homog_sym(x - center[:, None], n_t)
            inv_fact = np.array([1.0 / math.factorial(m0 + k) for k in range(n_t)])
            coefs = np.exp(center)[:, None] * inv_fact[None, :]
            coefs_abs = np.abs(coefs)
        else:
            # scale-free form: powers of the center folded into one prefactor
            h, habs = _homog_sym((x - center[:, None]) / center[:, None], n_t)
            pref = center ** (alpha - m0)
            if kind == "power":
                bseq = _binom_seq(alpha, m0, n_t)
                coefs = pref[:, None] * bseq[None, :]
                coefs_abs = np.abs(coefs)
            else:  # power_log
                a_list = np.empty(n_t)
                b_list = np.empty(n_t)
                for k in range(n_t):
                    a_list[k], b_list[k] = _powerlog_ab(alpha, m0 + k)
                lc = np.log(center)[:, None]
                coefs = pref[:, None] * (a_list[None, :] * lc + b_list[None, :])
                coefs_abs = np.abs(pref[:, None]) * (
                    np.abs(a_list[None, :] * lc) + np.abs(b_list[None, :])
                )
        terms = coefs * h
        val = terms.sum(axis=1)
        mag = coefs_abs * habs
        tail = mag[:, -1] + mag[:, -2]
        err = _EPS * mag.sum(axis=1) + 8 * tail
    scale = np.abs(val) + 1e-300
    ok = np.isfinite(val) & (tail <= 1e-13 * scale)
    return val, err, ok


# ---------------------------------------------------------------------------
# mpmath rescue


def _mp_deriv_over_fact(x, m, kind, alpha):
    if kind == "exp":
        return mpmath.exp(x) / mpmath.factorial(m)
    if kind == "power":
        return mpmath.binomial(alpha, m) * x ** (mpmath.mpf(alpha) - m)
    a_c, b_c = mpmath.mpf(1), mpmath.mpf(0)
    for ell in range(m):
        a_c, b_c = (alpha - ell) * a_c / (ell + 1), ((alpha - ell) * b_c + a_c) / (ell + 1)
    return x ** (mpmath.mpf(alpha) - m) * (a_c * mpmath.log(x) + b_c)


def _dd_row_mp(row, kind, alpha, dps=_MP_DPS):
    with mpmath.workdps(dps):
        xs = [mpmath.mpf(float(v)) for v in row]
        k_nodes = len(xs)
        cur = [_mp_deriv_over_fact(v, 0, kind, alpha) for v in xs]
        for level in range(1, k_nodes):
            nxt = []
            for i in range(k_nodes - level):
                if xs[i + level] == xs[i]:
                    nxt.append(_mp_deriv_over_fact(xs[i], level, kind, alpha))
                else:
                    nxt.append((cur[i + 1] - cur[i]) / (xs[i + level] - xs[i]))
            cur = nxt
        return float(cur[0])


# ---------------------------------------------------------------------------
# Entry point


def dd_eval(nodes, kind="power", alpha=0.0):
    """Divided difference of order K-1 over the K nodes in the last axis.

    Repeated (or nearly repeated) nodes are treated confluently.  The result
    is accurate to ~1e-11 relative; rows the float64 path cannot certify are
    transparently recomputed in high precision.
    """
    arr = np.asarray(nodes, dtype=np.float64)
    if arr.ndim == 0:
        raise ValueError("nodes must have at least one entry in the last axis")
    shape = arr.shape[:-1]
    k_nodes = arr.shape[-1]
    alpha = float(alpha)
    x = _sort_and_snap(arr.reshape(-1, k_nodes).copy())
    n_rows = x.shape[0]

    val = np.empty(n_rows)
    err = np.empty(n_rows)
    done = np.zeros(n_rows, dtype=bool)

    if k_nodes == 1:
        v, _ = _kernel_deriv_over_fact(x[:, 0], 0, kind, alpha)
        return v.reshape(shape)

    # exact full ties: pure derivative entry
    all_tied = x[:, 0] == x[:, -1]
    if all_tied.any():
        v, e = _kernel_deriv_over_fact(x[all_tied, 0], k_nodes - 1, kind, alpha)
        val[all_tied] = v
        err[all_tied] = e
        done |= all_tied

    # cluster series where the spread is small enough to converge fast
    rem = ~done
    if rem.any():
        spread = x[:, -1] - x[:, 0]
        if kind == "exp":
            eligible = rem & (spread < 0.4)
        else:
            center = x.mean(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                rel = spread / np.abs(center)
            eligible = rem & (center > 0) & (rel * (abs(alpha) + k_nodes + 4) < 0.2)
        if eligible.any():
            v, e, ok = _cluster_batch(x[eligible], kind, alpha)
            idx = np.flatnonzero(eligible)[ok]
            val[idx] = v[ok]
            err[idx] = e[ok]
            done[idx] = True

    rest = ~done
    if rest.any():
        v, e = _table_batch(x[rest], kind, alpha)
        val[rest] = v
        err[rest] = e

    bad = ~np.isfinite(val) | (err > np.maximum(_REL_TARGET * np.abs(val), 1e-320))
    if bad.any():
        for i in np.flatnonzero(bad):
            val[i] = _dd_row_mp(x[i], kind, alpha)
    return val.reshape(shape)


# ---------------------------------------------------------------------------
# Simplex moments of negative powers and exponentials


def _neg_power_antiderivative(s, folds):
    """Kernel spec (kind, alpha, coefficient) for the ``folds``-fold
    antiderivative of x**(-s), modulo polynomial terms (annihilated by
    divided differences of order >= folds).  Integer s in 1..folds hits a
    logarithmic branch."""
    if folds == 0:
        return "power", -float(s), 1.0
    m = int(round(s))
    if 1 <= m <= folds and abs(s - m) <= _RESONANCE_SNAP:
        coef = (-1.0) ** (m - 1) / (math.factorial(m - 1) * math.factorial(folds - m))
        return "power_log", float(folds - m), coef
    coef = 1.0
    for i in range(1, folds + 1):
        coef /= i - s
    return "power", float(folds - s), coef


def _check_positive_nodes(c):
    c = np.asarray(c, dtype=np.float64)
    if c.ndim == 0 or c.shape[-1] < 1:
        raise ValueError("node array must have entries along the last axis")
    if not np.all(c > 0):
        raise ValueError("simplex power moments require strictly positive nodes")
    return c


def _checked(vals, what):
    if not np.all(np.isfinite(vals) & (vals > 0)):
        raise RuntimeError(f"{what} produced a non-positive or non-finite value")
    return vals


def simplex_mean_neg_power(c, s):
    """E[(sum_j c_j r_j)**(-s)] for r uniform on the simplex; c > 0."""
    c = _check_positive_nodes(c)
    m_dim = c.shape[-1]
    s = float(s)
    if abs(s - m_dim) <= 1e-12 * m_dim:
        # the exponent matching the dimension gives an exact product form
        return 1.0 / np.prod(c, axis=-1)
    kind, alpha, coef = _neg_power_antiderivative(s, m_dim - 1)
    vals = math.factorial(m_dim - 1) * coef * dd_eval(c, kind, alpha)
    return _checked(vals, "simplex_mean_neg_power")


def simplex_mean_neg_power_grad(c, s, cols=None):
    """E[r_j (sum c r)**(-(s+1))] for each j: the j-th node duplicated.

    ``cols`` optionally restricts the computation to the listed node indices
    (output last axis then has ``len(cols)`` entries in that order)."""
    c = _check_positive_nodes(c)
    m_dim = c.shape[-1]
    s = float(s)
    kind, alpha, coef = _neg_power_antiderivative(s + 1.0, m_dim)
    pref = math.factorial(m_dim - 1) * coef
    sel = range(m_dim) if cols is None else list(cols)
    out = np.empty(c.shape[:-1] + (len(sel),))
    for k, j in enumerate(sel):
        nodes = np.concatenate([c, c[..., j : j + 1]], axis=-1)
        out[..., k] = pref * dd_eval(nodes, kind, alpha)
    return _checked(out, "simplex_mean_neg_power_grad")


def simplex_mean_neg_power_hess(c, s, pairs=None):
    """E[r_i r_j (sum c r)**(-(s+2))]: nodes i and j duplicated (a factor 2
    appears on the diagonal from the repeated-index moment).

    With ``pairs`` (a list of (i, j) index pairs) only those entries are
    computed and returned along the last axis instead of the full matrix."""
    c = _check_positive_nodes(c)
    m_dim = c.shape[-1]
    s = float(s)
    kind, alpha, coef = _neg_power_antiderivative(s + 2.0, m_dim + 1)
    pref = math.factorial(m_dim - 1) * coef

    def entry(i, j):
        nodes = np.concatenate([c, c[..., i : i + 1], c[..., j : j + 1]], axis=-1)
        v = pref * dd_eval(nodes, kind, alpha)
        return 2.0 * v if i == j else v

    if pairs is not None:
        out = np.stack([entry(i, j) for i, j in pairs], axis=-1)
        return _checked(out, "simplex_mean_neg_power_hess")
    out = np.empty(c.shape + (m_dim,))
    for i in range(m_dim):
        for j in range(i, m_dim):
            v = entry(i, j)
            out[..., i, j] = v
            out[..., j, i] = v
    return _checked(out, "simplex_mean_neg_power_hess")


def simplex_mean_exp(lam):
    """E[exp(sum_j lam_j r_j)] for r uniform on the simplex."""
    lam = np.asarray(lam, dtype=np.float64)
    m_dim = lam.shape[-1]
    vals = math.factorial(m_dim - 1) * dd_eval(lam, "exp")
    return _checked(vals, "simplex_mean_exp")


def simplex_mean_exp_grad(lam, cols=None):
    """E[r_j exp(sum lam r)] for each j (``cols`` restricts to the listed
    node indices, as in :func:`simplex_mean_neg_power_grad`)."""
    lam = np.asarray(lam, dtype=np.float64)
    m_dim = lam.shape[-1]
    pref = math.factorial(m_dim - 1)
    sel = range(m_dim) if cols is None else list(cols)
    out = np.empty(lam.shape[:-1] + (len(sel),))
    for k, j in enumerate(sel):
        nodes = np.concatenate([lam, lam[..., j : j + 1]], axis=-1)
        out[..., k] = pref * dd_eval(nodes, "exp")
    return _checked(out, "simplex_mean_exp_grad")


def simplex_mean_exp_hess(lam, pairs=None):
    """E[r_i r_j exp(sum lam r)] (``pairs`` as in
    :func:`simplex_mean_neg_power_hess`)."""
    lam = np.asarray(lam, dtype=np.float64)
    m_dim = lam.shape[-1]
    pref = math.factorial(m_dim - 1)

    def entry(i, j):
        nodes = np.concatenate([lam, lam[..., i : i + 1], lam[..., j : j + 1]], axis=-1)
        v = pref * dd_eval(nodes, "exp")
        return 2.0 * v if i == j else v

    if pairs is not None:
        out = np.stack([entry(i, j) for i, j in pairs], axis=-1)
        return _checked(out, "simplex_mean_exp_hess")
    out = np.empty(lam.shape + (m_dim,))
    for i in range(m_dim):
        for j in range(i, m_dim):
            v = entry(i, j)
            out[..., i, j] = v
            out[..., j, i] = v
    return _checked(out, "simplex_mean_exp_hess")
