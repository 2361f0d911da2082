"""Scalar Gaussian kernels and their sound interval extensions.

Closed-form first moments of clipped and truncated Gaussians, the error
function pair used throughout, and `kernel_range`: interval enclosures of
each kernel over a rectangle of (mu, sigma) parameters. The error function
is built in-repo (series + continued fraction) so certificates do not
depend on platform libm behaviour.

Conventions for sigma == 0 (legal zero-variance nodes): every kernel takes
its exact degenerate (point-mass) value, e.g. the probability of a closed
interval becomes an indicator and the rectified mean becomes max(mu, 0).
"""

from __future__ import annotations

import math

import numpy as np

from .relaxcore import Interval

SQRT2 = math.sqrt(2.0)
SQRT_PI = math.sqrt(math.pi)
INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
TWO_OVER_SQRT_PI = 2.0 / SQRT_PI

# series/continued-fraction crossover for the error function
_ERF_SWITCH = 3.0
_CF_DEPTH = 64

# outward widening applied to searched interval enclosures
RANGE_WIDENING = 1e-9


# ---------------------------------------------------------------------------
# error function pair


def _erf_series(x: np.ndarray) -> np.ndarray:
    # erf(x) = 2/sqrt(pi) * exp(-x^2) * sum_n (2x^2)^n x / (1*3*...*(2n+1));
    # all terms positive, so no cancellation; converges for |x| <= 3 in < 80 terms
    x2 = x * x
    term = x.copy()
    acc = x.copy()
    for n in range(1, 200):
        term = term * (2.0 * x2) / (2.0 * n + 1.0)
        acc = acc + term
        if np.all(term <= 1e-18 * acc):
            break
    return TWO_OVER_SQRT_PI * np.exp(-x2) * acc


def _erfcx_cf(x: np.ndarray) -> np.ndarray:
    # scaled complement exp(x^2) erfc(x) for x >= 3 via the Laplace continued
    # fraction, evaluated by backward recurrence; no overflow anywhere
    t = np.zeros_like(x)
    for k in range(_CF_DEPTH, 0, -1):
        t = (0.5 * k) / (x + t)
    return 1.0 / (SQRT_PI * (x + t))


def erf(x):
    """Error function, absolute error below 1e-14; handles +-inf."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    ax = np.abs(np.atleast_1d(x))
    out = np.ones_like(ax)
    small = ax < _ERF_SWITCH
    if np.any(small):
        out[small] = _erf_series(ax[small])
    big = ~small & np.isfinite(ax)
    if np.any(big):
        xb = ax[big]
        out[big] = 1.0 - np.exp(-xb * xb) * _erfcx_cf(xb)
    out = np.where(np.atleast_1d(x) < 0, -out, out)
    return float(out[0]) if scalar else out


def erfc(x):
    """Complementary error function 1 - erf(x), accurate into the far tail."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    xv = np.atleast_1d(x)
    out = np.empty_like(xv)
    big = xv >= _ERF_SWITCH
    if np.any(big):
        xb = xv[big]
        out[big] = np.exp(-xb * xb) * _erfcx_cf(xb)
    rest = ~big
    if np.any(rest):
        out[rest] = 1.0 - erf(xv[rest])
    return float(out[0]) if scalar else out


def _erfinv_scalar(p: float) -> float:
    if math.isnan(p):
        return math.nan
    if p < -1.0 or p > 1.0:
        raise ValueError(f"erfinv domain is [-1, 1], got {p}")
    if p == 1.0:
        return math.inf
    if p == -1.0:
        return -math.inf
    if p == 0.0:
        return 0.0
    sign = 1.0 if p > 0 else -1.0
    q = abs(p)
    # Winitzki seed, then Newton; good to ~1e-3 everywhere
    a = 0.147
    ln1mq2 = math.log1p(-q * q)
    u = 2.0 / (math.pi * a) + 0.5 * ln1mq2
    x = math.sqrt(max(math.sqrt(u * u - ln1mq2 / a) - u, 0.0))
    if q < 0.99999:
        # root is below ~3.12, so Newton on erf(x) - q with a modest exp(x^2)
        for _ in range(60):
            step = (erf(x) - q) * 0.5 * SQRT_PI * math.exp(x * x)
            x -= step
            if abs(step) <= 1e-16 * max(1.0, x):
                break
    else:
        # root is >= 3.12, inside the continued-fraction region: Newton on
        # log erfc(x) = log(1 - q); 1 - q is exact for q >= 0.5 and the
        # scaled complement avoids exp overflow entirely
        log_r = math.log1p(-q)
        x = max(x, _ERF_SWITCH)
        for _ in range(60):
            ecx = float(_erfcx_cf(np.asarray([x]))[0])
            f = math.log(ecx) - x * x - log_r
            step = f * 0.5 * SQRT_PI * ecx
            x += step
            if abs(step) <= 1e-16 * max(1.0, x):
                break
    return sign * x


def erfinv(p):
    """Inverse error function on (-1, 1); +-1 map to +-inf."""
    p_arr = np.asarray(p, dtype=float)
    if p_arr.ndim == 0:
        return _erfinv_scalar(float(p_arr))
    return np.array([_erfinv_scalar(float(v)) for v in p_arr.ravel()]).reshape(
        p_arr.shape
    )


# ---------------------------------------------------------------------------
# rectified / truncated first moments


def _prep(mu, sigma):
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    scalar = mu.ndim == 0 and sigma.ndim == 0
    mu, sigma = np.broadcast_arrays(np.atleast_1d(mu), np.atleast_1d(sigma))
    if np.any(sigma < 0):
        raise ValueError("sigma must be nonnegative")
    return mu.astype(float), sigma.astype(float), scalar


def _ret(out, scalar):
    return float(out[0]) if scalar else out


def rect_mean(mu, sigma):
    """E[max(X, 0)] for X ~ N(mu, sigma^2); max(mu, 0) when sigma == 0."""
    mu, sigma, scalar = _prep(mu, sigma)
    out = np.maximum(mu, 0.0)
    pos = (sigma > 0) & np.isfinite(mu)
    if np.any(pos):
        m, s = mu[pos], sigma[pos]
        with np.errstate(over="ignore"):
            t = m / (s * SQRT2)
            val = 0.5 * m * (1.0 + erf(t)) + s * INV_SQRT_2PI * np.exp(-t * t)
        # the exact value is nonnegative; deep in the left tail the two
        # terms cancel and can round to a tiny negative number
        out[pos] = np.maximum(val, 0.0)
    # infinite means keep their limit values max(mu, 0) from the init
    return _ret(out, scalar)


def rect_mean_grad(mu, sigma):
    """(d/dmu, d/dsigma) of rect_mean; sigma must be positive."""
    mu, sigma, scalar = _prep(mu, sigma)
    if np.any(sigma == 0):
        raise ValueError("rect_mean_grad undefined at sigma == 0")
    t = mu / (sigma * SQRT2)
    d_mu = 0.5 * (1.0 + erf(t))
    d_sigma = INV_SQRT_2PI * np.exp(-t * t)
    return (_ret(d_mu, scalar), _ret(d_sigma, scalar))


def rect_mean_hess(mu, sigma):
    """Analytic 2x2 Hessian of rect_mean in (mu, sigma); sigma > 0.

    Equals pdf(mu/sigma)/sigma * [[1, -u], [-u, u*u]] with u = mu/sigma,
    a rank-one positive-semidefinite matrix.
    """
    mu, sigma, scalar = _prep(mu, sigma)
    if np.any(sigma == 0):
        raise ValueError("rect_mean_hess undefined at sigma == 0")
    u = mu / sigma
    phi = INV_SQRT_2PI * np.exp(-0.5 * u * u)
    base = phi / sigma
    h = np.empty(mu.shape + (2, 2))
    h[..., 0, 0] = base
    h[..., 0, 1] = -base * u
    h[..., 1, 0] = -base * u
    h[..., 1, 1] = base * u * u
    return h[0] if scalar else h


def _box_prob_1d(mu, sigma, lo, hi):
    """P[X in [lo, hi]] for X ~ N(mu, sigma^2); closed-interval indicator
    at sigma == 0. Ends may be infinite."""
    mu = np.asarray(mu, dtype=float)
    sigma, lo, hi = (np.asarray(v, dtype=float) for v in (sigma, lo, hi))
    mu, sigma, lo, hi = np.broadcast_arrays(
        np.atleast_1d(mu), sigma, lo, hi
    )
    out = np.where((lo <= mu) & (mu <= hi), 1.0, 0.0)
    pos = sigma > 0
    if np.any(pos):
        m, s, a, b = mu[pos], sigma[pos], lo[pos], hi[pos]
        denom = s * SQRT2
        with np.errstate(invalid="ignore"):
            e_hi = np.where(np.isposinf(b), 1.0, erf((b - m) / denom))
            e_lo = np.where(np.isneginf(a), -1.0, erf((a - m) / denom))
        out[pos] = np.maximum(0.5 * (e_hi - e_lo), 0.0)
    return out


def box_prob(mu, sigma, box) -> float:
    """P[X in box] for independent coordinates X_i ~ N(mu_i, sigma_i^2)."""
    vals = _box_prob_1d(mu, sigma, box.lo, box.hi)
    return float(np.prod(vals))


def _upper_tail_mass(mu, sigma, c):
    """Integral of z N(z; mu, sigma^2) over [c, inf); c may be +-inf.

    Closed form (mu/2)(1 - erf(t)) + sigma/sqrt(2 pi) exp(-t^2) with
    t = (c - mu)/(sigma sqrt2); point-mass value mu * 1{mu >= c} at sigma 0.
    """
    mu = np.asarray(mu, dtype=float)
    sigma, c = np.asarray(sigma, dtype=float), np.asarray(c, dtype=float)
    mu, sigma, c = np.broadcast_arrays(np.atleast_1d(mu), sigma, c)
    out = np.where(mu >= c, mu, 0.0)
    pos = sigma > 0
    if np.any(pos):
        m, s, cc = mu[pos], sigma[pos], c[pos]
        res = np.empty_like(m)
        fin = np.isfinite(cc)
        if np.any(fin):
            t = (cc[fin] - m[fin]) / (s[fin] * SQRT2)
            res[fin] = 0.5 * m[fin] * (1.0 - erf(t)) + s[fin] * INV_SQRT_2PI * np.exp(
                -t * t
            )
        if np.any(~fin):
            # c = -inf gives the full mean, c = +inf gives zero
            res[~fin] = np.where(np.isneginf(cc[~fin]), m[~fin], 0.0)
        out[pos] = res
    return out


def trunc_relu_mass(mu, sigma, a, b):
    """Integral of max(z,0) N(z; mu, sigma^2) over [a, b] (ends may be inf).

    Equals the [max(a,0), max(b,0)] portion of the first moment; evaluated
    as a difference of two upper-tail masses so a == b is exactly zero.
    """
    mu = np.asarray(mu, dtype=float)
    scalar = mu.ndim == 0 and np.ndim(a) == 0 and np.ndim(sigma) == 0
    a = np.maximum(np.asarray(a, dtype=float), 0.0)
    b = np.maximum(np.asarray(b, dtype=float), 0.0)
    if np.any(a > b):
        raise ValueError("need a <= b")
    out = _upper_tail_mass(mu, sigma, a) - _upper_tail_mass(mu, sigma, b)
    out = np.maximum(out, 0.0)
    return _ret(out, scalar)


def trunc_id_mass(mu, sigma, a, b):
    """Integral of z N(z; mu, sigma^2) over [a, b] (ends may be infinite)."""
    mu = np.asarray(mu, dtype=float)
    scalar = mu.ndim == 0 and np.ndim(a) == 0 and np.ndim(sigma) == 0
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.any(a > b):
        raise ValueError("need a <= b")
    out = _upper_tail_mass(mu, sigma, a) - _upper_tail_mass(mu, sigma, b)
    # sign is pinned by the integration window; cancellation can break it
    out = np.where(a >= 0, np.maximum(out, 0.0), out)
    out = np.where(b <= 0, np.minimum(out, 0.0), out)
    return _ret(out, scalar)


def tail_relu_mass_exact(mu, sigma, a):
    """Integral of z N(z; mu, sigma^2) over [max(a, 0), inf)."""
    mu = np.asarray(mu, dtype=float)
    scalar = mu.ndim == 0 and np.ndim(a) == 0 and np.ndim(sigma) == 0
    out = _upper_tail_mass(mu, sigma, np.maximum(np.asarray(a, dtype=float), 0.0))
    return _ret(out, scalar)


def tail_relu_mass_bounds(mu, sigma, a) -> Interval:
    """Displayed decay bounds for the relu tail mass, valid only under the
    side condition max(a, 0) >= mu; raises otherwise so callers fall back
    to the exact form. Lower end clamped at 0 (the integrand is nonneg)."""
    mu_f = float(mu)
    sigma_f = float(sigma)
    if max(float(a), 0.0) < mu_f:
        raise ValueError("side condition max(a,0) >= mu violated")
    lo = max(0.0, 0.5 * min(mu_f, 0.0))
    hi = 0.5 * max(mu_f, 0.0) + sigma_f * INV_SQRT_2PI
    return Interval(lo, hi)


# ---------------------------------------------------------------------------
# interval extensions over (mu, sigma) rectangles


def _g_at(mu, sigma):
    # rect_mean tolerant of infinite mu (limits 0 and +inf)
    return rect_mean(mu, sigma)


def _range_g_terms(ml, mh, sl, sh):
    """Enclosure of rect_mean over [ml, mh] x [sl, sh] (vectorized).

    Max at the four rectangle corners (joint convexity); min from the
    tangent plane at the rectangle center evaluated at its own corner
    minimum, clamped at 0. Degenerate rectangles return exact values.
    """
    ml, mh, sl, sh = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(v, dtype=float)) for v in (ml, mh, sl, sh))
    )
    point = (ml == mh) & (sl == sh)
    g_ll = _g_at(ml, sl)
    g_hl = _g_at(mh, sl)
    g_lh = _g_at(ml, sh)
    g_hh = _g_at(mh, sh)
    hi = np.maximum(np.maximum(g_ll, g_hl), np.maximum(g_lh, g_hh))

    mc = 0.5 * (ml + mh)
    sc = 0.5 * (sl + sh)
    lo = np.zeros_like(hi)
    okc = (sc > 0) & np.isfinite(mc)
    if np.any(okc):
        t = mc[okc] / (sc[okc] * SQRT2)
        d_mu = 0.5 * (1.0 + erf(t))
        d_sigma = INV_SQRT_2PI * np.exp(-t * t)
        g_c = _g_at(mc[okc], sc[okc])
        # both partials are nonnegative, so the plane's corner min is (ml, sl)
        lo[okc] = g_c + d_mu * (ml[okc] - mc[okc]) + d_sigma * (sl[okc] - sc[okc])
    deg = ~okc
    if np.any(deg):
        # sigma identically 0 (or mu infinite): monotone corner value is exact
        lo[deg] = _g_at(ml[deg], sl[deg])
    lo = np.maximum(lo, 0.0)

    w_lo = np.where(point, lo, np.maximum(lo - RANGE_WIDENING, 0.0))
    w_hi = np.where(point, hi, hi + RANGE_WIDENING)
    return w_lo, w_hi


def _prob_min_eval(mu, sigma, a, b):
    """box_prob_1d with the sigma -> 0+ limit at sigma == 0, used on the
    minimum side of enclosures (limit <= point-mass value everywhere)."""
    mu, sigma, a, b = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(v, dtype=float)) for v in (mu, sigma, a, b))
    )
    out = _box_prob_1d(mu, sigma, a, b)
    z = sigma == 0
    if np.any(z):
        m, lo, hi = mu[z], a[z], b[z]
        lim = np.where((m > lo) & (m < hi), 1.0, 0.0)
        lim = np.where((lo < hi) & ((m == lo) | (m == hi)), 0.5, lim)
        lim = np.where(lo == hi, 0.0, lim)
        out[z] = lim
    return out


def _peak_sigma(mu, sl, sh, a, b):
    """argmax over sigma in [sl, sh] of the interval probability at fixed mu.

    With u = a-mu, v = b-mu the stationary point of Phi(v/s) - Phi(u/s)
    solves u*phi(u/s) = v*phi(v/s), giving s^2 = (v^2-u^2)/(2 ln(v/u)) when
    u, v share a sign; for mu inside [a, b] the probability only falls as
    sigma grows.  Clipping the stationary point into [sl, sh] is exact
    because the map is unimodal in sigma.
    """
    u = a - mu
    v = b - mu
    lo_d = np.minimum(np.abs(u), np.abs(v))
    hi_d = np.maximum(np.abs(u), np.abs(v))
    inside = (u < 0) & (v > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        num = hi_d * hi_d - lo_d * lo_d
        den = 2.0 * (np.log(hi_d) - np.log(lo_d))
        s_star = np.sqrt(num / den)
    s_star = np.where(inside | (lo_d == 0.0), 0.0, s_star)
    s_star = np.where(np.isposinf(hi_d) & ~inside, np.inf, s_star)
    s_star = np.where(lo_d == hi_d, 0.0, s_star)  # a == b: mass is 0 anyway
    return np.clip(s_star, sl, sh)


def _range_box_prob_1d(ml, mh, sl, sh, a, b):
    """Enclosure of the one-coordinate interval probability over a
    (mu, sigma) rectangle. See kernel_range for the search layout."""
    ml, mh, sl, sh, a, b = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(v, dtype=float)) for v in (ml, mh, sl, sh, a, b))
    )
    point = (ml == mh) & (sl == sh)

    # maximum: peak mu is the clamped interval midpoint (two-sided) or the
    # nearest end (one-sided); sigma by endpoints plus ternary search
    a_fin = np.where(np.isneginf(a), 0.0, a)
    b_fin = np.where(np.isposinf(b), 0.0, b)
    mid = np.where(
        np.isneginf(a),
        np.where(np.isposinf(b), 0.5 * (ml + mh), ml),
        np.where(np.isposinf(b), mh, 0.5 * (a_fin + b_fin)),
    )
    mu_star = np.clip(mid, ml, mh)
    cands = [
        _box_prob_1d(mu_star, sl, a, b),
        _box_prob_1d(mu_star, sh, a, b),
        _box_prob_1d(mu_star, _peak_sigma(mu_star, sl, sh, a, b), a, b),
    ]
    hi = np.maximum.reduce(cands)

    # minimum: attained at a rectangle corner (monotone in mu on either side
    # of the peak; monotone or unimodal in sigma at fixed mu)
    mins = [
        _prob_min_eval(ml, sl, a, b),
        _prob_min_eval(ml, sh, a, b),
        _prob_min_eval(mh, sl, a, b),
        _prob_min_eval(mh, sh, a, b),
    ]
    lo = np.minimum.reduce(mins)

    if np.any(point):
        exact = _box_prob_1d(ml, sl, a, b)
        lo = np.where(point, exact, lo - RANGE_WIDENING)
        hi = np.where(point, exact, hi + RANGE_WIDENING)
    else:
        lo = lo - RANGE_WIDENING
        hi = hi + RANGE_WIDENING
    return np.clip(lo, 0.0, 1.0), np.clip(hi, 0.0, 1.0)


def _range_tail_prob(ml, mh, sl, sh, c, upper_tail: bool):
    """Enclosure of P[X >= c] (or P[X <= c]) over the rectangle; these
    one-sided probabilities are monotone in both mu and sigma directions
    per fixed side, so corners suffice."""
    if upper_tail:
        return _range_box_prob_1d(ml, mh, sl, sh, c, np.inf)
    return _range_box_prob_1d(ml, mh, sl, sh, -np.inf, c)


def _iv_add(*ivs):
    lo = sum(iv[0] for iv in ivs)
    hi = sum(iv[1] for iv in ivs)
    return lo, hi


def _iv_negate(iv):
    lo, hi = iv
    return -hi, -lo


def _iv_scale(iv, c):
    # c is a finite per-element array of constants
    lo, hi = iv
    c = np.asarray(c, dtype=float)
    return np.where(c >= 0, c * lo, c * hi), np.where(c >= 0, c * hi, c * lo)


def _range_trunc_mass(ml, mh, sl, sh, a, b, relu: bool):
    ml, mh, sl, sh, a, b = np.broadcast_arrays(
        *(np.atleast_1d(np.asarray(v, dtype=float)) for v in (ml, mh, sl, sh, a, b))
    )
    point = (ml == mh) & (sl == sh)
    if relu:
        a = np.maximum(a, 0.0)
        b = np.maximum(b, 0.0)
    zero = np.zeros_like(ml)

    # lower-end term: contributes the full mean interval when a = -inf
    a_fin = np.isfinite(a)
    a_safe = np.where(a_fin, a, 0.0)
    g_a = _range_g_terms(ml - a_safe, mh - a_safe, sl, sh)
    p_a = _range_tail_prob(ml, mh, sl, sh, a_safe, upper_tail=True)
    term_a = _iv_add(g_a, _iv_scale(p_a, a_safe))
    term_a = (np.where(a_fin, term_a[0], ml), np.where(a_fin, term_a[1], mh))

    # upper-end term: vanishes when b = +inf
    b_fin = np.isfinite(b)
    b_safe = np.where(b_fin, b, 0.0)
    g_b = _range_g_terms(ml - b_safe, mh - b_safe, sl, sh)
    p_b = _range_tail_prob(ml, mh, sl, sh, b_safe, upper_tail=True)
    term_b = _iv_add(g_b, _iv_scale(p_b, b_safe))
    term_b = (np.where(b_fin, term_b[0], zero), np.where(b_fin, term_b[1], zero))

    lo, hi = _iv_add(term_a, _iv_negate(term_b))

    # global clamps: the integrand is boxed by [min(a,0), max(b,0)] pointwise
    if relu:
        clamp_lo = zero
    else:
        clamp_lo = np.where(a_fin, np.minimum(a, 0.0), -np.inf)
    clamp_hi = np.where(b_fin, np.maximum(b, 0.0), np.inf)
    lo = np.minimum(np.maximum(lo, clamp_lo), clamp_hi)
    hi = np.minimum(np.maximum(hi, clamp_lo), clamp_hi)

    if np.any(point):
        mass = trunc_relu_mass if relu else trunc_id_mass
        exact = np.atleast_1d(mass(ml, sl, a, b))
        lo = np.where(point, exact, lo)
        hi = np.where(point, exact, hi)
    return np.minimum(lo, hi), hi


_KERNELS = ("box_prob_1d", "trunc_relu_mass", "trunc_id_mass", "rect_mean")


def kernel_range(kernel: str, mu_range: Interval, sigma_range: Interval,
                 a=None, b=None) -> Interval:
    """Sound enclosure of a scalar kernel over a (mu, sigma) rectangle.

    Construction: rect_mean and each g-term of the truncated masses are
    jointly convex in (mu, sigma), so maxima sit at rectangle corners and
    minima are lower-bounded by the center tangent plane at its own corner
    minimum; probability terms use the peak-at-midpoint structure in mu and
    the closed-form stationary sigma, with 1e-9 outward widening. Point
    rectangles return the exact kernel value.
    """
    if kernel not in _KERNELS:
        raise ValueError(f"unknown kernel {kernel!r}")
    ml, mh = np.asarray(mu_range.lo, float), np.asarray(mu_range.hi, float)
    sl, sh = np.asarray(sigma_range.lo, float), np.asarray(sigma_range.hi, float)
    if np.any(sl < 0):
        raise ValueError("sigma range must be nonnegative")
    scalar = ml.ndim == 0
    if kernel == "box_prob_1d":
        lo, hi = _range_box_prob_1d(ml, mh, sl, sh, a, b)
    elif kernel == "rect_mean":
        lo, hi = _range_g_terms(ml, mh, sl, sh)
    else:
        lo, hi = _range_trunc_mass(ml, mh, sl, sh, a, b,
                                   relu=(kernel == "trunc_relu_mass"))
    if scalar:
        return Interval(float(lo[0]), float(hi[0]))
    return Interval(lo, hi)
