"""Per-layer moment maps and their affine relaxations over boxes.

For a stochastic layer with independent Gaussian rows, the pre-activation at
node i given input z is Gaussian with mean ``m_i(z)`` (affine in z) and
variance ``s_i(z)`` (a PSD quadratic form in (z, 1)).  This module evaluates
those maps, sandwiches s, r = sqrt(s) and the rectified mean
``g(m(z), r(z))`` between affine functions on a box, and pushes an affine
value function backward through one stochastic layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gausskit import rect_mean, rect_mean_grad
from .relaxcore import AffineRelaxation, Box, affine_range_on_box, linmap_affine

_DEGENERATE_S = 1e-12
_DEGENERATE_W = 1e-12


@dataclass(frozen=True)
class MomentFunctions:
    """Mean/variance maps of one layer's pre-activations.

    mean_w: (n_out, n_in) affine coefficients, mean_b: (n_out,) offsets.
    lam: nonnegative quadratic weights, (n_out, n_in + 1).
    dirs: eigenbasis per node, (n_out, n_in + 1, n_in + 1) with direction d
    in ``dirs[i, :, d]``; None marks an axis-aligned (diagonal) form where
    direction d is the d-th coordinate of (z, 1).
    """

    mean_w: np.ndarray
    mean_b: np.ndarray
    lam: np.ndarray
    dirs: np.ndarray | None

    @property
    def n_in(self):
        return self.mean_w.shape[1]

    @property
    def n_out(self):
        return self.mean_w.shape[0]

    @staticmethod
    def from_layer(layer):
        return MomentFunctions(
            layer.mean[:, :-1], layer.mean[:, -1], layer.eig_vals, layer.eig_vecs
        )

    def mean_affine(self) -> AffineRelaxation:
        """m is affine, so its relaxation is exact."""
        return AffineRelaxation.exact(self.mean_w, self.mean_b)


@dataclass(frozen=True)
class DiagonalizedForm:
    """Variance form rewritten as sum_d lam_d * (w_d . z + c_d)^2 per node.

    weights: (n_out, n_dirs, n_in), offsets: (n_out, n_dirs),
    lam: (n_out, n_dirs) nonnegative.
    """

    weights: np.ndarray
    offsets: np.ndarray
    lam: np.ndarray

    @staticmethod
    def from_moments(mf: "MomentFunctions") -> "DiagonalizedForm":
        n_out, n_in = mf.mean_w.shape
        if mf.dirs is None:
            eye = np.eye(n_in + 1, n_in)
            weights = np.broadcast_to(eye[None, :, :], (n_out, n_in + 1, n_in))
            offsets = np.broadcast_to(
                np.concatenate([np.zeros(n_in), [1.0]])[None, :], (n_out, n_in + 1)
            )
            return DiagonalizedForm(weights, offsets, mf.lam)
        return DiagonalizedForm(
            np.swapaxes(mf.dirs[:, :-1, :], 1, 2), mf.dirs[:, -1, :], mf.lam
        )

    def reassemble(self, z):
        """Evaluate the diagonalized quadratic; must match s(z)."""
        t = np.einsum("idj,...j->...id", self.weights, np.atleast_2d(z)) + self.offsets
        out = np.einsum("id,...id->...i", self.lam, t * t)
        return out[0] if np.asarray(z).ndim == 1 else out


def _augment(z):
    z = np.atleast_2d(np.asarray(z, dtype=float))
    ones = np.ones(z.shape[:-1] + (1,))
    return np.concatenate([z, ones], axis=-1)


def eval_moments(mf: MomentFunctions, z):
    """Exact (m(z), s(z)); s is clamped at zero against rounding.

    z may be a single vector or a batch of rows.
    """
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    m = zb @ mf.mean_w.T + mf.mean_b
    if mf.dirs is None:
        aug2 = _augment(zb) ** 2
        s = aug2 @ mf.lam.T
    else:
        # t[., i, d] = dirs[i,:,d] . (z, 1)
        t = np.einsum("ijd,...j->...id", mf.dirs, _augment(zb))
        s = np.einsum("id,...id->...i", mf.lam, t * t)
    s = np.maximum(s, 0.0)
    if single:
        return m[0], s[0]
    return m, s


def _direction_intervals(mf: MomentFunctions, box: Box):
    """Range of each quadratic direction's affine coordinate over the box."""
    lo, hi = box.lo, box.hi
    if mf.dirs is None:
        # coordinates of (z, 1) directly
        t_lo = np.concatenate([lo, [1.0]])[None, :].repeat(mf.n_out, axis=0)
        t_hi = np.concatenate([hi, [1.0]])[None, :].repeat(mf.n_out, axis=0)
        return t_lo, t_hi
    w = mf.dirs[:, :-1, :]  # (n_out, n_in, n_dirs)
    c = mf.dirs[:, -1, :]
    pw, nw = np.maximum(w, 0.0), np.minimum(w, 0.0)
    t_lo = c + np.einsum("ijd,j->id", pw, lo) + np.einsum("ijd,j->id", nw, hi)
    t_hi = c + np.einsum("ijd,j->id", pw, hi) + np.einsum("ijd,j->id", nw, lo)
    return t_lo, t_hi


def _grad_s(mf: MomentFunctions, z):
    if mf.dirs is None:
        return 2.0 * mf.lam[:, :-1] * z[None, :]
    t = np.einsum("ijd,j->id", mf.dirs, np.concatenate([z, [1.0]]))
    return 2.0 * np.einsum("id,ijd->ij", mf.lam * t, mf.dirs[:, :-1, :])


def relax_s_on_box(mf: MomentFunctions, box: Box) -> AffineRelaxation:
    """Sandwich the variance form: tangent below, per-direction chords above.

    s is a sum of 1-D parabolas lam_d * t_d^2 along its eigendirections; each
    parabola is bounded above on its induced interval by the secant, below
    globally by the tangent at the box center.
    """
    if not box.bounded:
        raise ValueError("variance relaxation needs a bounded box")
    zc = box.center
    _, s_c = eval_moments(mf, zc)
    grad = _grad_s(mf, zc)
    b_lo = s_c - grad @ zc

    t_lo, t_hi = _direction_intervals(mf, box)
    coef = mf.lam * (t_lo + t_hi)  # chord slope in t
    const = -(mf.lam * t_lo * t_hi).sum(axis=1)
    if mf.dirs is None:
        a_hi = coef[:, :-1]
        b_hi = const + coef[:, -1]
    else:
        a_hi = np.einsum("id,ijd->ij", coef, mf.dirs[:, :-1, :])
        b_hi = const + (coef * mf.dirs[:, -1, :]).sum(axis=1)
    return AffineRelaxation(grad, b_lo, a_hi, b_hi)


def relax_r_on_box(mf: MomentFunctions, box: Box) -> AffineRelaxation:
    """Affine bounds on the standard deviation map r(z) = sqrt(s(z)).

    Both sides of the s-sandwich pass through the tangent line of sqrt at
    s(z_c): above because that tangent dominates sqrt; below because the
    result is then exactly the tangent of the convex function r at z_c.
    Nodes with (near-)zero center variance fall back to constants
    [0, sqrt(max_box s_upper)].
    """
    s_rel = relax_s_on_box(mf, box)
    zc = box.center
    _, s_c = eval_moments(mf, zc)
    root = np.sqrt(np.maximum(s_c, 0.0))
    degen = s_c <= _DEGENERATE_S

    inv = np.where(degen, 0.0, 0.5 / np.where(degen, 1.0, root))
    half = 0.5 * root
    a_lo = inv[:, None] * s_rel.A_lo
    b_lo = inv * s_rel.b_lo + half
    a_hi = inv[:, None] * s_rel.A_hi
    b_hi = inv * s_rel.b_hi + half

    if np.any(degen):
        cap = np.sqrt(np.maximum(affine_range_on_box(s_rel.A_hi, s_rel.b_hi, box).hi, 0.0))
        a_lo = np.where(degen[:, None], 0.0, a_lo)
        b_lo = np.where(degen, 0.0, b_lo)
        a_hi = np.where(degen[:, None], 0.0, a_hi)
        b_hi = np.where(degen, cap, b_hi)
    return AffineRelaxation(a_lo, b_lo, a_hi, b_hi)


def _upper_plane(g00, g01, g10, g11, m_lo, m_hi, s_lo, s_hi):
    """Dominating plane over the (mu, sigma) rectangle from corner values.

    Nondegenerate: plane through the three largest corners (the rectified
    mean grows in both arguments, so the smallest is always (m_lo, s_lo)),
    lifted by any deficit there; convexity makes corner dominance rectangle
    dominance.  Thin rectangles use the chord along the live axis at the far
    (monotone-maximal) end of the dead axis.
    """
    wm = m_hi - m_lo
    ws = s_hi - s_lo
    flat_m = wm <= _DEGENERATE_W
    flat_s = ws <= _DEGENERATE_W

    wm_safe = np.where(flat_m, 1.0, wm)
    ws_safe = np.where(flat_s, 1.0, ws)
    beta_m = np.where(flat_m, 0.0, (g11 - g01) / wm_safe)
    beta_s = np.where(flat_s, 0.0, (g11 - g10) / ws_safe)
    alpha = g11 - beta_m * m_hi - beta_s * s_hi
    deficit = g00 - (alpha + beta_m * m_lo + beta_s * s_lo)
    alpha = alpha + np.maximum(deficit, 0.0)
    return alpha, beta_m, beta_s


def relax_g_on_region(m_affine: AffineRelaxation, r_relax: AffineRelaxation,
                      box: Box) -> AffineRelaxation:
    """Affine bounds on z -> g(m(z), r(z)) for the rectified-Gaussian mean g.

    Upper: a plane dominating g over the rectangle [m range] x [r range],
    composed through the exact m and the matching side of the r sandwich.
    Lower: the tangent plane of the jointly convex g at the box-center point
    (m(z_c), r_lower(z_c)), composed the same way; it touches the true
    surface at z_c whenever r_lower is itself tangent there.
    """
    if not box.bounded:
        raise ValueError("rectified-mean relaxation needs a bounded box")
    zc = box.center
    m_rng = affine_range_on_box(m_affine.A_lo, m_affine.b_lo, box)
    r_lo_rng = affine_range_on_box(r_relax.A_lo, r_relax.b_lo, box)
    r_hi_rng = affine_range_on_box(r_relax.A_hi, r_relax.b_hi, box)
    s_lo = np.maximum(r_lo_rng.lo, 0.0)
    s_hi = np.maximum(r_hi_rng.hi, s_lo)
    m_lo, m_hi = m_rng.lo, m_rng.hi

    g00 = rect_mean(m_lo, s_lo)
    g01 = rect_mean(m_lo, s_hi)
    g10 = rect_mean(m_hi, s_lo)
    g11 = rect_mean(m_hi, s_hi)
    alpha, beta_m, beta_s = _upper_plane(g00, g01, g10, g11, m_lo, m_hi, s_lo, s_hi)

    # compose: mu is exact, sigma picks the r side matching the slope sign
    bs_pos = np.maximum(beta_s, 0.0)
    bs_neg = np.minimum(beta_s, 0.0)
    a_hi = (beta_m[:, None] * m_affine.A_lo
            + bs_pos[:, None] * r_relax.A_hi + bs_neg[:, None] * r_relax.A_lo)
    b_hi = (alpha + beta_m * m_affine.b_lo
            + bs_pos * r_relax.b_hi + bs_neg * r_relax.b_lo)

    m_c = m_affine.lower(zc)
    r_c = np.maximum(r_relax.lower(zc), 0.0)
    degen = r_c <= _DEGENERATE_S
    r_eval = np.where(degen, 1.0, r_c)
    g_c = rect_mean(m_c, np.where(degen, 0.0, r_c))
    g_m, g_s = rect_mean_grad(m_c, r_eval)
    a_lo = g_m[:, None] * m_affine.A_lo + g_s[:, None] * r_relax.A_lo
    b_lo = g_c - g_m * m_c - g_s * r_c + g_m * m_affine.b_lo + g_s * r_relax.b_lo
    if np.any(degen):
        # r collapsed at the center: fall back to the envelope bounds
        # max(m, 0) >= m and >= 0, choosing the branch active at the center
        pos = m_c > 0.0
        a_lo = np.where(degen[:, None], np.where(pos[:, None], m_affine.A_lo, 0.0), a_lo)
        b_lo = np.where(degen, np.where(pos, m_affine.b_lo, 0.0), b_lo)
    return AffineRelaxation(a_lo, b_lo, a_hi, b_hi)


def compose_affine(value: AffineRelaxation, inner: AffineRelaxation) -> AffineRelaxation:
    """Substitute an inner relaxation into an outer affine sandwich."""
    low = linmap_affine(value.A_lo, inner)
    high = linmap_affine(value.A_hi, inner)
    return AffineRelaxation(
        low.A_lo, low.b_lo + value.b_lo, high.A_hi, high.b_hi + value.b_hi
    )


def prop_affine_value(value: AffineRelaxation, layer, box: Box,
                      activation: str) -> AffineRelaxation:
    """Push an affine value sandwich backward through one stochastic layer.

    Given bounds on V at the layer output, returns affine bounds on
    z -> E[V(phi(zeta(z)))] over the input box: through identity the
    expectation is the exact affine mean map; through relu each node's
    expected value is the rectified mean g(m_i(z), r_i(z)), relaxed first
    and then substituted into V.
    """
    if activation not in ("relu", "identity"):
        raise ValueError(f"unknown activation tag {activation!r}")
    mf = MomentFunctions.from_layer(layer)
    if value.n_in != mf.n_out:
        raise ValueError("value function width does not match layer output")
    if activation == "identity":
        return compose_affine(value, mf.mean_affine())
    r_rel = relax_r_on_box(mf, box)
    g_rel = relax_g_on_region(mf.mean_affine(), r_rel, box)
    return compose_affine(value, g_rel)
