"""Backward dynamic program for expectation bounds through stochastic layers.

The engine walks the network twice.  A forward sweep picks, for each layer,
a bounded pre-activation box that carries at least a 1 - eps share of the
probability mass for every input in the current carrier, then tiles it into
pieces.  A backward sweep turns a piecewise-affine value function at layer k
into one at layer k-1 by integrating each piece against the Gaussian
pre-activation law: per piece, a probability weight and a first-moment term,
both sandwiched between affine functions of the previous layer's activations.

Everything is deterministic: identical (model, box, config) inputs produce
bit-identical bounds.  Set BNNDP_THREADS to parallelize the backward sweep
across target pieces; reductions stay index-ordered so results do not change.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .gausskit import INV_SQRT_2PI, erfinv, kernel_range
from .layerprop import (
    MomentFunctions,
    compose_affine,
    eval_moments,
    prop_affine_value,
    relax_g_on_region,
    relax_r_on_box,
)
from .relaxcore import (
    AffineRelaxation,
    Box,
    Interval,
    PwaRelaxation,
    affine_range_on_box,
    neg_part,
    pos_part,
)

# mass epsilon defaults, keyed by hidden-layer count
_EPS_BY_DEPTH = {1: 1e-2, 2: 1e-3}
_DEEP_EPS = 5e-4


def default_epsilon(depth: int) -> float:
    if depth <= 2:
        return _EPS_BY_DEPTH.get(depth, 1e-2)
    return _DEEP_EPS


@dataclass(frozen=True)
class DpConfig:
    """Knobs for the partitioned dynamic program.

    eps: per-layer mass shortfall budget; a scalar applies to every
    partitioned layer, a sequence is indexed by stage, None picks the
    depth-keyed default.  n_pieces: tile count per partitioned layer.
    orientation: "outer" makes the mass guarantee hold for every carrier
    point; "inner" reproduces the tighter but guarantee-free quantile
    orientation for comparison studies.  refinement names the splitting
    strategy (only greedy scored bisection is implemented).
    """

    eps: object = None
    n_pieces: object = 2
    orientation: str = "outer"
    refinement: str = "greedy_std"

    def __post_init__(self):
        if self.orientation not in ("outer", "inner"):
            raise ValueError(f"unknown orientation {self.orientation!r}")
        if self.refinement != "greedy_std":
            raise ValueError(f"unknown refinement strategy {self.refinement!r}")
        for e in self._eps_list():
            if not 0.0 < e < 1.0:
                raise ValueError("mass epsilon must lie in (0, 1)")
        for n in self._pieces_list():
            if n < 1:
                raise ValueError("piece counts must be >= 1")

    def _eps_list(self):
        if self.eps is None:
            return ()
        if np.ndim(self.eps) == 0:
            return (float(self.eps),)
        return tuple(float(e) for e in self.eps)

    def _pieces_list(self):
        if np.ndim(self.n_pieces) == 0:
            return (int(self.n_pieces),)
        return tuple(int(n) for n in self.n_pieces)

    def eps_for(self, stage: int, depth: int) -> float:
        if self.eps is None:
            return default_epsilon(depth)
        seq = self._eps_list()
        return seq[min(stage - 1, len(seq) - 1)]

    def pieces_for(self, stage: int) -> int:
        seq = self._pieces_list()
        return seq[min(stage - 1, len(seq) - 1)]


@dataclass(frozen=True)
class LayerPartition:
    """Tiling of one layer's pre-activation main box.

    layer is the stage index k, so boxes live in the space of zeta_k.  The
    complement flag marks the implicit unbounded remainder outside main.
    """

    layer: int
    main: Box
    pieces: tuple
    has_complement: bool = True

    def __post_init__(self):
        object.__setattr__(self, "pieces", tuple(self.pieces))
        if self.has_complement and not self.main.bounded:
            raise ValueError("a partition with a complement needs a bounded main box")
        if not self.pieces:
            raise ValueError("partition needs at least one piece")
        if self.main.bounded:
            vol = np.prod(self.main.widths)
            total = 0.0
            for p in self.pieces:
                if not (np.all(p.lo >= self.main.lo - 1e-12) and np.all(p.hi <= self.main.hi + 1e-12)):
                    raise ValueError("piece escapes the main box")
                total += float(np.prod(p.widths))
            if vol > 0 and abs(total - vol) > 1e-9 * vol:
                raise ValueError("pieces do not tile the main box")


@dataclass(frozen=True)
class ValueRelaxation:
    """Piecewise-affine sandwich of a value function over a LayerPartition.

    pwa pairs each partition piece with an AffineRelaxation valid on the
    stage activation's image of the piece (the piece itself at identity
    stages); its complement Interval is a constant bound holding everywhere
    outside the main box.  tail is an affine sandwich of the value valid on
    the entire nonnegative orthant, used to weight complement mass;
    constants when the value is globally bounded, otherwise grown from the
    moment tails.
    """

    partition: LayerPartition
    pwa: PwaRelaxation
    tail: AffineRelaxation
    n_out: int

    def __post_init__(self):
        if len(self.pwa.pieces) != len(self.partition.pieces):
            raise ValueError("piece count mismatch between pwa and partition")
        if self.partition.has_complement and self.pwa.complement is None:
            raise ValueError("partition has a complement but pwa carries no interval")


def main_box(layer, z_prev: Box, eps: float, orientation: str = "outer") -> Box:
    """Per-node quantile box holding >= 1-eps of each pre-activation's mass.

    With the default outer orientation the guarantee holds jointly for every
    z in z_prev: each coordinate keeps mass eta = (1-eps)^(1/n), so the
    product clears 1-eps.  The inner orientation instead intersects the
    pointwise quantile boxes; it is smaller and carries no such guarantee.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    if not z_prev.bounded:
        raise ValueError("carrier box must be bounded")
    mf = MomentFunctions.from_layer(layer)
    eta = (1.0 - eps) ** (1.0 / layer.out_dim)
    q = float(erfinv(eta)) * float(np.sqrt(2.0))
    r_rel = relax_r_on_box(mf, z_prev)
    if orientation == "outer":
        lo = affine_range_on_box(mf.mean_w - q * r_rel.A_hi, mf.mean_b - q * r_rel.b_hi, z_prev).lo
        hi = affine_range_on_box(mf.mean_w + q * r_rel.A_hi, mf.mean_b + q * r_rel.b_hi, z_prev).hi
    else:
        lo = affine_range_on_box(mf.mean_w - q * r_rel.A_lo, mf.mean_b - q * r_rel.b_lo, z_prev).hi
        hi = affine_range_on_box(mf.mean_w + q * r_rel.A_lo, mf.mean_b + q * r_rel.b_lo, z_prev).lo
        mid = 0.5 * (lo + hi)
        bad = lo > hi
        lo = np.where(bad, mid, lo)
        hi = np.where(bad, mid, hi)
    return Box(lo, hi)


def refine(main: Box, n_pieces: int, dim_scores=None) -> list:
    """Greedy scored bisection into n_pieces tiles.

    Repeatedly splits the piece with the largest width-times-score product
    at that product's dimension, at the midpoint.  Ties resolve to the
    lowest piece then dimension index, keeping the tiling deterministic.
    """
    if n_pieces < 1:
        raise ValueError("n_pieces must be >= 1")
    scores = np.ones(main.dim) if dim_scores is None else np.asarray(dim_scores, dtype=float)
    if scores.shape != (main.dim,):
        raise ValueError("dim_scores length must match the box dimension")
    pieces = [main]
    while len(pieces) < n_pieces:
        best, best_val, best_dim = 0, -np.inf, 0
        for idx, piece in enumerate(pieces):
            scored = piece.widths * scores
            d = int(np.argmax(scored))
            if scored[d] > best_val:
                best, best_val, best_dim = idx, float(scored[d]), d
        left, right = pieces[best].split(best_dim, float(pieces[best].center[best_dim]))
        pieces[best : best + 1] = [left, right]
    return pieces


def verify_exact_cover(partition: LayerPartition, n_samples: int = 256, seed: int = 0) -> bool:
    """Check the tiling invariant: volumes add up, interiors stay disjoint,
    and random points of the main box always land in some piece."""
    main, pieces = partition.main, partition.pieces
    vol = float(np.prod(main.widths))
    total = sum(float(np.prod(p.widths)) for p in pieces)
    if vol > 0 and abs(total - vol) > 1e-9 * vol:
        return False
    for i in range(len(pieces)):
        for j in range(i + 1, len(pieces)):
            lo = np.maximum(pieces[i].lo, pieces[j].lo)
            hi = np.minimum(pieces[i].hi, pieces[j].hi)
            if np.all(hi - lo > 1e-12):
                return False
    rng = np.random.default_rng(seed)
    pts = main.sample(n_samples, rng)
    for z in pts:
        if not any(p.contains(z, tol=1e-12) for p in pieces):
            return False
    return True


def partition_stages(model) -> list:
    """Stage indices whose pre-activation spaces get partitioned."""
    k = model.depth
    if model.task == "classification":
        return list(range(1, k + 2))
    return list(range(1, k))


def forward_partitions(model, box: Box, cfg: DpConfig):
    """Chain carriers through the net, building one partition per stage.

    Returns (partitions, mass_lower): mass_lower is the product of the
    per-stage 1-eps guarantees, a lower bound on the chance that a sampled
    trajectory stays inside every main box given inputs in the carrier.
    """
    stages = partition_stages(model)
    parts = []
    mass_lower = 1.0
    if not stages:
        return parts, mass_lower
    carrier = box
    for s in range(1, max(stages) + 1):
        layer = model.layers[s - 1]
        eps = cfg.eps_for(s, model.depth)
        mb = main_box(layer, carrier, eps, cfg.orientation)
        if s in stages:
            mf = MomentFunctions.from_layer(layer)
            _, s_c = eval_moments(mf, carrier.center)
            scores = np.sqrt(np.maximum(s_c, 0.0))
            parts.append(
                LayerPartition(s, mb, tuple(refine(mb, cfg.pieces_for(s), scores)), True)
            )
            mass_lower *= 1.0 - eps
        carrier = mb.relu_image() if layer.activation == "relu" else mb
    return parts, mass_lower


def _orthant_moment_bounds(layer) -> AffineRelaxation:
    """Affine sandwich of y -> E[phi(zeta)|y] valid on the whole nonnegative
    orthant: exact for identity; for relu, zero below and the monotone
    envelope max(m,0) + r/sqrt(2*pi) pushed through coefficient magnitudes."""
    mf = MomentFunctions.from_layer(layer)
    if layer.activation == "identity":
        return mf.mean_affine()
    if mf.dirs is None:
        root = np.sqrt(mf.lam)
        r_coef = root[:, :-1]
        r_const = root[:, -1]
    else:
        root = np.sqrt(mf.lam)  # (n_out, n_dirs)
        r_coef = np.einsum("id,ijd->ij", root, np.abs(mf.dirs[:, :-1, :]))
        r_const = (root * np.abs(mf.dirs[:, -1, :])).sum(axis=1)
    a_hi = pos_part(mf.mean_w) + INV_SQRT_2PI * r_coef
    b_hi = pos_part(mf.mean_b) + INV_SQRT_2PI * r_const
    zero = np.zeros_like(mf.mean_w)
    return AffineRelaxation(zero, np.zeros(mf.n_out), a_hi, b_hi)


def _tail_range(tail: AffineRelaxation) -> Interval:
    """Range of the tail sandwich over the nonnegative orthant."""
    lo = np.where(np.any(tail.A_lo < 0, axis=1), -np.inf, tail.b_lo)
    hi = np.where(np.any(tail.A_hi > 0, axis=1), np.inf, tail.b_hi)
    return Interval(lo, hi)


def _scale_interval(c, iv: Interval) -> Interval:
    a = c * iv.lo
    b = c * iv.hi
    return Interval(np.minimum(a, b), np.maximum(a, b))


def _loo_products(lo, hi):
    """All-coordinate and leave-one-out products of per-coordinate
    probability intervals (entries within [0, 1], so monotone).  Works on
    any leading batch shape; products run along the last axis."""
    def both(v):
        ones = np.ones(v.shape[:-1] + (1,))
        pref = np.concatenate([ones, np.cumprod(v, axis=-1)], axis=-1)
        rev = np.cumprod(v[..., ::-1], axis=-1)[..., ::-1]
        suff = np.concatenate([rev, ones], axis=-1)
        return pref[..., -1], pref[..., :-1] * suff[..., 1:]

    t_lo, q_lo = both(lo)
    t_hi, q_hi = both(hi)
    return Interval(t_lo, t_hi), Interval(q_lo, q_hi)


def _shifted_g_relax(m_aff, r_rel, target, shift):
    shifted = AffineRelaxation.exact(m_aff.A_lo, m_aff.b_lo - shift)
    return relax_g_on_region(shifted, r_rel, target)


def _mass_sandwich(m_aff, r_rel, target, m_iv, s_iv, a, b, relu_act):
    """Affine bounds of z -> E[phi(zeta_i) * 1{a_i <= zeta_i <= b_i}](z).

    Decomposes the one-sided mass above c as g(m - c, r) + c * P[zeta >= c];
    the g parts ride the shifted rectified-mean relaxation, the boundary
    parts are constant probability intervals.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if relu_act:
        a_eff = np.maximum(a, 0.0)
        b_eff = np.maximum(b, 0.0)
    else:
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError("bounded pieces are required for mass bounds")
        a_eff, b_eff = a, b
    ga = _shifted_g_relax(m_aff, r_rel, target, a_eff)
    gb = _shifted_g_relax(m_aff, r_rel, target, b_eff)
    tail_a = _scale_interval(a_eff, kernel_range("box_prob_1d", m_iv, s_iv, a_eff, np.inf))
    tail_b = _scale_interval(b_eff, kernel_range("box_prob_1d", m_iv, s_iv, b_eff, np.inf))

    a_lo = ga.A_lo - gb.A_hi
    b_lo = ga.b_lo - gb.b_hi + tail_a.lo - tail_b.hi
    a_hi = ga.A_hi - gb.A_lo
    b_hi = ga.b_hi - gb.b_lo + tail_a.hi - tail_b.lo

    # a degenerate clamped interval carries no mass at all
    dead = b_eff <= a_eff
    if np.any(dead):
        a_lo = np.where(dead[:, None], 0.0, a_lo)
        a_hi = np.where(dead[:, None], 0.0, a_hi)
        b_lo = np.where(dead, 0.0, b_lo)
        b_hi = np.where(dead, 0.0, b_hi)
    return AffineRelaxation(a_lo, b_lo, a_hi, b_hi)


def _product_with_weight(mass: AffineRelaxation, w: Interval, target: Box,
                         nonneg: bool) -> AffineRelaxation:
    """Bound mass(z) * w for a constant weight interval w within [0, 1].

    When the true mass is known nonnegative the matched-corner product is
    sound directly; otherwise the lower/upper lines are corrected by the
    worst constant offset over the target box.
    """
    w_lo = np.asarray(w.lo, dtype=float)
    w_hi = np.asarray(w.hi, dtype=float)
    wl_col = w_lo[..., None] if w_lo.ndim else w_lo
    wh_col = w_hi[..., None] if w_hi.ndim else w_hi
    if nonneg:
        return AffineRelaxation(
            wl_col * mass.A_lo, w_lo * mass.b_lo, wh_col * mass.A_hi, w_hi * mass.b_hi
        )
    sup_lo = np.maximum(affine_range_on_box(mass.A_lo, mass.b_lo, target).hi, 0.0)
    inf_hi = np.maximum(-affine_range_on_box(mass.A_hi, mass.b_hi, target).lo, 0.0)
    spread = w_hi - w_lo
    return AffineRelaxation(
        wh_col * mass.A_lo,
        w_hi * mass.b_lo - spread * sup_lo,
        wh_col * mass.A_hi,
        w_hi * mass.b_hi + spread * inf_hi,
    )


def _signed_linmap(mat, rel: AffineRelaxation, side: str):
    """One side of mat @ rel with sign splitting; returns (A, b)."""
    p, n = pos_part(mat), neg_part(mat)
    if side == "lo":
        return p @ rel.A_lo + n @ rel.A_hi, p @ rel.b_lo + n @ rel.b_hi
    return p @ rel.A_hi + n @ rel.A_lo, p @ rel.b_hi + n @ rel.b_lo


def _simplex_mix_bounds(val_lo, val_hi, p_lo, p_hi):
    """Extremal mixtures of per-atom constants under interval probabilities.

    The true weights lie in [p_lo, p_hi] componentwise and sum to exactly 1,
    so each bound is a tiny fractional-knapsack: start every atom at its
    floor and spend the leftover mass on the cheapest (dearest) values
    first.  Caps are honored; any residual lands on the extreme atom, which
    only relaxes the bound outward.
    """
    n_atoms, n_out = val_lo.shape
    base = float(np.sum(p_lo))
    room = p_hi - p_lo
    lo = np.empty(n_out)
    hi = np.empty(n_out)
    for i in range(n_out):
        for vals, out, sign in ((val_lo[:, i], lo, 1), (val_hi[:, i], hi, -1)):
            order = np.argsort(sign * vals, kind="stable")
            slack = max(1.0 - base, 0.0)
            p = p_lo.astype(float, copy=True)
            for j in order:
                if slack <= 0.0:
                    break
                add = min(float(room[j]), slack)
                p[j] += add
                slack -= add
            if slack > 0.0:
                p[order[0]] += slack
            out[i] = float(p @ vals)
    return lo, hi


def bp_step(value: ValueRelaxation, layer, target: Box, activation: str) -> AffineRelaxation:
    """One backward step: bounds on z -> E[V(phi(zeta(z)))] over the target.

    A full-space single-piece value composes exactly through the layer's
    moment relaxations.  Otherwise every bounded piece contributes a
    probability weight and per-coordinate first-moment terms, the complement
    rides the tail sandwich, and all contributions are recentered around a
    componentwise median reference so that the total-probability identity
    cancels the reference exactly.
    """
    part = value.partition
    if not part.has_complement and len(part.pieces) == 1 and not part.pieces[0].bounded:
        return prop_affine_value(value.pwa.pieces[0][1], layer, target, activation)
    if not target.bounded:
        raise ValueError("target box must be bounded")
    if not part.main.bounded:
        raise ValueError("partitioned main box must be bounded")
    relu_act = activation == "relu"
    tail = value.tail
    if tail is None:
        comp = value.pwa.complement
        if comp is None or not (np.all(np.isfinite(comp.lo)) and np.all(np.isfinite(comp.hi))):
            raise RuntimeError("unbounded tail value: complement weight cannot be bounded")
        zero = np.zeros((value.n_out, part.main.dim))
        tail = AffineRelaxation(zero, comp.lo, zero, comp.hi)

    mf = MomentFunctions.from_layer(layer)
    n_coord = mf.n_out
    m_aff = mf.mean_affine()
    r_rel = relax_r_on_box(mf, target)
    m_rng = affine_range_on_box(mf.mean_w, mf.mean_b, target)
    sig_lo = np.maximum(affine_range_on_box(r_rel.A_lo, r_rel.b_lo, target).lo, 0.0)
    sig_hi = np.maximum(affine_range_on_box(r_rel.A_hi, r_rel.b_hi, target).hi, sig_lo)
    m_iv = Interval(m_rng.lo, m_rng.hi)
    s_iv = Interval(sig_lo, sig_hi)

    piece_rels = [rel for _, rel in value.pwa.pieces]
    al_stack = np.stack([r.A_lo for r in piece_rels])
    bl_stack = np.stack([r.b_lo for r in piece_rels])
    ah_stack = np.stack([r.A_hi for r in piece_rels])
    bh_stack = np.stack([r.b_hi for r in piece_rels])
    ref_a_lo = np.median(al_stack, axis=0)
    ref_b_lo = np.median(bl_stack, axis=0)
    ref_a_hi = np.median(ah_stack, axis=0)
    ref_b_hi = np.median(bh_stack, axis=0)

    need_moments = (
        np.any(al_stack != ref_a_lo)
        or np.any(ah_stack != ref_a_hi)
        or np.any(tail.A_lo != ref_a_lo)
        or np.any(tail.A_hi != ref_a_hi)
        or np.any(ref_a_lo != 0.0)
        or np.any(ref_a_hi != 0.0)
    )

    out_A_lo = np.zeros((value.n_out, target.dim))
    out_b_lo = ref_b_lo.copy()
    out_A_hi = np.zeros((value.n_out, target.dim))
    out_b_hi = ref_b_hi.copy()

    if need_moments:
        # reference term: E[rho(z_k)] rides the full first-moment sandwich
        g_rel = relax_g_on_region(m_aff, r_rel, target) if relu_act else m_aff
        a, b = _signed_linmap(ref_a_lo, g_rel, "lo")
        out_A_lo += a
        out_b_lo += b
        a, b = _signed_linmap(ref_a_hi, g_rel, "hi")
        out_A_hi += a
        out_b_hi += b

    # per-coordinate probability intervals for the main box
    p_coord = kernel_range("box_prob_1d", m_iv, s_iv, part.main.lo, part.main.hi)
    p_main, q_loo = _loo_products(np.clip(p_coord.lo, 0.0, 1.0), np.clip(p_coord.hi, 0.0, 1.0))
    p_comp = Interval(np.clip(1.0 - p_main.hi, 0.0, 1.0), np.clip(1.0 - p_main.lo, 0.0, 1.0))

    if need_moments:
        mass_main = _mass_sandwich(m_aff, r_rel, target, m_iv, s_iv,
                                   part.main.lo, part.main.hi, relu_act)
        if relu_act:
            out_kind = "trunc_relu_mass"
        else:
            out_kind = "trunc_id_mass"
        out_left = kernel_range(out_kind, m_iv, s_iv, np.full(n_coord, -np.inf), part.main.lo)
        out_right = kernel_range(out_kind, m_iv, s_iv, part.main.hi, np.full(n_coord, np.inf))
        outside = out_left + out_right
        w_comp = Interval(np.clip(1.0 - q_loo.hi, 0.0, 1.0), np.clip(1.0 - q_loo.lo, 0.0, 1.0))
        prod_c = _product_with_weight(mass_main, w_comp, target, relu_act)
        ec = AffineRelaxation(
            prod_c.A_lo, prod_c.b_lo + outside.lo, prod_c.A_hi, prod_c.b_hi + outside.hi
        )

    piece_los = np.stack([p.lo for p in part.pieces])
    piece_his = np.stack([p.hi for p in part.pieces])
    pc_all = kernel_range("box_prob_1d", m_iv, s_iv, piece_los, piece_his)
    p_all, q_all = _loo_products(np.clip(pc_all.lo, 0.0, 1.0), np.clip(pc_all.hi, 0.0, 1.0))

    # constant deviations: the piece weights plus the complement weight sum
    # to exactly one, so they mix through the simplex knapsack
    atoms_lo = np.concatenate([bl_stack - ref_b_lo, (tail.b_lo - ref_b_lo)[None, :]])
    atoms_hi = np.concatenate([bh_stack - ref_b_hi, (tail.b_hi - ref_b_hi)[None, :]])
    atom_p_lo = np.concatenate([p_all.lo, [p_comp.lo]])
    atom_p_hi = np.concatenate([p_all.hi, [p_comp.hi]])
    add_lo, add_hi = _simplex_mix_bounds(atoms_lo, atoms_hi, atom_p_lo, atom_p_hi)
    out_b_lo += add_lo
    out_b_hi += add_hi

    if need_moments:
        for j, piece in enumerate(part.pieces):
            d_lo = al_stack[j] - ref_a_lo
            d_hi = ah_stack[j] - ref_a_hi
            if np.all(d_lo == 0.0) and np.all(d_hi == 0.0):
                continue
            mass_j = _mass_sandwich(m_aff, r_rel, target, m_iv, s_iv,
                                    piece.lo, piece.hi, relu_act)
            ej = _product_with_weight(
                mass_j, Interval(q_all.lo[j], q_all.hi[j]), target, relu_act
            )
            a, b = _signed_linmap(d_lo, ej, "lo")
            out_A_lo += a
            out_b_lo += b
            a, b = _signed_linmap(d_hi, ej, "hi")
            out_A_hi += a
            out_b_hi += b

        # complement slope deviation rides the tail moment sandwich
        c_lo = tail.A_lo - ref_a_lo
        c_hi = tail.A_hi - ref_a_hi
        if np.any(c_lo != 0.0) or np.any(c_hi != 0.0):
            a, b = _signed_linmap(c_lo, ec, "lo")
            out_A_lo += a
            out_b_lo += b
            a, b = _signed_linmap(c_hi, ec, "hi")
            out_A_hi += a
            out_b_hi += b

    return AffineRelaxation(out_A_lo, out_b_lo, out_A_hi, out_b_hi)


def _clamp_unit_constants(rel: AffineRelaxation) -> AffineRelaxation:
    """Clip constant rows into [0, 1]; sound when true values are
    probabilities (classification terminal compositions)."""
    const_lo = np.all(rel.A_lo == 0.0, axis=1)
    const_hi = np.all(rel.A_hi == 0.0, axis=1)
    b_lo = np.where(const_lo, np.clip(rel.b_lo, 0.0, 1.0), rel.b_lo)
    b_hi = np.where(const_hi, np.clip(rel.b_hi, 0.0, 1.0), rel.b_hi)
    return AffineRelaxation(rel.A_lo, b_lo, rel.A_hi, b_hi)


def _hull_interval(value: ValueRelaxation, activation: str) -> Interval:
    """Global hull of the value function over achievable activations:
    piece ranges (through the stage's own activation image) plus the
    complement interval."""
    lo = np.full(value.n_out, np.inf)
    hi = np.full(value.n_out, -np.inf)
    for box, rel in value.pwa.pieces:
        audit = box.relu_image() if (activation == "relu" and box.bounded) else box
        rng = rel.range_on(audit)
        lo = np.minimum(lo, rng.lo)
        hi = np.maximum(hi, rng.hi)
    comp = value.pwa.complement
    if comp is not None:
        lo = np.minimum(lo, comp.lo)
        hi = np.maximum(hi, comp.hi)
    return Interval(lo, hi)


def _next_tail(value: ValueRelaxation, layer) -> AffineRelaxation:
    """Tail sandwich for the previous stage: constants from the global hull
    when finite, otherwise the current tail pushed through the layer's
    orthant moment bounds."""
    hull = _hull_interval(value, layer.activation)
    if np.all(np.isfinite(hull.lo)) and np.all(np.isfinite(hull.hi)):
        zero = np.zeros((value.n_out, layer.in_dim))
        return AffineRelaxation(zero, hull.lo, zero, hull.hi)
    if value.tail is None:
        raise RuntimeError("unbounded tail value: no tail sandwich to propagate")
    return compose_affine(value.tail, _orthant_moment_bounds(layer))


def run_dp(model, box: Box, cfg: DpConfig, terminal: ValueRelaxation,
           partitions=None) -> AffineRelaxation:
    """Recurse the terminal value down to an affine sandwich over the input box.

    partitions may be passed in (from forward_partitions) to share the
    forward sweep with callers that also need the main boxes; omitted, it is
    rebuilt deterministically.
    """
    if not box.bounded:
        raise ValueError("input box must be bounded")
    if partitions is None:
        partitions, _ = forward_partitions(model, box, cfg)
    pmap = {p.layer: p for p in partitions}
    clamp = model.task == "classification"
    threads = max(1, int(os.environ.get("BNNDP_THREADS", "1") or "1"))

    value = terminal
    s_top = value.partition.layer
    if s_top == 0:
        return value.pwa.pieces[0][1]
    for s in range(s_top, 0, -1):
        layer = model.layers[s - 1]
        act = layer.activation
        if s == 1:
            return bp_step(value, layer, box, act)
        part = pmap[s - 1]
        prev_act = model.layers[s - 2].activation
        targets = [p.relu_image() if prev_act == "relu" else p for p in part.pieces]
        if threads > 1 and len(targets) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                rels = list(pool.map(lambda t: bp_step(value, layer, t, act), targets))
        else:
            rels = [bp_step(value, layer, t, act) for t in targets]
        if clamp:
            rels = [_clamp_unit_constants(r) for r in rels]
        tail = _next_tail(value, layer)
        if clamp:
            tail = _clamp_unit_constants(tail)
        comp = _tail_range(tail)
        value = ValueRelaxation(
            part,
            PwaRelaxation(tuple(zip(part.pieces, rels)), comp),
            tail,
            value.n_out,
        )
    raise AssertionError("unreachable: the stage loop always returns at s == 1")
