"""Certification queries: expectation bounds over an input box, robustness
gaps, decision invariance for classifiers, and the largest certifiable
sup-norm radius around a point."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Tuple

import numpy as np

from . import __version__
from .decision import logit_margin_check, terminal_classification, terminal_regression
from .dp import DpConfig, forward_partitions, run_dp
from .relaxcore import Box, Interval, affine_range_on_box

ENGINE_VERSION = __version__


@dataclass(frozen=True)
class Query:
    """A certification request around a center point.

    radius is measured in the sup norm (the only one supported: the input
    region must be a box).  gamma is the regression robustness threshold;
    target_class overrides the predicted-class inference for classifiers.
    """

    center: np.ndarray
    radius: float
    norm: str = "inf"
    gamma: Optional[float] = None
    target_class: Optional[int] = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(-1)
        object.__setattr__(self, "center", c)
        if not np.all(np.isfinite(c)):
            raise ValueError("query center must be finite")
        if not self.radius >= 0.0:
            raise ValueError("radius must be nonnegative")
        if self.norm != "inf":
            raise ValueError("only sup-norm balls are supported")
        if self.gamma is not None and not self.gamma >= 0.0:
            raise ValueError("gamma threshold must be nonnegative")

    def box(self) -> Box:
        return Box.ball_inf(self.center, self.radius)


@dataclass(frozen=True)
class Certificate:
    """Everything a caller needs to audit one query's outcome."""

    task: str
    center: Tuple[float, ...]
    radius: float
    lower: Tuple[float, ...]
    upper: Tuple[float, ...]
    verdict: str
    gamma: Tuple[float, ...]
    max_radius: Optional[float]
    config: dict
    wall_time: float
    engine_version: str = ENGINE_VERSION

    def __post_init__(self):
        if any(l > u for l, u in zip(self.lower, self.upper)):
            raise ValueError("certificate bounds are inverted")

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("center", "lower", "upper", "gamma"):
            d[key] = list(d[key])
        return d


def bound_expectation(model, box: Box, cfg: Optional[DpConfig] = None) -> Interval:
    """Certified range of the expected output (regression) or expected
    class probabilities (classification) over the input box."""
    cfg = cfg if cfg is not None else DpConfig()
    if model.task == "classification":
        parts, _ = forward_partitions(model, box, cfg)
        terminal = terminal_classification(model, parts[-1])
        rel = run_dp(model, box, cfg, terminal, parts)
    else:
        rel = run_dp(model, box, cfg, terminal_regression(model))
    lo = affine_range_on_box(rel.A_lo, rel.b_lo, box).lo
    hi = affine_range_on_box(rel.A_hi, rel.b_hi, box).hi
    if model.task == "classification":
        lo = np.clip(lo, 0.0, 1.0)
        hi = np.clip(hi, 0.0, 1.0)
    return Interval(lo, np.maximum(hi, lo))


def gamma_robustness(model, query: Query, cfg: Optional[DpConfig] = None) -> np.ndarray:
    """Per-output certified expectation spread over the query ball."""
    iv = bound_expectation(model, query.box(), cfg)
    return iv.hi - iv.lo


def _center_prediction(model, x, cfg):
    """Predicted class and ambiguity flag from the certified bounds at the
    center point itself."""
    iv = bound_expectation(model, Box.ball_inf(x, 0.0), cfg)
    i_star = int(np.argmax(iv.lo))
    others = [j for j in range(model.output_dim) if j != i_star]
    ambiguous = any(iv.hi[j] >= iv.lo[i_star] for j in others)
    return i_star, ambiguous


def check_classification_robust(model, query: Query,
                                cfg: Optional[DpConfig] = None) -> str:
    """Decision invariance over the query ball.

    The predicted class comes from the certified bounds at the center
    (unless the query pins one); each competitor must lose either by the
    cheap logit test on the output main box or by the full backward bounds.
    """
    if model.task != "classification":
        raise ValueError("model is not a classifier")
    cfg = cfg if cfg is not None else DpConfig()
    if query.target_class is not None:
        i_star = int(query.target_class)
        if not 0 <= i_star < model.output_dim:
            raise ValueError("target class out of range")
    else:
        i_star, ambiguous = _center_prediction(model, query.center, cfg)
        if ambiguous:
            return "not-certified (ambiguous center)"

    box = query.box()
    parts, mass_lower = forward_partitions(model, box, cfg)
    out_box = parts[-1].main
    others = [j for j in range(model.output_dim) if j != i_star]
    pending = [j for j in others
               if not logit_margin_check(out_box, mass_lower, i_star, j)]
    if not pending:
        return "robust"

    terminal = terminal_classification(model, parts[-1])
    rel = run_dp(model, box, cfg, terminal, parts)
    lo = affine_range_on_box(rel.A_lo, rel.b_lo, box).lo
    hi = affine_range_on_box(rel.A_hi, rel.b_hi, box).hi
    if all(lo[i_star] > hi[j] for j in pending):
        return "robust"
    return "not-certified"


def check_regression_robust(model, query: Query,
                            cfg: Optional[DpConfig] = None) -> str:
    """Gamma-robustness verdict: every output's certified spread over the
    ball must stay within the query threshold."""
    if model.task != "regression":
        raise ValueError("model is not a regression net")
    if query.gamma is None:
        raise ValueError("regression robustness needs a gamma threshold")
    spread = gamma_robustness(model, query, cfg)
    return "robust" if float(np.max(spread)) <= query.gamma else "not-certified"


def _is_robust(model, query: Query, cfg) -> bool:
    if model.task == "classification":
        return check_classification_robust(model, query, cfg) == "robust"
    return check_regression_robust(model, query, cfg) == "robust"


def max_certified_radius(model, x_star, tol: float = 1e-5,
                         cfg: Optional[DpConfig] = None,
                         gamma: Optional[float] = None,
                         target_class: Optional[int] = None) -> float:
    """Largest sup-norm radius around x_star that still certifies.

    Doubles an upper probe until certification fails (capped at 1.0), then
    bisects the bracket to width tol.  Certification is assumed monotone in
    the radius; if a flip shows up anyway, the smaller certified end wins.
    """
    if not 0.0 < tol < 1.0:
        raise ValueError("tol must lie in (0, 1)")
    cfg = cfg if cfg is not None else DpConfig()

    def robust_at(r):
        return _is_robust(model, Query(x_star, r, gamma=gamma,
                                       target_class=target_class), cfg)

    if not robust_at(0.0):
        return 0.0
    r_lo, r_hi = 0.0, tol
    while robust_at(r_hi):
        r_lo = r_hi
        if r_hi >= 1.0:
            return 1.0
        r_hi = min(2.0 * r_hi, 1.0)
    while r_hi - r_lo > tol:
        mid = 0.5 * (r_lo + r_hi)
        if robust_at(mid):
            r_lo = mid
        else:
            r_hi = mid
    return r_lo


def certify(model, query: Query, cfg: Optional[DpConfig] = None,
            compute_radius: bool = False, tol: float = 1e-5) -> Certificate:
    """Run one query end to end and package the outcome."""
    cfg = cfg if cfg is not None else DpConfig()
    t0 = time.perf_counter()
    iv = bound_expectation(model, query.box(), cfg)
    spread = iv.hi - iv.lo
    if model.task == "classification":
        verdict = check_classification_robust(model, query, cfg)
    elif query.gamma is not None:
        verdict = "robust" if float(np.max(spread)) <= query.gamma else "not-certified"
    else:
        verdict = "not-certified"
    max_radius = None
    if compute_radius:
        max_radius = max_certified_radius(model, query.center, tol=tol, cfg=cfg,
                                          gamma=query.gamma,
                                          target_class=query.target_class)
    wall = time.perf_counter() - t0
    return Certificate(
        task=model.task,
        center=tuple(float(v) for v in query.center),
        radius=float(query.radius),
        lower=tuple(float(v) for v in iv.lo),
        upper=tuple(float(v) for v in iv.hi),
        verdict=verdict,
        gamma=tuple(float(v) for v in spread),
        max_radius=max_radius,
        config={
            "eps": cfg.eps,
            "n_pieces": cfg.n_pieces,
            "orientation": cfg.orientation,
            "refinement": cfg.refinement,
        },
        wall_time=wall,
    )
