"""From transport plans to foreground probability maps and match indices.

The solver matches every support node, foreground or not; relevance filtering
happens afterwards by zeroing the rows of background suppliers. A query
node's foreground probability is the fraction of its demand met by flow from
foreground suppliers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    EmptySupportForeground,
    InvalidThreshold,
    ShapeMismatch,
)
from .otcore import MarginalWeights, TransportPlan, cosine_cost_matrix
from .tensorio import BinaryMask, FeatureGrid


@dataclass
class FilteredPlan:
    """Real-block flows plus per-supplier foreground flags and inflow totals."""

    flows: np.ndarray
    foreground: np.ndarray
    foreground_inflow: np.ndarray

    @property
    def total_inflow(self) -> np.ndarray:
        return self.flows.sum(axis=0)


def filter_by_support_mask(plan: TransportPlan, mask: BinaryMask) -> FilteredPlan:
    """Keep only flow leaving foreground suppliers.

    `plan` must be a stripped real block whose m rows correspond row-major to
    the support mask cells.
    """
    flows = np.asarray(plan.flows, dtype=np.float64)
    fg = mask.values.reshape(-1).astype(bool)
    if flows.shape[0] != fg.shape[0]:
        raise ShapeMismatch(
            f"plan has {flows.shape[0]} suppliers, mask has {fg.shape[0]} cells"
        )
    inflow = flows[fg].sum(axis=0) if fg.any() else np.zeros(flows.shape[1])
    return FilteredPlan(flows=flows, foreground=fg, foreground_inflow=inflow)


def foreground_probability_map(
    fp: FilteredPlan, demand: MarginalWeights, height: int, width: int
) -> np.ndarray:
    """p_j = foreground inflow / demand u_j, clamped to [0, 1], shaped H x W.

    Nodes with zero demand get probability 0: no demand, no evidence.
    """
    u = demand.demand
    k = fp.flows.shape[1]
    if k != height * width or len(u) != k:
        raise ShapeMismatch(f"{k} query nodes vs {height}x{width} grid and {len(u)} demands")
    with np.errstate(divide="ignore", invalid="ignore"):
        p = np.where(u > 0, fp.foreground_inflow / np.where(u > 0, u, 1.0), 0.0)
    np.clip(p, 0.0, 1.0, out=p)
    return p.reshape(height, width).astype(np.float32)


def prior_mask(query: FeatureGrid, support: FeatureGrid, mask: BinaryMask) -> np.ndarray:
    """Max cosine similarity to any foreground support node, min-max normalized.

    Constant raw maps normalize to all zeros.
    """
    if (mask.height, mask.width) != (support.height, support.width):
        raise ShapeMismatch(
            f"mask {mask.height}x{mask.width} vs support {support.height}x{support.width}"
        )
    fg = mask.values.reshape(-1).astype(bool)
    if not fg.any():
        raise EmptySupportForeground("support mask has no foreground node")
    similarity = 1.0 - cosine_cost_matrix(support, query).astype(np.float64)
    raw = similarity[fg].max(axis=0)
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        normalized = np.zeros_like(raw)
    else:
        normalized = (raw - lo) / (hi - lo)
    return normalized.reshape(query.height, query.width).astype(np.float32)


def best_match_map(plan: TransportPlan, height: int, width: int) -> np.ndarray:
    """Argmax supplier index per query node; -1 where a column carries no flow.

    Ties break to the smallest supplier index.
    """
    flows = np.asarray(plan.flows, dtype=np.float64)
    if flows.shape[1] != height * width:
        raise ShapeMismatch(f"{flows.shape[1]} query nodes vs {height}x{width} grid")
    best = flows.argmax(axis=0)
    best[flows.max(axis=0) <= 0.0] = -1
    return best.reshape(height, width)


def threshold_prediction(prob: np.ndarray, tau: float) -> BinaryMask:
    """Binary mask with 1 wherever probability >= tau."""
    if not 0.0 <= tau <= 1.0:
        raise InvalidThreshold(f"tau must be in [0, 1], got {tau}")
    prob = np.asarray(prob)
    return BinaryMask((prob >= tau).astype(np.uint8))


def best_match_csv(best: np.ndarray, support_width: int) -> str:
    """Render a best-match map as `r,c,match_r,match_c` lines (-1,-1 if unmatched)."""
    lines = ["r,c,match_r,match_c"]
    height, width = best.shape
    for r in range(height):
        for c in range(width):
            idx = int(best[r, c])
            if idx < 0:
                lines.append(f"{r},{c},-1,-1")
            else:
                lines.append(f"{r},{c},{idx // support_width},{idx % support_width}")
    return "\n".join(lines) + "\n"
