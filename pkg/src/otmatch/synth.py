"""Synthetic episode generator for tests and suite runs.

An episode is a (support, support mask, query, query gt) quadruple whose
correct correspondence is knowable a priori: foreground cells of both images
draw from one shared feature cluster, while each image gets its own background
cluster. The three centroids sit at mutual 120 degrees in a random 2-plane
with norm `separation * noise` (the maximally separated arrangement of three
clusters at that radius), so intra-cluster matches are cheap under cosine
cost and every cross-cluster match, including support-background to
query-background, is expensive.

Everything is a pure function of (seed, spec): same inputs, byte-identical
files.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidShape
from .tensorio import (
    QUERY_FEAT,
    QUERY_GT,
    SUPPORT_FEAT,
    SUPPORT_MASK,
    write_tensor,
)


@dataclass(frozen=True)
class EpisodeSpec:
    height: int
    width: int
    channels: int
    fg_fraction: float
    separation: float = 4.0
    noise: float = 1.0

    def __post_init__(self):
        if self.height < 1 or self.width < 1:
            raise InvalidShape(f"grid must be >= 1x1, got {self.height}x{self.width}")
        if self.channels < 2 or self.channels % 2 != 0:
            raise InvalidShape(f"channels must be even and >= 2, got {self.channels}")
        if not 0.0 < self.fg_fraction < 1.0:
            raise InvalidShape(f"fg_fraction must be in (0, 1), got {self.fg_fraction}")
        if self.separation <= 0 or self.noise <= 0:
            raise InvalidShape("separation and noise must be positive")

    @property
    def foreground_cells(self) -> int:
        n = int(round(self.fg_fraction * self.height * self.width))
        if n < 1 or n >= self.height * self.width:
            raise InvalidShape(
                f"fg_fraction {self.fg_fraction} rounds to a degenerate mask "
                f"({n} of {self.height * self.width} cells)"
            )
        return n


def _random_blob(rng: np.random.Generator, h: int, w: int, n: int) -> np.ndarray:
    """Grow a connected n-cell blob from a random seed cell; returns a {0,1} mask."""
    mask = np.zeros((h, w), dtype=np.uint8)
    start = (int(rng.integers(h)), int(rng.integers(w)))
    mask[start] = 1
    frontier = [start]
    while mask.sum() < n:
        r, c = frontier[int(rng.integers(len(frontier)))]
        neighbors = [
            (rr, cc)
            for rr, cc in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1))
            if 0 <= rr < h and 0 <= cc < w and mask[rr, cc] == 0
        ]
        if not neighbors:
            frontier.remove((r, c))
            continue
        pick = neighbors[int(rng.integers(len(neighbors)))]
        mask[pick] = 1
        frontier.append(pick)
    return mask


def _orthonormal_directions(rng: np.random.Generator, channels: int, count: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((channels, count)))
    # Fix QR sign ambiguity so the directions depend only on the rng stream.
    signs = np.sign(q[np.argmax(np.abs(q), axis=0), np.arange(count)])
    return q * signs


def _cluster_features(
    rng: np.random.Generator,
    mask: np.ndarray,
    fg_centroid: np.ndarray,
    bg_centroid: np.ndarray,
    noise: float,
) -> np.ndarray:
    h, w = mask.shape
    c = fg_centroid.shape[0]
    feats = noise * rng.standard_normal((h, w, c))
    feats += np.where(mask[:, :, None] == 1, fg_centroid, bg_centroid)
    return feats.astype(np.float32)


def generate_synthetic_episode(seed: int, spec: EpisodeSpec, out_dir: str | Path) -> Path:
    """Write a deterministic synthetic episode into `out_dir` and return it.

    The support mask and query ground truth each carry exactly
    round(fg_fraction * H * W) foreground cells, grown as connected blobs.
    """
    n_fg = spec.foreground_cells
    rng = np.random.default_rng(seed)
    plane = _orthonormal_directions(rng, spec.channels, 2)
    radius = spec.separation * spec.noise
    angles = np.deg2rad([90.0, 210.0, 330.0])
    fg_centroid, support_bg, query_bg = (
        radius * (np.cos(a) * plane[:, 0] + np.sin(a) * plane[:, 1]) for a in angles
    )

    support_mask = _random_blob(rng, spec.height, spec.width, n_fg)
    query_gt = _random_blob(rng, spec.height, spec.width, n_fg)
    support_feat = _cluster_features(rng, support_mask, fg_centroid, support_bg, spec.noise)
    query_feat = _cluster_features(rng, query_gt, fg_centroid, query_bg, spec.noise)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_tensor(support_feat, out_dir / SUPPORT_FEAT)
    write_tensor(query_feat, out_dir / QUERY_FEAT)
    write_tensor(support_mask, out_dir / SUPPORT_MASK)
    write_tensor(query_gt, out_dir / QUERY_GT)
    return out_dir
