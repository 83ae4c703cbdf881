"""Training objectives.

Two parts: a repeatability term (cross-crop cosine similarity of score-map
patches plus a peakiness term on each map) and a reliability-weighted
differentiable average-precision term over descriptor rankings, where a
pixel may opt out of the ranking objective by paying a fixed penalty kappa.
kappa follows the batch: min(0.5, mean AP of the batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .homography import WarpField
from .model import FeatureMaps


@dataclass
class LossConfig:
    window: int = 16
    peaky_weight: float = 0.5
    kappa_cap: float = 0.5
    ap_bins: int = 20
    query_grid_stride: int = 8
    positive_radius_px: float = 3.0
    negative_min_dist_px: float = 7.0
    ap_loss_weight: float = 1.0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("window must be >= 2")
        if self.peaky_weight < 0:
            raise ValueError("peaky_weight must be >= 0")
        if self.ap_bins < 2:
            raise ValueError("ap_bins must be >= 2")
        if not self.positive_radius_px < self.negative_min_dist_px:
            raise ValueError("positive_radius_px must be < negative_min_dist_px")


@dataclass
class BatchLossReport:
    l_cosim: float
    l_peaky_a: float
    l_peaky_b: float
    l_rep: float
    l_ap: float
    kappa_used: float
    mean_ap: float

    def __post_init__(self):
        vals = [self.l_cosim, self.l_peaky_a, self.l_peaky_b, self.l_rep,
                self.l_ap, self.kappa_used, self.mean_ap]
        if not all(np.isfinite(v) for v in vals):
            raise ValueError("loss report contains non-finite values")
        if not 0.0 <= self.mean_ap <= 1.0:
            raise ValueError("mean_ap out of [0, 1]")
        if not 0.0 < self.kappa_used <= 0.5:
            raise ValueError("kappa_used out of (0, 0.5]")


def _sample_map_bilinear(m: torch.Tensor, xy: torch.Tensor) -> torch.Tensor:
    """Differentiable bilinear read of an HxW tensor at (N, 2) locations.

    Locations must lie inside [0, W-1] x [0, H-1]; caller masks validity.
    """
    h, w = m.shape
    x = xy[:, 0].clamp(0, w - 1)
    y = xy[:, 1].clamp(0, h - 1)
    x0 = x.floor().long().clamp(0, w - 1)
    y0 = y.floor().long().clamp(0, h - 1)
    x1 = (x0 + 1).clamp(0, w - 1)
    y1 = (y0 + 1).clamp(0, h - 1)
    fx = (x - x0).clamp(0, 1)
    fy = (y - y0).clamp(0, 1)
    return (
        m[y0, x0] * (1 - fx) * (1 - fy)
        + m[y0, x1] * fx * (1 - fy)
        + m[y1, x0] * (1 - fx) * fy
        + m[y1, x1] * fx * fy
    )


def cosim_loss(rep_a: torch.Tensor, rep_b: torch.Tensor, warp: WarpField, n: int) -> torch.Tensor:
    """1 - mean cosine similarity of corresponding NxN score patches.

    The two maps are put into correspondence through the warp (bilinear,
    differentiable); only patches fully covered by valid warp pixels count,
    and zero-norm patches contribute similarity 0.
    """
    if rep_a.shape != rep_b.shape:
        raise ValueError("score maps must share shape")
    h, w = rep_b.shape
    if warp.shape != (h, w):
        raise ValueError("warp does not match rep_b")

    grid = torch.as_tensor(warp.grid, dtype=rep_a.dtype).reshape(-1, 2)
    valid = torch.as_tensor(warp.valid)
    a_aligned = _sample_map_bilinear(rep_a, grid).reshape(h, w)

    hp, wp = h // n, w // n
    if hp == 0 or wp == 0:
        raise RuntimeError("no overlap for cosim: maps smaller than the window")
    va = a_aligned[: hp * n, : wp * n].reshape(hp, n, wp, n).permute(0, 2, 1, 3).reshape(-1, n * n)
    vb = rep_b[: hp * n, : wp * n].reshape(hp, n, wp, n).permute(0, 2, 1, 3).reshape(-1, n * n)
    pv = valid[: hp * n, : wp * n].reshape(hp, n, wp, n).permute(0, 2, 1, 3).reshape(-1, n * n)
    full = pv.all(dim=1)
    if not bool(full.any()):
        raise RuntimeError("no overlap for cosim: no fully valid patch")

    va, vb = va[full], vb[full]
    dots = (va * vb).sum(dim=1)
    norms = va.norm(dim=1) * vb.norm(dim=1)
    cos = dots / norms.clamp(min=1e-12)
    return 1.0 - cos.mean()


def peaky_loss(rep: torch.Tensor, n: int) -> torch.Tensor:
    """1 - mean over non-overlapping NxN windows of (max - mean)."""
    h, w = rep.shape
    if h < n or w < n:
        raise ValueError(f"map {rep.shape} smaller than window {n}")
    tiles = rep.unfold(0, n, n).unfold(1, n, n).reshape(-1, n * n)
    return 1.0 - (tiles.max(dim=1).values - tiles.mean(dim=1)).mean()


def _soft_ap(dist: torch.Tensor, positive: torch.Tensor, keep: torch.Tensor, bins: int) -> torch.Tensor:
    """Histogram-binned average precision, batched.

    dist: (Q, M) descriptor distances in [0, 2]; positive/keep: (Q, M) bool.
    Excluded candidates (keep=False) contribute no mass. Each item's own
    soft mass is left out of the cumulative counts and credited in full
    instead, so an item fully contained in (or straddling) a bin gets its
    exact precision-at-rank and the estimate converges to discrete AP as
    bins grow. Returns (Q,) AP.
    """
    delta = 2.0 / (bins - 1)
    centers = torch.arange(bins, dtype=dist.dtype, device=dist.device) * delta
    # triangular soft assignment of each distance to neighbouring bins
    wgt = (1.0 - (dist.unsqueeze(-1) - centers).abs() / delta).clamp(min=0.0)
    wgt = wgt * keep.unsqueeze(-1).to(dist.dtype)
    pos_f = positive.to(dist.dtype)
    own_cum = wgt.cumsum(dim=-1)  # (Q, M, B)
    cum_pos = (wgt * pos_f.unsqueeze(-1)).sum(dim=1).cumsum(dim=-1)  # (Q, B)
    cum_all = wgt.sum(dim=1).cumsum(dim=-1)
    prec = (cum_pos.unsqueeze(1) - own_cum + 1.0) / (cum_all.unsqueeze(1) - own_cum + 1.0)
    per_item = (wgt * prec).sum(dim=-1)  # (Q, M)
    n_pos = pos_f.sum(dim=-1)
    ap = (per_item * pos_f).sum(dim=-1) / n_pos.clamp(min=1.0)
    # exact value is in [0, 1]; clamp only scrubs float dust
    return ap.clamp(0.0, 1.0)


def soft_ap(query_desc, candidate_descs, positive_flags, ap_bins: int = 20) -> torch.Tensor:
    """Differentiable AP of one query's ranking of its candidates.

    Distances are Euclidean, binned over [0, 2] (valid for unit vectors);
    converges to exact AP as ap_bins grows.
    """
    q = torch.as_tensor(query_desc, dtype=torch.float64)
    c = torch.as_tensor(np.asarray(candidate_descs), dtype=torch.float64) \
        if not torch.is_tensor(candidate_descs) else candidate_descs
    pos = torch.as_tensor(np.asarray(positive_flags, dtype=bool)) \
        if not torch.is_tensor(positive_flags) else positive_flags
    if not bool(pos.any()):
        raise ValueError("soft_ap requires at least one positive candidate")
    dist = (c - q.to(c.dtype)).norm(dim=1).unsqueeze(0)
    keep = torch.ones_like(pos).unsqueeze(0)
    return _soft_ap(dist, pos.unsqueeze(0), keep, ap_bins)[0]


def batch_kappa(ap_values, cap: float = 0.5) -> float:
    """min(cap, mean AP of the batch)."""
    vals = [float(v) for v in ap_values]
    if not vals:
        raise ValueError("batch_kappa needs at least one AP value")
    if min(vals) < 0.0 or max(vals) > 1.0:
        raise ValueError("AP values must lie in [0, 1]")
    return min(cap, sum(vals) / len(vals))


def ap_kappa_loss(ap, reliability, kappa):
    """1 - [ap * R + kappa * (1 - R)]: rank well where reliable, else pay kappa."""
    return 1.0 - (ap * reliability + kappa * (1.0 - reliability))


def ranking_geometry(warp: WarpField, a_shape: tuple[int, int], cfg: LossConfig):
    """Query/candidate layout for the AP term, independent of the network.

    Queries: stride-grid pixels of the second crop with a valid warp.
    Candidates: stride-grid pixels of the first crop. A candidate is
    positive within positive_radius of the query's warped location; the
    annulus up to negative_min_dist is excluded. Queries with no positive
    are dropped. Returns (qy, qx, cy, cx, positive, keep); raises when no
    query survives.
    """
    stride = cfg.query_grid_stride
    off = stride // 2
    h, w = warp.shape
    qy, qx = np.mgrid[off:h:stride, off:w:stride]
    qy, qx = qy.ravel(), qx.ravel()
    q_valid = warp.valid[qy, qx]
    qy, qx = qy[q_valid], qx[q_valid]
    if qy.size == 0:
        raise RuntimeError("no valid query pixels on the grid")

    ha, wa = a_shape
    cy, cx = np.mgrid[off:ha:stride, off:wa:stride]
    cy, cx = cy.ravel(), cx.ravel()

    target = warp.grid[qy, qx]  # (Q, 2) ground-truth locations in crop_a
    cand_pos = np.stack([cx, cy], axis=1).astype(np.float64)  # (M, 2)
    geo = np.linalg.norm(target[:, None, :] - cand_pos[None, :, :], axis=2)
    positive = geo <= cfg.positive_radius_px
    neutral = (geo > cfg.positive_radius_px) & (geo < cfg.negative_min_dist_px)
    keep = ~neutral

    has_pos = positive.any(axis=1)
    if not has_pos.any():
        raise RuntimeError("no query has a positive candidate on the grid")
    return qy[has_pos], qx[has_pos], cy, cx, positive[has_pos], keep[has_pos]


def has_ranking_queries(warp: WarpField, a_shape: tuple[int, int], cfg: LossConfig) -> bool:
    """Whether a crop pair yields at least one usable AP query."""
    try:
        ranking_geometry(warp, a_shape, cfg)
        return True
    except RuntimeError:
        return False


def reliability_ap_terms(
    maps_a: FeatureMaps,
    maps_b: FeatureMaps,
    warp: WarpField,
    cfg: LossConfig,
):
    """Per-query soft AP and reliability for one crop pair.

    See ranking_geometry for the query/candidate layout. Returns
    (ap (Q,), reliability (Q,)) tensors.
    """
    a_shape = tuple(maps_a.repeatability.shape)
    qy, qx, cy, cx, positive, keep = ranking_geometry(warp, a_shape, cfg)

    q_desc = maps_b.descriptors[qy, qx]  # (Q, D)
    c_desc = maps_a.descriptors[cy, cx]  # (M, D)
    # clamped expansion keeps the sqrt gradient finite at zero distance
    sq = (
        (q_desc * q_desc).sum(1)[:, None]
        + (c_desc * c_desc).sum(1)[None, :]
        - 2.0 * (q_desc @ c_desc.T)
    )
    dist = torch.sqrt(sq.clamp(min=1e-12))
    ap = _soft_ap(
        dist,
        torch.as_tensor(positive),
        torch.as_tensor(keep),
        cfg.ap_bins,
    )
    return ap, maps_b.reliability[qy, qx]


def repeatability_terms(
    maps_a: FeatureMaps,
    maps_b: FeatureMaps,
    warp: WarpField,
    cfg: LossConfig,
):
    """(l_cosim, l_peaky_a, l_peaky_b) tensors for one crop pair."""
    l_cosim = cosim_loss(maps_a.repeatability, maps_b.repeatability, warp, cfg.window)
    l_peaky_a = peaky_loss(maps_a.repeatability, cfg.window)
    l_peaky_b = peaky_loss(maps_b.repeatability, cfg.window)
    return l_cosim, l_peaky_a, l_peaky_b


def total_loss(
    maps_a: FeatureMaps,
    maps_b: FeatureMaps,
    warp: WarpField,
    cfg: LossConfig,
    kappa: float | None = None,
):
    """Combined objective for one crop pair; returns (loss, BatchLossReport).

    kappa defaults to this pair's batch schedule (min(cap, mean AP), no
    gradient); pass an explicit value to share a schedule across pairs.
    """
    l_cosim, l_peaky_a, l_peaky_b = repeatability_terms(maps_a, maps_b, warp, cfg)
    l_rep = l_cosim + cfg.peaky_weight * (l_peaky_a + l_peaky_b)

    ap, rel_q = reliability_ap_terms(maps_a, maps_b, warp, cfg)
    mean_ap = float(ap.mean().detach())
    kappa_used = batch_kappa(ap.detach().tolist(), cap=cfg.kappa_cap) if kappa is None else float(kappa)
    l_ap = ap_kappa_loss(ap, rel_q, kappa_used).mean()

    total = l_rep + cfg.ap_loss_weight * l_ap
    report = BatchLossReport(
        l_cosim=float(l_cosim.detach()),
        l_peaky_a=float(l_peaky_a.detach()),
        l_peaky_b=float(l_peaky_b.detach()),
        l_rep=float(l_rep.detach()),
        l_ap=float(l_ap.detach()),
        kappa_used=kappa_used,
        mean_ap=mean_ap,
    )
    return total, report
