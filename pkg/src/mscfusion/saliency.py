"""Representation saliency in voxel space.

Per-dimension integrated gradients (the gradient target is one coordinate of
z, realized by a one-hot output weighting), smoothing and rescaling of raw
gradient maps, voxel-wise Mann-Whitney group statistics with rank-biserial
effect sizes, cluster extraction, atlas overlap via DICE, and cross-modal
ROI link graphs from feature-dimension correlations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage
from scipy.special import ndtr
from scipy.stats import rankdata

from .errors import ConfigurationError, DataError, NumericError
from .model import ModalityModel
from .synthdata import AtlasVolume, minmax_rescale


# ---------------------------------------------------------------------------
# Integrated gradients
# ---------------------------------------------------------------------------

def integrated_gradients_dim(
    part: ModalityModel,
    volume: np.ndarray,
    dim: int,
    baseline: np.ndarray | None = None,
    steps: int = 64,
    batch_size: int = 16,
    dtype: torch.dtype = torch.float32,
) -> np.ndarray:
    """Path-integrated gradient of z[dim] from a baseline to the input.

    Uses midpoint quadrature over the straight-line path (alpha at
    (t - 1/2) / steps), which keeps the completeness residual well under the
    Riemann-endpoint error at the same step count. The default baseline is
    the zero volume, matching the normalized intensity floor.
    """
    d = part.encoder.spec.repr_dim
    if not 0 <= dim < d:
        raise ConfigurationError(f"dim must be in 0..{d - 1}")
    if steps < 8:
        raise ConfigurationError("steps must be >= 8")
    x = torch.as_tensor(volume, dtype=dtype)
    x0 = (
        torch.zeros_like(x)
        if baseline is None
        else torch.as_tensor(baseline, dtype=dtype)
    )
    if x0.shape != x.shape:
        raise ConfigurationError("baseline shape mismatch")
    diff = x - x0
    alphas = (torch.arange(steps, dtype=dtype) + 0.5) / steps

    part.eval()
    grad_sum = torch.zeros_like(x)
    for i in range(0, steps, batch_size):
        chunk = alphas[i : i + batch_size]
        pts = x0[None] + chunk[:, None, None, None] * diff[None]
        pts = pts.unsqueeze(1).requires_grad_(True)
        z = part.encode(pts).z
        z[:, dim].sum().backward()
        grad_sum = grad_sum + pts.grad.detach().sum(dim=0)[0]
    ig = (diff * grad_sum / steps).numpy()
    if not np.isfinite(ig).all():
        raise NumericError("integrated gradients produced non-finite values")
    return ig


@dataclass
class SaliencyVolume:
    """Post-processed nonnegative saliency map in [0, 1]."""

    values: np.ndarray
    subject_id: str = ""
    modality: str = ""
    dimension: int = -1


def postprocess(
    raw: np.ndarray,
    brain_mask: np.ndarray,
    sigma: float = 1.5,
    truncate: float = 4.0,
) -> np.ndarray:
    """Clamp negatives, mask, rescale to [0, 1], then Gaussian-smooth.

    The kernel is truncated at ``truncate`` sigmas and renormalized at the
    volume boundary (smoothing a constant stays constant); masked voxels are
    zero in the output.
    """
    raw = np.asarray(raw, dtype=np.float64)
    mask = np.asarray(brain_mask).astype(bool)
    if mask.shape != raw.shape:
        raise ConfigurationError("mask shape mismatch")
    if not mask.any():
        raise DataError("empty brain mask")
    v = np.where(raw > 0, raw, 0.0) * mask
    v = minmax_rescale(v).astype(np.float64)
    smoothed = ndimage.gaussian_filter(
        v, sigma=sigma, truncate=truncate, mode="constant"
    )
    norm = ndimage.gaussian_filter(
        np.ones_like(v), sigma=sigma, truncate=truncate, mode="constant"
    )
    out = smoothed / norm * mask
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Voxel-wise group statistics
# ---------------------------------------------------------------------------

@dataclass
class GroupStatMap:
    """Voxel-wise U statistic, two-sided p, and rank-biserial correlation."""

    U: np.ndarray
    p: np.ndarray
    rbc: np.ndarray


def _exact_u_pmf(n1: int, n2: int) -> np.ndarray:
    """Null distribution of U for tie-free samples via the standard counting
    recurrence: N(u | m, n) = N(u - n | m - 1, n) + N(u | m, n - 1)."""
    max_u = n1 * n2
    table = np.zeros((n1 + 1, n2 + 1, max_u + 1))
    table[0, :, 0] = 1.0
    table[:, 0, 0] = 1.0
    for m in range(1, n1 + 1):
        for n in range(1, n2 + 1):
            shifted = np.zeros(max_u + 1)
            shifted[n:] = table[m - 1, n, : max_u + 1 - n]
            table[m, n] = shifted + table[m, n - 1]
    pmf = table[n1, n2]
    return pmf / pmf.sum()


def _exact_two_sided_p(u: np.ndarray, n1: int, n2: int) -> np.ndarray:
    pmf = _exact_u_pmf(n1, n2)
    cdf = np.cumsum(pmf)
    sf = np.cumsum(pmf[::-1])[::-1]
    ui = np.rint(u).astype(int)
    return np.minimum(1.0, 2.0 * np.minimum(cdf[ui], sf[ui]))


def _asymptotic_two_sided_p(
    u: np.ndarray, ranks: np.ndarray, n1: int, n2: int
) -> np.ndarray:
    """Tie-corrected normal approximation with continuity correction."""
    n = n1 + n2
    mu = n1 * n2 / 2.0
    tie_term = np.zeros(u.shape)
    sorted_ranks = np.sort(ranks, axis=0)
    # run lengths of tied ranks per voxel
    for col in range(ranks.shape[1]):
        _, counts = np.unique(sorted_ranks[:, col], return_counts=True)
        tie_term[col] = (counts.astype(np.float64) ** 3 - counts).sum()
    sigma2 = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    sigma = np.sqrt(np.maximum(sigma2, 0.0))
    shift = np.abs(u - mu) - 0.5  # continuity correction toward the mean
    shift = np.maximum(shift, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sigma > 0, shift / sigma, 0.0)
    p = 2.0 * (1.0 - ndtr(z))
    p = np.where(sigma > 0, p, 1.0)
    return np.minimum(p, 1.0)


def group_stats(saliencies_a, saliencies_b) -> GroupStatMap:
    """Voxel-wise two-sided Mann-Whitney test between two groups of maps.

    U counts (group-A > group-B) pairs plus half-ties; rbc = 1 - 2U/(n1*n2).
    p uses the tie-corrected normal approximation with continuity correction
    when n1*n2 > 400, exact enumeration otherwise (tied voxels in the exact
    regime fall back to the approximation, which is the standard recourse;
    degenerate all-constant voxels get rbc 0, p 1).
    """
    a = np.asarray(saliencies_a, dtype=np.float64)
    b = np.asarray(saliencies_b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[1:] != b.shape[1:]:
        raise ConfigurationError("groups must be stacks of same-shape volumes")
    n1, n2 = a.shape[0], b.shape[0]
    if n1 < 2 or n2 < 2:
        raise ConfigurationError("each group needs >= 2 subjects")
    shape = a.shape[1:]
    af = a.reshape(n1, -1)
    bf = b.reshape(n2, -1)

    combined = np.concatenate([af, bf], axis=0)
    ranks = rankdata(combined, axis=0)
    u = ranks[:n1].sum(axis=0) - n1 * (n1 + 1) / 2.0
    rbc = 1.0 - 2.0 * u / (n1 * n2)

    sorted_vals = np.sort(combined, axis=0)
    has_ties = (sorted_vals[:-1] == sorted_vals[1:]).any(axis=0)
    if n1 * n2 > 400:
        p = _asymptotic_two_sided_p(u, ranks, n1, n2)
    else:
        p = np.empty_like(u)
        clean = ~has_ties
        if clean.any():
            p[clean] = _exact_two_sided_p(u[clean], n1, n2)
        if has_ties.any():
            p[has_ties] = _asymptotic_two_sided_p(
                u[has_ties], ranks[:, has_ties], n1, n2
            )
    degenerate = (combined == combined[0]).all(axis=0)
    rbc = np.where(degenerate, 0.0, rbc)
    p = np.where(degenerate, 1.0, p)
    p = np.clip(p, 0.0, 1.0)
    return GroupStatMap(
        U=u.reshape(shape), p=p.reshape(shape), rbc=rbc.reshape(shape)
    )


# ---------------------------------------------------------------------------
# Clusters, DICE, atlas overlap
# ---------------------------------------------------------------------------

@dataclass
class Cluster:
    voxels: np.ndarray  # boolean volume
    size: int
    peak_rbc: float
    centroid: tuple[float, float, float]


@dataclass
class ClusterReport:
    clusters: list[Cluster]
    dimension: int = -1
    modality: str = ""


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 26:
        return np.ones((3, 3, 3), dtype=bool)
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    raise ConfigurationError("connectivity must be 6 or 26")


def threshold_and_clusterize(
    stat: GroupStatMap,
    p_low: float = 0.025,
    min_size: int = 200,
    connectivity: int = 26,
) -> ClusterReport:
    """Select voxels with two-sided p <= 2 * p_low, split them by effect
    sign, and keep connected components of at least ``min_size`` voxels."""
    structure = _structure(connectivity)
    significant = stat.p <= 2.0 * p_low
    clusters: list[Cluster] = []
    for sign_mask in (significant & (stat.rbc > 0), significant & (stat.rbc < 0)):
        labeled, n = ndimage.label(sign_mask, structure=structure)
        for comp in range(1, n + 1):
            voxels = labeled == comp
            size = int(voxels.sum())
            if size < min_size:
                continue
            vals = stat.rbc[voxels]
            peak = vals[np.argmax(np.abs(vals))]
            coords = np.argwhere(voxels)
            clusters.append(
                Cluster(
                    voxels=voxels,
                    size=size,
                    peak_rbc=float(peak),
                    centroid=tuple(coords.mean(axis=0)),
                )
            )
    clusters.sort(key=lambda c: -c.size)
    return ClusterReport(clusters=clusters)


def dice(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    """2|A and B| / (|A| + |B|); 0 when both masks are empty."""
    a = np.asarray(mask_a).astype(bool)
    b = np.asarray(mask_b).astype(bool)
    if a.shape != b.shape:
        raise ConfigurationError("dice masks must share a shape")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / total


def cluster_attributions(
    report: ClusterReport, atlas: AtlasVolume
) -> list[dict]:
    """Per cluster: the argmax-DICE ROI (0 when the cluster overlaps no
    ROI) along with size, peak effect, and centroid."""
    if report.clusters and report.clusters[0].voxels.shape != atlas.labels.shape:
        raise ConfigurationError("atlas shape mismatch")
    n_rois = len(atlas.roi_names)
    rows = []
    for cluster in report.clusters:
        best_roi, best_dice = 0, 0.0
        for roi in range(1, n_rois + 1):
            d = dice(cluster.voxels, atlas.roi_mask(roi))
            if d > best_dice:
                best_roi, best_dice = roi, d
        rows.append(
            {
                "size": cluster.size,
                "peak_rbc": cluster.peak_rbc,
                "centroid": list(cluster.centroid),
                "roi": best_roi,
                "dice": best_dice,
            }
        )
    return rows


def atlas_overlap(report: ClusterReport, atlas: AtlasVolume) -> dict[int, float]:
    """Best-ROI attribution per cluster, reduced to {roi_id: max DICE} for
    the report's dimension. Clusters overlapping no ROI are dropped."""
    table: dict[int, float] = {}
    for row in cluster_attributions(report, atlas):
        if row["roi"]:
            table[row["roi"]] = max(table.get(row["roi"], 0.0), row["dice"])
    return table


def filter_rois_by_fold_support(
    tables_by_fold: list[dict[int, dict[int, float]]], min_folds: int = 2
) -> dict[int, dict[int, float]]:
    """Cross-fold filter: keep (dimension, ROI) entries found in at least
    ``min_folds`` folds; values become the max DICE across folds."""
    support: dict[tuple[int, int], list[float]] = {}
    for table in tables_by_fold:
        for dim, rois in table.items():
            for roi, value in rois.items():
                support.setdefault((dim, roi), []).append(value)
    out: dict[int, dict[int, float]] = {}
    for (dim, roi), values in support.items():
        if len(values) >= min_folds:
            out.setdefault(dim, {})[roi] = max(values)
    return out


# ---------------------------------------------------------------------------
# Cross-modal link graph
# ---------------------------------------------------------------------------

@dataclass
class LinkGraph:
    """Bipartite ROI-to-ROI edges weighted by cross-dimension correlation."""

    edges: list[tuple[int, int, float]]  # (roi_m1, roi_m2, weight)
    top_k: int = 64


def _column_correlations(Z1: np.ndarray, Z2: np.ndarray) -> np.ndarray:
    """Pearson matrix between columns of Z1 (rows) and Z2 (cols); constant
    columns yield NaN rows/cols and a warning."""
    Z1 = np.asarray(Z1, dtype=np.float64)
    Z2 = np.asarray(Z2, dtype=np.float64)
    if Z1.shape[0] != Z2.shape[0]:
        raise ConfigurationError("feature matrices must be row-aligned")
    s1 = Z1.std(axis=0)
    s2 = Z2.std(axis=0)
    if (s1 == 0).any() or (s2 == 0).any():
        warnings.warn(
            "constant feature columns have undefined correlations; skipping",
            UserWarning,
            stacklevel=2,
        )
    a = (Z1 - Z1.mean(axis=0)) / np.where(s1 == 0, np.nan, s1)
    b = (Z2 - Z2.mean(axis=0)) / np.where(s2 == 0, np.nan, s2)
    return a.T @ b / Z1.shape[0]


def crossmodal_links(
    Z_m1: np.ndarray,
    Z_m2: np.ndarray,
    dice_m1: dict[int, dict[int, float]],
    dice_m2: dict[int, dict[int, float]],
    top_k: int = 64,
) -> LinkGraph:
    """Seed every ROI with its best-DICE dimension, follow that dimension's
    strongest positive and negative correlation into the other modality, and
    connect the seed to every ROI attributed to the partner dimension.
    Edges are deduplicated keeping the largest |weight| and ranked by it.
    """
    corr = _column_correlations(Z_m1, Z_m2)
    edges: dict[tuple[int, int], float] = {}

    def best_dim_for_roi(table: dict[int, dict[int, float]], roi: int):
        best = None
        for dim, rois in table.items():
            if roi in rois and (best is None or rois[roi] > best[1]):
                best = (dim, rois[roi])
        return None if best is None else best[0]

    def partner_dims(vec: np.ndarray) -> list[int]:
        if np.isnan(vec).all():
            return []
        out = [int(np.nanargmax(vec))]
        j_neg = int(np.nanargmin(vec))
        if j_neg not in out:
            out.append(j_neg)
        return out

    def add_edge(roi1: int, roi2: int, weight: float) -> None:
        if np.isnan(weight):
            return
        key = (roi1, roi2)
        if key not in edges or abs(weight) > abs(edges[key]):
            edges[key] = float(weight)

    rois_m1 = {roi for rois in dice_m1.values() for roi in rois}
    rois_m2 = {roi for rois in dice_m2.values() for roi in rois}

    for roi in sorted(rois_m1):
        dim = best_dim_for_roi(dice_m1, roi)
        for j in partner_dims(corr[dim]):
            for roi2 in dice_m2.get(j, {}):
                add_edge(roi, roi2, corr[dim, j])
    for roi in sorted(rois_m2):
        dim = best_dim_for_roi(dice_m2, roi)
        for i in partner_dims(corr[:, dim]):
            for roi1 in dice_m1.get(i, {}):
                add_edge(roi1, roi, corr[i, dim])

    ranked = sorted(
        edges.items(), key=lambda kv: (-abs(kv[1]), kv[0])
    )[:top_k]
    return LinkGraph(
        edges=[(r1, r2, w) for (r1, r2), w in ranked], top_k=top_k
    )
