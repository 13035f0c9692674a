"""Scale alignment and the depth evaluation suite.

Predictions are scale-invariant, so every metric first removes one global
scale via the exact L1-optimal factor (a |pred|-weighted median of
gt/pred). AbsRel and the delta-threshold error follow the usual
definitions; the planarity pair back-projects annotated regions and fits
a total-least-squares plane.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .data import DepthSample, backproject, denormalize_depth, depth_p98, normalize_depth

METRIC_COLUMNS = ("absrel", "delta1_err", "pe_fla", "pe_ori")


class MetricError(ValueError):
    """Inputs violate a metric's preconditions."""


# --------------------------------------------------------------------------
# scale alignment
# --------------------------------------------------------------------------


def align_scale(pred: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    """Exact minimizer of sum |s*pred - gt| over valid pixels.

    Equals the |pred|-weighted median of gt/pred; non-positive predictions
    are excluded from the median. Ties resolve to the lower candidate.
    """
    m = np.asarray(mask, bool) & (np.asarray(pred) > 0)
    if not m.any():
        raise MetricError("align_scale: no usable pixels")
    p = np.asarray(pred, np.float64)[m]
    g = np.asarray(gt, np.float64)[m]
    r = g / p
    w = np.abs(p)
    order = np.argsort(r, kind="stable")
    r, w = r[order], w[order]
    cw = np.cumsum(w)
    j = int(np.searchsorted(cw, 0.5 * cw[-1], side="left"))
    return float(r[j])


def absrel(pred_aligned: np.ndarray, gt: np.ndarray, mask: np.ndarray) -> float:
    m = np.asarray(mask, bool)
    if not m.any():
        raise MetricError("absrel: empty mask")
    p = np.asarray(pred_aligned, np.float64)[m]
    g = np.asarray(gt, np.float64)[m]
    if (g <= 0).any():
        raise MetricError("absrel: ground truth must be positive on the mask")
    return float(np.mean(np.abs(p - g) / g))


def delta1_err(pred_aligned: np.ndarray, gt: np.ndarray, mask: np.ndarray,
               threshold: float = 1.25) -> float:
    """Fraction of pixels whose ratio (either direction) reaches the
    threshold; the complement of the usual delta accuracy, so lower is
    better."""
    m = np.asarray(mask, bool)
    if not m.any():
        raise MetricError("delta1_err: empty mask")
    p = np.asarray(pred_aligned, np.float64)[m]
    g = np.asarray(gt, np.float64)[m]
    if (g <= 0).any() or (p <= 0).any():
        raise MetricError("delta1_err: values must be positive on the mask")
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio >= threshold))


# --------------------------------------------------------------------------
# planarity
# --------------------------------------------------------------------------


def fit_plane_tls(points: np.ndarray):
    """Total-least-squares plane: returns (unit normal, offset) minimizing
    RMS point-plane distance, or None if the point spread is degenerate."""
    pts = np.asarray(points, np.float64)
    if pts.shape[0] < 3:
        return None
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-9 * max(s[0], 1e-12):  # collinear spread: normal undefined
        return None
    normal = vt[2]
    return normal, float(-normal @ centroid)


def plane_metrics(pred_aligned: np.ndarray, sample: DepthSample,
                  min_pixels: int = 16) -> tuple[float, float]:
    """(pe-fla in cm, pe-ori in degrees), averaged over annotated planes.

    Back-projects masked pixels of the aligned prediction, fits a TLS
    plane, and measures RMS deviation from the fit and the folded angle
    between the fitted and annotated normals. Degenerate fits are skipped.
    """
    usable = 0
    fla_sum = 0.0
    ori_sum = 0.0
    pts_all = backproject(np.asarray(pred_aligned, np.float64),
                          sample.intrinsics)
    for plane in sample.planes:
        m = plane.mask & sample.mask & (np.asarray(pred_aligned) > 0)
        if m.sum() < min_pixels:
            continue
        fit = fit_plane_tls(pts_all[m])
        if fit is None:
            continue
        normal, offset = fit
        dist = pts_all[m] @ normal + offset
        fla_sum += math.sqrt(float(np.mean(dist * dist))) * 100.0
        gt_n = plane.normal / np.linalg.norm(plane.normal)
        cosang = abs(float(normal @ gt_n))
        ori_sum += math.degrees(math.acos(min(1.0, max(-1.0, cosang))))
        usable += 1
    if usable == 0:
        raise MetricError("plane_metrics: no usable plane annotation")
    return fla_sum / usable, ori_sum / usable


# --------------------------------------------------------------------------
# reports and ranking
# --------------------------------------------------------------------------


@dataclass
class DatasetRow:
    dataset: str
    absrel: float
    delta1_err: float
    pe_fla: float
    pe_ori: float
    scale: float


@dataclass
class MetricsReport:
    model: str
    rows: list[DatasetRow] = field(default_factory=list)
    rank: float | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["model", "dataset", "absrel", "delta1_err",
                    "pe_fla", "pe_ori", "scale"])
        for r in self.rows:
            w.writerow([self.model, r.dataset, repr(r.absrel),
                        repr(r.delta1_err), repr(r.pe_fla), repr(r.pe_ori),
                        repr(r.scale)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricsReport":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or rows[0] != ["model", "dataset", "absrel", "delta1_err",
                                   "pe_fla", "pe_ori", "scale"]:
            raise MetricError("metrics CSV: unexpected header")
        report = cls(model=rows[1][0] if len(rows) > 1 else "")
        for r in rows[1:]:
            report.rows.append(DatasetRow(
                dataset=r[1], absrel=float(r[2]), delta1_err=float(r[3]),
                pe_fla=float(r[4]), pe_ori=float(r[5]), scale=float(r[6])))
        return report


def _ascending_ranks(values: list[float]) -> list[float]:
    """1 = best (smallest); ties share the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        mean_rank = (i + j) / 2 + 1
        for k in range(i, j + 1):
            ranks[order[k]] = mean_rank
        i = j + 1
    return ranks


def rank_models(reports: list[MetricsReport]) -> list[float]:
    """Average ascending rank across every (dataset, metric) column."""
    if len(reports) < 2:
        raise MetricError("rank_models: need at least two reports")
    layout = [(r.dataset,) for r in reports[0].rows]
    for rep in reports[1:]:
        if [(r.dataset,) for r in rep.rows] != layout:
            raise MetricError("rank_models: reports cover different datasets")
    totals = [0.0] * len(reports)
    cells = 0
    for row_i in range(len(layout)):
        for col in METRIC_COLUMNS:
            vals = [getattr(rep.rows[row_i], col) for rep in reports]
            for mi, rk in enumerate(_ascending_ranks(vals)):
                totals[mi] += rk
        cells += len(METRIC_COLUMNS)
    ranks = [t / cells for t in totals]
    for rep, rk in zip(reports, ranks):
        rep.rank = rk
    return ranks


# --------------------------------------------------------------------------
# dataset-level evaluation
# --------------------------------------------------------------------------


def evaluate_rasters(pred_depths: list[np.ndarray],
                     samples: list[DepthSample],
                     model_name: str, dataset_name: str) -> MetricsReport:
    """Aggregate aligned metrics of per-sample metric-depth predictions."""
    if len(pred_depths) != len(samples):
        raise MetricError("evaluate_rasters: length mismatch")
    absrels, deltas, flas, oris, scales = [], [], [], [], []
    for pred, sample in zip(pred_depths, samples):
        s = align_scale(pred, sample.depth, sample.mask)
        aligned = np.maximum(pred * s, 1e-6)
        absrels.append(absrel(aligned, sample.depth, sample.mask))
        deltas.append(delta1_err(aligned, sample.depth, sample.mask))
        scales.append(s)
        try:
            fla, ori = plane_metrics(aligned, sample)
        except MetricError:
            continue
        flas.append(fla)
        oris.append(ori)
    row = DatasetRow(
        dataset=dataset_name,
        absrel=float(np.mean(absrels)),
        delta1_err=float(np.mean(deltas)),
        pe_fla=float(np.mean(flas)) if flas else float("nan"),
        pe_ori=float(np.mean(oris)) if oris else float("nan"),
        scale=float(np.mean(scales)),
    )
    return MetricsReport(model=model_name, rows=[row])


# --------------------------------------------------------------------------
# model evaluation pipelines
# --------------------------------------------------------------------------


def _image_tokens(vq, samples):
    images = np.stack([s.image for s in samples])
    feats = vq.encode_image_batch(images)
    return np.concatenate(vq.decompose_batch(feats), axis=1).astype(np.int64)


def _aligned_absrel(pred: np.ndarray, sample: DepthSample) -> float:
    """Align-then-AbsRel with a unit-scale fallback for degenerate
    predictions (no positive pixel under the mask)."""
    try:
        s = align_scale(pred, sample.depth, sample.mask)
    except MetricError:
        s = 1.0
    aligned = np.maximum(pred * s, 1e-6)
    return absrel(aligned, sample.depth, sample.mask)


def predict_depth_rasters(model, vq, samples: list[DepthSample],
                          chunk: int = 32) -> list[np.ndarray]:
    """Greedy inference end to end: image -> token maps -> composed
    features -> decoded raster -> metric depth (using each sample's own
    98th-percentile for un-normalization)."""
    from .var import infer_batch

    preds: list[np.ndarray] = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        z = infer_batch(model, vq, _image_tokens(vq, part))
        dec = vq.decode_batch(vq.compose_batch(z))[:, 0]
        for i, s in enumerate(part):
            preds.append(denormalize_depth(dec[i], depth_p98(s.depth, s.mask)))
    return preds


def vq_reconstruction_rasters(vq, samples: list[DepthSample],
                              chunk: int = 64) -> list[np.ndarray]:
    """Autoencoder floor: encode ground truth, decompose, compose, decode."""
    preds: list[np.ndarray] = []
    for lo in range(0, len(samples), chunk):
        part = samples[lo:lo + chunk]
        norm = np.stack([normalize_depth(s.depth, s.mask) for s in part])[:, None]
        feats = vq.encode_batch(norm)
        dec = vq.decode_batch(vq.compose_batch(vq.decompose_batch(feats)))[:, 0]
        for i, s in enumerate(part):
            preds.append(denormalize_depth(dec[i], depth_p98(s.depth, s.mask)))
    return preds


def per_scale_curve(model, vq, samples: list[DepthSample],
                    chunk: int = 32) -> tuple[list[tuple[int, float]], float]:
    """AbsRel of the decoded cumulative composition after each scale, plus
    the autoencoder's end-to-end floor."""
    from .var import infer_batch

    k_total = len(vq.schedule)
    sums = np.zeros(k_total)
    floor_sum = 0.0
    n = len(samples)
    for lo in range(0, n, chunk):
        part = samples[lo:lo + chunk]
        z = infer_batch(model, vq, _image_tokens(vq, part))
        acc = np.zeros((len(part), vq.emb_dim) + vq.schedule.latent, np.float32)
        for k in range(k_total):
            acc = acc + vq.eta_batch(z[k], k)
            dec = vq.decode_batch(acc)[:, 0]
            for i, s in enumerate(part):
                pred = denormalize_depth(dec[i], depth_p98(s.depth, s.mask))
                sums[k] += _aligned_absrel(pred, s)
        norm = np.stack([normalize_depth(s.depth, s.mask) for s in part])[:, None]
        feats = vq.encode_batch(norm)
        rec = vq.decode_batch(vq.compose_batch(vq.decompose_batch(feats)))[:, 0]
        for i, s in enumerate(part):
            pred = denormalize_depth(rec[i], depth_p98(s.depth, s.mask))
            floor_sum += _aligned_absrel(pred, s)
    curve = [(k + 1, float(sums[k] / n)) for k in range(k_total)]
    return curve, floor_sum / n


def write_scale_curve_csv(path: str, curve: list[tuple[int, float]],
                          floor: float) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["k", "absrel", "floor"])
        for k, val in curve:
            w.writerow([k, repr(float(val)), repr(float(floor))])
