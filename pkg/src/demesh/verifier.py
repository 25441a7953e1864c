"""Verification protocol and image metrics.

One gallery image (the recovered ID photo) and one daily probe per identity
give N genuine and N^2 - N impostor cosine scores; the ROC is swept over
every distinct score with step semantics (no interpolation), and operating
points are read off conservatively: the point with the largest false-positive
rate not exceeding the target. PSNR and feature RMSE report pixel- and
feature-space distance to the clear ground truth over all test triplets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import stn
from .facegen import SplitData
from .featnet import FeatureNet
from .layers import ShapeError

Array = np.ndarray

FPR_TARGETS = (1e-2, 1e-3, 1e-4)
REPORT_HEADER = "model\ttpr_fpr_1e2\ttpr_fpr_1e3\ttpr_fpr_1e4\tpsnr_db\tfeature_rmse"


@dataclass
class ScoreSet:
    genuine: list[float]
    impostor: list[float]


@dataclass
class RocPoint:
    fpr: float
    tpr: float
    threshold: float


@dataclass
class EvalReport:
    model: str
    psnr_db: float
    feature_rmse: float
    tpr_at: dict[float, float]
    roc: list[RocPoint] = field(default_factory=list)

    def row(self) -> str:
        psnr = "inf" if math.isinf(self.psnr_db) else f"{self.psnr_db:.6f}"
        tprs = "\t".join(f"{self.tpr_at[t]:.6f}" for t in FPR_TARGETS)
        return f"{self.model}\t{tprs}\t{psnr}\t{self.feature_rmse:.6f}"


# ---------------------------------------------------------------------------
# scalar metrics
# ---------------------------------------------------------------------------

def cosine_similarity(f1: Array, f2: Array) -> float:
    if f1.shape != f2.shape:
        raise ShapeError(f"feature widths differ: {f1.shape} vs {f2.shape}")
    n1 = float(np.linalg.norm(f1))
    n2 = float(np.linalg.norm(f2))
    if n1 == 0.0 or n2 == 0.0:
        raise ValueError("cosine similarity undefined for a zero-norm feature")
    return float(np.dot(f1, f2) / (n1 * n2))


def psnr(pred: Array, target: Array, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE); identical images report +inf."""
    if pred.shape != target.shape:
        raise ShapeError(f"image shapes differ: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def feature_rmse(preds: list[Array], targets: list[Array]) -> float:
    """Mean over samples of the Euclidean feature distance."""
    if len(preds) != len(targets):
        raise ValueError(f"sample counts differ: {len(preds)} vs {len(targets)}")
    dists = []
    for p, t in zip(preds, targets):
        if p.shape != t.shape:
            raise ShapeError(f"feature widths differ: {p.shape} vs {t.shape}")
        dists.append(float(np.linalg.norm(p - t)))
    return float(np.mean(dists))


# ---------------------------------------------------------------------------
# ROC
# ---------------------------------------------------------------------------

def roc(scores: ScoreSet) -> list[RocPoint]:
    """Threshold sweep over every distinct score; a pair accepts when its
    score is >= the threshold. Points come out sorted by FPR (then TPR)."""
    if not scores.genuine or not scores.impostor:
        raise ValueError("both genuine and impostor scores are required")
    genuine = np.asarray(scores.genuine, dtype=np.float64)
    impostor = np.asarray(scores.impostor, dtype=np.float64)
    points = []
    for t in np.unique(np.concatenate([genuine, impostor])):
        points.append(RocPoint(
            fpr=float(np.mean(impostor >= t)),
            tpr=float(np.mean(genuine >= t)),
            threshold=float(t)))
    points.sort(key=lambda p: (p.fpr, p.tpr))
    return points


def tpr_at_fpr(points: list[RocPoint], target: float) -> float:
    """TPR of the point with the largest FPR <= target; 0 when only the
    trivial origin qualifies."""
    if not (0.0 < target < 1.0):
        raise ValueError(f"target FPR must be in (0, 1), got {target}")
    best = 0.0
    for p in points:
        if p.fpr <= target:
            best = max(best, p.tpr)
    return best


def verification_scores(gallery: Array, probes: Array) -> ScoreSet:
    """All-pairs cosine scores between N gallery and N probe features; the
    diagonal pairs are genuine, everything else impostor."""
    if gallery.shape != probes.shape:
        raise ShapeError(f"gallery {gallery.shape} vs probes {probes.shape}")
    n = gallery.shape[0]
    genuine, impostor = [], []
    for i in range(n):
        for j in range(n):
            s = cosine_similarity(gallery[i], probes[j])
            (genuine if i == j else impostor).append(s)
    return ScoreSet(genuine, impostor)


# ---------------------------------------------------------------------------
# full protocol
# ---------------------------------------------------------------------------

def _aligned_features(phi: FeatureNet, images: Array, eyes_list) -> Array:
    crops = np.stack([
        stn.bilinear_sample(img, stn.alignment_grid(
            eyes, img.shape[1], img.shape[2], phi.in_h, phi.in_w))
        for img, eyes in zip(images, eyes_list)])
    return phi.features(crops)


def run_protocol(model: str, recover_fn, data: SplitData,
                 phi: FeatureNet) -> EvalReport:
    """Evaluate one recovery function on a test split.

    ``recover_fn`` maps a batch of corrupted images (N, 1, H, W) to recovered
    images of the same shape. PSNR and feature RMSE are computed against the
    clear ground truth over every triplet; verification scores every
    (recovered gallery, daily probe) pair over one gallery image (the first
    triplet) and one daily photo per identity.
    """
    if not data.triplets:
        raise ValueError("empty test split")
    xs = np.stack([t.x for t in data.triplets])
    ys = np.stack([t.y for t in data.triplets])
    recovered = recover_fn(xs)
    if recovered.shape != xs.shape:
        raise ShapeError(
            f"recovery changed the batch shape: {recovered.shape} vs {xs.shape}")

    psnrs = [psnr(recovered[i], ys[i]) for i in range(len(data.triplets))]
    eyes = [t.eyes for t in data.triplets]
    feats_rec = _aligned_features(phi, recovered, eyes)
    feats_clear = _aligned_features(phi, ys, eyes)
    rmse = feature_rmse(list(feats_rec), list(feats_clear))

    gallery_rows = []
    seen = set()
    for i, t in enumerate(data.triplets):
        if t.identity not in seen:
            seen.add(t.identity)
            gallery_rows.append(i)
    idents = [data.triplets[i].identity for i in gallery_rows]
    missing = [ident for ident in idents if ident not in data.dailies]
    if missing:
        raise ValueError(f"identities without a daily photo: {missing}")
    gallery_feats = feats_rec[gallery_rows]
    probe_imgs = np.stack([data.dailies[ident].image for ident in idents])
    probe_eyes = [data.dailies[ident].eyes for ident in idents]
    probe_feats = _aligned_features(phi, probe_imgs, probe_eyes)

    scores = verification_scores(gallery_feats, probe_feats)
    points = roc(scores)
    return EvalReport(
        model=model,
        psnr_db=float(np.mean(psnrs)),
        feature_rmse=rmse,
        tpr_at={t: tpr_at_fpr(points, t) for t in FPR_TARGETS},
        roc=points)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def write_report_tsv(reports: list[EvalReport], path: str | Path) -> None:
    lines = [REPORT_HEADER] + [r.row() for r in reports]
    Path(path).write_text("\n".join(lines) + "\n")


def write_roc_tsv(report: EvalReport, out_dir: str | Path) -> Path:
    path = Path(out_dir) / f"roc_{report.model}.tsv"
    lines = ["fpr\ttpr\tthreshold"]
    lines += [f"{p.fpr:.9f}\t{p.tpr:.9f}\t{p.threshold:.9f}" for p in report.roc]
    path.write_text("\n".join(lines) + "\n")
    return path


def read_roc_tsv(path: str | Path) -> list[RocPoint]:
    lines = Path(path).read_text().splitlines()
    points = []
    for line in lines[1:]:
        fpr, tpr, thr = (float(v) for v in line.split("\t"))
        points.append(RocPoint(fpr, tpr, thr))
    return points
