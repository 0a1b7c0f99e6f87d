"""Confusion-matrix metrics, fragment-voting precise testing with optional
test-time augmentation, fast single-subsample evaluation, and cross-domain
scoring through the label translation layer.

Precise testing partitions each (possibly augmented) cloud into
voxel-disjoint fragments, predicts every fragment, and tallies one-hot
votes per original point; the reported label is the vote argmax with ties
resolved to the lowest class index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io as _io
from .augment import TtaConfig, tta_instances
from .cloud import IGNORE_LABEL, PointCloud
from .labels import LabelSpace, TranslationMap, build_translation, translate_labels
from .network import Model, forward
from .sampling import as_rng, fragment_partition, voxel_grid_sample

FRAGMENT_BUDGET = 200_000


def point_features(pc: PointCloud) -> np.ndarray:
    """Deterministic eval-time features: colors mapped from 0-255 to [-1, 1].

    Real-valued colors (already feature scale) pass through unchanged.
    """
    if pc.colors is None:
        raise ValueError("evaluation needs point colors as input features")
    col = pc.colors
    if np.issubdtype(col.dtype, np.integer):
        return col.astype(np.float64) / 127.5 - 1.0
    return col.astype(np.float64)


# ---------------------------------------------------------------------------
# Confusion counting and derived metrics

@dataclass
class ConfusionMatrix:
    counts: np.ndarray
    excluded: frozenset = frozenset()
    class_names: tuple[str, ...] | None = None

    @classmethod
    def empty(cls, num_classes: int, excluded=(), class_names=None) -> "ConfusionMatrix":
        return cls(counts=np.zeros((num_classes, num_classes), dtype=np.int64),
                   excluded=frozenset(excluded),
                   class_names=tuple(class_names) if class_names else None)

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def add(self, predicted, truth) -> "ConfusionMatrix":
        """Count non-ignored points in place; returns self for chaining."""
        predicted = np.asarray(predicted, dtype=np.int64)
        truth = np.asarray(truth, dtype=np.int64)
        if predicted.shape != truth.shape:
            raise ValueError("prediction/truth length mismatch")
        valid = truth != IGNORE_LABEL
        t = truth[valid]
        p = predicted[valid]
        C = self.num_classes
        if len(t) and (t.min() < 0 or t.max() >= C or p.min() < 0 or p.max() >= C):
            raise ValueError("class index outside the matrix")
        np.add.at(self.counts, (t, p), 1)
        return self

    def merged(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.counts.shape != self.counts.shape:
            raise ValueError("cannot merge matrices of different sizes")
        return ConfusionMatrix(counts=self.counts + other.counts,
                               excluded=self.excluded | other.excluded,
                               class_names=self.class_names or other.class_names)


def accumulate(conf: ConfusionMatrix, predicted, truth) -> ConfusionMatrix:
    """Functional counterpart of ConfusionMatrix.add; input left untouched."""
    out = ConfusionMatrix(counts=conf.counts.copy(), excluded=conf.excluded,
                          class_names=conf.class_names)
    return out.add(predicted, truth)


@dataclass
class MetricsReport:
    iou: np.ndarray
    acc: np.ndarray
    valid: np.ndarray
    miou: float
    macc: float
    allacc: float
    class_names: tuple[str, ...] | None = None
    precise: bool = False

    def name_of(self, c: int) -> str:
        return self.class_names[c] if self.class_names else str(c)

    def to_dict(self) -> dict:
        out = {"mIoU": self.miou, "mAcc": self.macc, "allAcc": self.allacc,
               "precise": self.precise}
        for c in range(len(self.iou)):
            if self.valid[c]:
                out[f"IoU.{self.name_of(c)}"] = float(self.iou[c])
                out[f"Acc.{self.name_of(c)}"] = float(self.acc[c])
        return out

    def to_table(self) -> str:
        star = "*" if self.precise else ""
        lines = ["class\tIoU\tAcc\tscored"]
        for c in range(len(self.iou)):
            flag = "yes" if self.valid[c] else "no"
            lines.append(f"{self.name_of(c)}\t{float(self.iou[c])!r}"
                         f"\t{float(self.acc[c])!r}\t{flag}")
        lines.append(f"summary{star}\tmIoU={self.miou!r}\tmAcc={self.macc!r}"
                     f"\tallAcc={self.allacc!r}")
        return "\n".join(lines) + "\n"


def metrics(conf: ConfusionMatrix, precise: bool = False) -> MetricsReport:
    """Per-class IoU/Acc plus mIoU, mAcc, allAcc over scoreable classes.

    A class is scoreable when TP+FP+FN > 0 and it is not excluded by the
    label translation.
    """
    total = conf.total
    if total == 0:
        raise ValueError("empty confusion matrix")
    counts = conf.counts.astype(np.float64)
    tp = np.diag(counts)
    fn = counts.sum(axis=1) - tp
    fp = counts.sum(axis=0) - tp
    denom = tp + fp + fn
    valid = denom > 0
    for c in conf.excluded:
        valid[c] = False
    iou = np.zeros(conf.num_classes)
    acc = np.zeros(conf.num_classes)
    np.divide(tp, denom, out=iou, where=denom > 0)
    np.divide(tp, tp + fn, out=acc, where=(tp + fn) > 0)
    if not valid.any():
        raise ValueError("no scoreable class in the confusion matrix")
    return MetricsReport(iou=iou, acc=acc, valid=valid,
                         miou=float(iou[valid].mean()),
                         macc=float(acc[valid].mean()),
                         allacc=float(tp.sum() / total),
                         class_names=conf.class_names, precise=precise)


# ---------------------------------------------------------------------------
# Vote aggregation

@dataclass
class VoteBuffer:
    votes: np.ndarray
    coverage: np.ndarray

    @classmethod
    def empty(cls, n_points: int, num_classes: int) -> "VoteBuffer":
        return cls(votes=np.zeros((n_points, num_classes), dtype=np.int64),
                   coverage=np.zeros(n_points, dtype=np.int64))

    def add(self, indices: np.ndarray, labels: np.ndarray) -> None:
        np.add.at(self.votes, (indices, labels), 1)
        np.add.at(self.coverage, indices, 1)

    def merged(self, other: "VoteBuffer") -> "VoteBuffer":
        return VoteBuffer(votes=self.votes + other.votes,
                          coverage=self.coverage + other.coverage)

    def final_labels(self) -> np.ndarray:
        """Vote argmax per point; ties resolve to the lowest class index."""
        if (self.coverage == 0).any():
            raise RuntimeError("point left unvoted during precise testing")
        return np.argmax(self.votes, axis=1).astype(np.int64)


# ---------------------------------------------------------------------------
# Prediction paths

def _predict(model, X, F) -> np.ndarray:
    if isinstance(model, Model):
        return forward(model, X, F)
    return model(X, F)


def _num_classes_of(model, num_classes):
    if num_classes is not None:
        return int(num_classes)
    if isinstance(model, Model):
        return model.config.num_classes
    raise ValueError("num_classes is required for a bare predictor callable")


def _min_fragment_points(model) -> int:
    return model.config.k_neighbors if isinstance(model, Model) else 1


def _merge_small(frag_indices: list[np.ndarray], min_points: int) -> list[np.ndarray]:
    """Fold fragments below the neighborhood size into their predecessor.

    Rank-0 fragments hold one point per occupied voxel, so only late ranks
    (dense-voxel leftovers) can be tiny; folding preserves coverage.
    """
    out: list[np.ndarray] = []
    for idx in frag_indices:
        if out and (len(idx) < min_points or len(out[-1]) < min_points):
            out[-1] = np.sort(np.concatenate([out[-1], idx]))
        else:
            out.append(idx)
    if out and len(out[0]) < min_points and len(out) > 1:
        out[0] = np.sort(np.concatenate([out[0], out[1]]))
        del out[1]
    return out


def _split_budget(idx: np.ndarray, X: np.ndarray, budget: int) -> list[np.ndarray]:
    """Halve oversized fragments at the spatial median of the widest axis."""
    if len(idx) <= budget:
        return [idx]
    P = X[idx]
    axis = int(np.argmax(P.max(axis=0) - P.min(axis=0)))
    order = np.argsort(P[:, axis], kind="stable")
    half = len(idx) // 2
    lo, hi = idx[order[:half]], idx[order[half:]]
    return _split_budget(np.sort(lo), X, budget) + _split_budget(np.sort(hi), X, budget)


def precise_test(model, pc: PointCloud, voxel_size: float,
                 tta: TtaConfig | None = None, seed=0,
                 num_classes: int | None = None, excluded=(),
                 class_names=None, budget: int = FRAGMENT_BUDGET,
                 return_votes: bool = False):
    """Fragment-vote prediction over all TTA instances.

    Returns (per-point labels, MetricsReport or None), plus the VoteBuffer
    when ``return_votes`` is set. Every point is predicted exactly once per
    TTA instance; the cloud's own labels, when present, are scored against
    the voted prediction with the precise flag set.
    """
    if len(pc) == 0:
        raise ValueError("cannot test an empty cloud")
    if tta is None:
        tta = TtaConfig()
    C = _num_classes_of(model, num_classes)
    min_points = _min_fragment_points(model)
    if len(pc) < min_points:
        raise ValueError("cloud smaller than the model neighborhood size")
    rng = as_rng(seed)
    feats = point_features(pc)
    votes = VoteBuffer.empty(len(pc), C)
    for inst, _name in tta_instances(pc, tta):
        X = inst.positions
        frags = fragment_partition(X, voxel_size, rng)
        pieces = _merge_small([f.indices for f in frags], min_points)
        for piece in pieces:
            for chunk in _split_budget(piece, X, budget):
                logits = _predict(model, X[chunk], feats[chunk])
                votes.add(chunk, np.argmax(logits, axis=1))
    labels = votes.final_labels()
    report = None
    if pc.labels is not None:
        conf = ConfusionMatrix.empty(C, excluded=excluded, class_names=class_names)
        conf.add(labels, pc.labels)
        report = metrics(conf, precise=True)
    if return_votes:
        return labels, report, votes
    return labels, report


def fast_eval(model, pc: PointCloud, voxel_size: float, seed=0,
              num_classes: int | None = None, excluded=(), class_names=None):
    """Single voxel-subsample prediction broadcast back to every point.

    The cheap path used during training; no fragments, no augmentation.
    Returns (per-point labels, MetricsReport or None).
    """
    if len(pc) == 0:
        raise ValueError("cannot evaluate an empty cloud")
    C = _num_classes_of(model, num_classes)
    si = voxel_grid_sample(pc.positions, voxel_size, seed)
    feats = point_features(pc)
    logits = _predict(model, pc.positions[si.kept], feats[si.kept])
    labels = np.argmax(logits, axis=1).astype(np.int64)[si.inverse]
    report = None
    if pc.labels is not None:
        conf = ConfusionMatrix.empty(C, excluded=excluded, class_names=class_names)
        conf.add(labels, pc.labels)
        report = metrics(conf)
    return labels, report


def cross_domain_eval(model, model_space: LabelSpace, manifest,
                      target_space: LabelSpace, aliases=None,
                      voxel_size: float = 0.025, tta: TtaConfig | None = None,
                      seed=0, loader=None, split=None) -> MetricsReport:
    """Score a foreign-space model on data labeled in another taxonomy.

    Ground-truth labels translate into the model's space; target indices
    that only absorb unmatched classes are excluded from the averages.
    """
    C = _num_classes_of(model, len(model_space.classes))
    if C != len(model_space.classes):
        raise ValueError("model class count does not match its label space")
    tmap: TranslationMap = build_translation(target_space, model_space, aliases)
    load = loader or _io.load_pointcloud
    conf = ConfusionMatrix.empty(C, excluded=tmap.excluded,
                                 class_names=model_space.classes)
    scenes = manifest.scenes(split) if hasattr(manifest, "scenes") else manifest
    n = 0
    for item in scenes:
        pc = load(item[1]) if isinstance(item, tuple) else item
        if pc.labels is None:
            raise ValueError(f"scene {pc.scene_id!r} carries no labels")
        truth = translate_labels(pc.labels, tmap)
        pred, _ = precise_test(model, pc.with_labels(None), voxel_size,
                               tta=tta, seed=seed, num_classes=C)
        conf.add(pred, truth)
        n += 1
    if n == 0:
        raise ValueError("no scenes to evaluate")
    return metrics(conf, precise=True)
