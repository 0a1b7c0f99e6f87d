"""Scikit-learn style facade over the training and inference pipeline.

ShellSegmenter treats one scene as one sample: ``X`` is an (n, 6) array of
xyz coordinates and rgb colors (or a list of such arrays), ``y`` the
per-point class indices. fit trains the transformer end to end in memory,
predict runs fragment-voted inference, transform exposes per-point class
probabilities.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .augment import AugmentConfig, TtaConfig
from .cloud import DatasetManifest, PointCloud
from .evaluation import ConfusionMatrix, metrics, point_features, precise_test
from .labels import LabelSpace
from .losses import softmax
from .network import ModelConfig, build_model, forward
from .training import TrainConfig, train


def _as_scene_list(X):
    if isinstance(X, np.ndarray) and X.ndim == 2:
        X = [X]
    scenes = []
    for i, arr in enumerate(X):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 6:
            raise ValueError("each scene must be an (n, 6) array of xyz + rgb")
        if not np.isfinite(arr).all():
            raise ValueError("scene arrays must be finite")
        scenes.append(arr)
    return scenes


def _as_cloud(arr, labels=None, scene_id="scene"):
    colors = arr[:, 3:6]
    if np.all(colors == np.round(colors)) and colors.min() >= 0 and colors.max() <= 255:
        colors = colors.astype(np.uint8)
    return PointCloud(positions=arr[:, :3], colors=colors, labels=labels,
                      scene_id=scene_id)


class ShellSegmenter(BaseEstimator):
    """Point-cloud semantic segmentation with a desk-scale point transformer.

    Parameters mirror the underlying configs; everything is seeded, so
    fitting twice with equal inputs gives identical models.
    """

    def __init__(self, num_classes=11, stage_widths=(16, 32), k_neighbors=8,
                 pool_voxel_sizes=(0.05, 0.10), voxel_size=0.025,
                 crop_points=100_000, max_epochs=30, patience=10,
                 batch_size=2, max_lr=0.006, seed=0, augment=True, tta=False):
        self.num_classes = num_classes
        self.stage_widths = stage_widths
        self.k_neighbors = k_neighbors
        self.pool_voxel_sizes = pool_voxel_sizes
        self.voxel_size = voxel_size
        self.crop_points = crop_points
        self.max_epochs = max_epochs
        self.patience = patience
        self.batch_size = batch_size
        self.max_lr = max_lr
        self.seed = seed
        self.augment = augment
        self.tta = tta

    def _train_config(self):
        aug = AugmentConfig() if self.augment else AugmentConfig.off()
        return TrainConfig(max_epochs=self.max_epochs, patience=self.patience,
                           batch_size=self.batch_size, max_lr=self.max_lr,
                           seed=self.seed, voxel_size=self.voxel_size,
                           crop_points=self.crop_points, augment=aug)

    def fit(self, X, y, validation=None):
        """Train on scenes X with per-point labels y.

        ``validation`` may be a (X, y) pair; without it the training scenes
        double as the per-epoch validation set.
        """
        single = isinstance(X, np.ndarray) and np.asarray(X).ndim == 2
        scenes = _as_scene_list(X)
        ys = [np.asarray(y, dtype=np.int64)] if single \
            else [np.asarray(v, dtype=np.int64) for v in y]
        if len(ys) != len(scenes):
            raise ValueError("one label array per scene required")
        clouds = {}
        entries = []
        for i, (arr, yy) in enumerate(zip(scenes, ys)):
            if len(yy) != len(arr):
                raise ValueError(f"scene {i}: label count mismatch")
            sid = f"scene_{i}"
            clouds[sid] = _as_cloud(arr, labels=yy, scene_id=sid)
            entries.append((sid, sid, "train"))
        space = LabelSpace("fit_space", tuple(f"class_{c}" for c in
                                              range(self.num_classes)))
        manifest = DatasetManifest(tuple(entries), space.name, ".")
        if validation is not None:
            vx, vy = validation
            vsingle = isinstance(vx, np.ndarray) and np.asarray(vx).ndim == 2
            vs = _as_scene_list(vx)
            vys = [np.asarray(vy, dtype=np.int64)] if vsingle \
                else [np.asarray(v, dtype=np.int64) for v in vy]
            ventries = []
            for i, (arr, yy) in enumerate(zip(vs, vys)):
                sid = f"val_{i}"
                clouds[sid] = _as_cloud(arr, labels=yy, scene_id=sid)
                ventries.append((sid, sid, "val"))
            val_manifest = DatasetManifest(tuple(ventries), space.name, ".")
        else:
            val_manifest = DatasetManifest(tuple((s, p, "val") for s, p, _ in entries),
                                           space.name, ".")

        def loader(path):
            return clouds[str(path).split("/")[-1]]

        cfg = self._train_config()
        mcfg = ModelConfig(num_classes=self.num_classes,
                           stage_widths=tuple(self.stage_widths),
                           k_neighbors=self.k_neighbors,
                           pool_voxel_sizes=tuple(self.pool_voxel_sizes),
                           seed=self.seed)
        model, history = train(build_model(mcfg), manifest, val_manifest, space,
                               cfg, loader=loader)
        self.model_ = model
        self.history_ = history
        self.classes_ = np.arange(self.num_classes)
        return self

    def _tta_config(self):
        return TtaConfig() if self.tta else TtaConfig(yaw_angles=(0.0,), mirror_x=False)

    def predict(self, X):
        """Per-point class indices; a list input yields a list of arrays."""
        check_is_fitted(self, "model_")
        scenes = _as_scene_list(X)
        out = []
        for arr in scenes:
            labels, _ = precise_test(self.model_, _as_cloud(arr), self.voxel_size,
                                     tta=self._tta_config(), seed=self.seed)
            out.append(labels)
        return out[0] if isinstance(X, np.ndarray) and X.ndim == 2 else out

    def transform(self, X):
        """Per-point class probabilities from a single full-cloud forward."""
        check_is_fitted(self, "model_")
        scenes = _as_scene_list(X)
        out = []
        for arr in scenes:
            pc = _as_cloud(arr)
            logits = forward(self.model_, pc.positions, point_features(pc))
            out.append(softmax(logits))
        return out[0] if isinstance(X, np.ndarray) and X.ndim == 2 else out

    def score(self, X, y):
        """Overall point accuracy of the voted prediction."""
        preds = self.predict(X)
        if isinstance(preds, np.ndarray):
            preds, y = [preds], [y]
        conf = ConfusionMatrix.empty(self.num_classes)
        for p, t in zip(preds, y):
            conf.add(p, np.asarray(t, dtype=np.int64))
        return metrics(conf).allacc
