"""scikit-learn compatible wrappers around projection, the network and retrieval.

These compose with ``sklearn.pipeline.Pipeline`` and support
``get_params``/``set_params``/``clone`` like any other estimator.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import Trajectory, build_ground_truth
from .evaluation import EvalProtocol, evaluate_model
from .model import ModelConfig, describe_images, init_model
from .projection import ProjectionConfig, project_many
from .retrieval import build_map, query
from .training import PreparedSequence, TrainConfig, train
from .validation import check_clouds, check_descriptors, check_positions


class RangeProjector(TransformerMixin, BaseEstimator):
    """Point clouds to ``[n, 5, height, width]`` range images. Stateless."""

    def __init__(self, width=900, height=64, fov_up=3.0, fov_down=25.0):
        self.width = width
        self.height = height
        self.fov_up = fov_up
        self.fov_down = fov_down

    def _config(self):
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up, self.fov_down)

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        return self

    def transform(self, X):
        return project_many(check_clouds(X), self._config())


class PlaceDescriptorNet(TransformerMixin, BaseEstimator):
    """Trainable place-descriptor network.

    ``fit(X, y, groups)`` takes point clouds ``X``, their positions ``y``
    and an optional sequence label per frame; ``transform`` returns one
    descriptor row per cloud.
    """

    def __init__(
        self,
        encoder_depth=3,
        attention_depth=1,
        preset="full",
        width=1024,
        height=64,
        fov_up=3.0,
        fov_down=25.0,
        descriptor_dim=1024,
        learning_rate=1e-3,
        margin=0.85,
        epochs=20,
        pairs_per_epoch=32,
        r_th=6.0,
        min_frame_gap=100,
        random_state=0,
    ):
        self.encoder_depth = encoder_depth
        self.attention_depth = attention_depth
        self.preset = preset
        self.width = width
        self.height = height
        self.fov_up = fov_up
        self.fov_down = fov_down
        self.descriptor_dim = descriptor_dim
        self.learning_rate = learning_rate
        self.margin = margin
        self.epochs = epochs
        self.pairs_per_epoch = pairs_per_epoch
        self.r_th = r_th
        self.min_frame_gap = min_frame_gap
        self.random_state = random_state

    def _model_config(self):
        return ModelConfig(
            encoder_depth=self.encoder_depth,
            attention_depth=self.attention_depth,
            preset=self.preset,
            input_height=self.height,
            input_width=self.width,
            descriptor_dim=self.descriptor_dim,
        )

    def _projection(self):
        return ProjectionConfig.from_degrees(self.width, self.height, self.fov_up, self.fov_down)

    def _prepare(self, X, y, groups):
        clouds = check_clouds(X)
        positions = check_positions(y, len(clouds))
        groups = np.zeros(len(clouds), dtype=int) if groups is None else np.asarray(groups)
        images = project_many(clouds, self._projection())
        out = []
        for label in dict.fromkeys(groups.tolist()):
            idx = np.flatnonzero(groups == label)
            traj = Trajectory(positions[idx])
            gt = build_ground_truth(traj, self.r_th, self.min_frame_gap)
            out.append(PreparedSequence(str(label), images[idx], traj, gt))
        return out

    def fit(self, X, y, groups=None):
        prepared = self._prepare(X, y, groups)
        state = init_model(self._model_config(), self.random_state)
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            margin=self.margin,
            epochs=self.epochs,
            pairs_per_epoch=self.pairs_per_epoch,
            seed=self.random_state,
        )
        self.state_, self.train_report_ = train(state, prepared, cfg)
        self.n_features_out_ = self.descriptor_dim
        return self

    def transform(self, X):
        check_is_fitted(self, "state_")
        images = project_many(check_clouds(X), self._projection())
        return describe_images(images, self.state_)

    def score(self, X, y, groups=None):
        """Mean top-1 F1 over the sequences in ``X`` (one per group label)."""
        check_is_fitted(self, "state_")
        protocol = EvalProtocol(r_th=self.r_th, min_frame_gap=self.min_frame_gap)
        scores = [
            evaluate_model(self.state_, p, protocol)[0].f1
            for p in self._prepare(X, y, groups)
            if not p.ground_truth.is_empty
        ]
        return float(np.mean(scores)) if scores else 0.0

    @classmethod
    def from_sequences(cls, sequences, **params):
        """Fit on :class:`~attnet.data.Sequence` objects, one group each."""
        X, y, groups = [], [], []
        for seq in sequences:
            X += seq.clouds
            y.append(seq.trajectory.positions)
            groups += [seq.name] * len(seq.clouds)
        return cls(**params).fit(X, np.concatenate(y), groups)


class LoopClosureDetector(BaseEstimator):
    """Exact cosine kNN over a descriptor map.

    ``predict`` returns the matched frame id per query, or ``-1`` when the
    best similarity falls below ``threshold``.  Candidates are limited to
    frames at least ``min_frame_gap`` before the query's own frame id.
    """

    def __init__(self, n_neighbors=1, threshold=0.5, min_frame_gap=100):
        self.n_neighbors = n_neighbors
        self.threshold = threshold
        self.min_frame_gap = min_frame_gap

    def fit(self, X, frame_ids=None):
        X = check_descriptors(X)
        if frame_ids is None:
            frame_ids = np.arange(len(X))
        self.map_ = build_map(list(X), frame_ids=list(frame_ids), dim=X.shape[1])
        return self

    def kneighbors(self, X, frame_ids=None, n_neighbors=None):
        check_is_fitted(self, "map_")
        X = check_descriptors(X, self.map_.dim)
        n = n_neighbors or self.n_neighbors
        results = []
        for i, row in enumerate(X):
            limit = None if frame_ids is None else int(frame_ids[i]) - self.min_frame_gap
            results.append(query(self.map_, row, n, max_frame_id=limit))
        return results

    def predict(self, X, frame_ids=None):
        out = []
        for res in self.kneighbors(X, frame_ids, n_neighbors=1):
            best = res.best
            out.append(best[0] if best is not None and best[1] >= self.threshold else -1)
        return np.asarray(out, dtype=np.int64)

