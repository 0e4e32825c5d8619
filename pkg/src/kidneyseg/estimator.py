"""Scikit-learn style facade over the whole pipeline.

`KidneySegmenter` bundles preprocessing, cascade training, tiled
inference, and morphological post-processing behind the familiar
fit/transform/predict surface. X is a sequence of intensity `Volume`s,
y a matching sequence of label `Volume`s. The estimator is driven
entirely by a `PipelineConfig`, so `get_params`/`set_params` round-trip
a single `config` parameter and `sklearn.base.clone` works as usual.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import PipelineConfig
from .errors import AlignmentError, ShapeError
from .inference import postprocess, predict_volume
from .metrics import dice
from .training import build_model, preprocess_case, preprocess_intensity, train
from .volume import Volume, check_same_geometry, resample


def check_volume(value, name="X"):
    """Validate one Volume argument; returns it unchanged."""
    if not isinstance(value, Volume):
        raise ShapeError(f"{name} must be a Volume, got {type(value).__name__}")
    return value


def check_volume_list(values, name="X"):
    values = list(values)
    if not values:
        raise ShapeError(f"{name} must contain at least one volume")
    for i, v in enumerate(values):
        check_volume(v, f"{name}[{i}]")
    return values


def check_volume_pairs(X, y):
    """Validate matching intensity/label volume sequences."""
    X = check_volume_list(X, "X")
    y = check_volume_list(y, "y")
    if len(X) != len(y):
        raise ShapeError(f"X has {len(X)} volumes but y has {len(y)}")
    for i, (ct, seg) in enumerate(zip(X, y)):
        try:
            check_same_geometry(ct, seg)
        except AlignmentError as exc:
            raise AlignmentError(f"pair {i}: {exc}") from None
    return X, y


class KidneySegmenter(BaseEstimator):
    """Volumetric CT segmenter with a scikit-learn interface.

    Parameters
    ----------
    config : PipelineConfig or None
        Full pipeline configuration; None means library defaults.
    """

    def __init__(self, config=None):
        self.config = config

    # -------------------------------------------------------------- helpers

    def _cfg(self) -> PipelineConfig:
        if self.config is None:
            return PipelineConfig()
        if not isinstance(self.config, PipelineConfig):
            raise ShapeError("config must be a PipelineConfig or None")
        return self.config

    def _fitted_cfg(self) -> PipelineConfig:
        if not hasattr(self, "model_"):
            raise NotFittedError(
                "this KidneySegmenter is not fitted yet; call fit first")
        return self.config_

    # ------------------------------------------------------------------ api

    def fit(self, X, y):
        """Train the model on intensity volumes X and label volumes y."""
        X, y = check_volume_pairs(X, y)
        cfg = self._cfg()
        cases = [
            preprocess_case(f"case{i:03d}", ct, seg, cfg)
            for i, (ct, seg) in enumerate(zip(X, y))
        ]
        model = build_model(cfg, np.random.default_rng(cfg.seed))
        result = train(cases, model, cfg)
        self.config_ = cfg
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.best_score_ = result.best_score
        self.classes_ = np.arange(3)
        return self

    def transform(self, X):
        """Preprocess intensity volumes onto the fine grid (clip + resample)."""
        cfg = self.config_ if hasattr(self, "config_") else self._cfg()
        return [preprocess_intensity(ct, cfg)[0] for ct in check_volume_list(X)]

    def predict_proba(self, X):
        """Per-class probability maps for each volume."""
        cfg = self._fitted_cfg()
        out = []
        for ct in check_volume_list(X):
            high, low = preprocess_intensity(ct, cfg)
            if not cfg.use_multires:
                low = None
            out.append(predict_volume(self.model_, high, low,
                                      input_scale=cfg.input_scale))
        return out

    def predict(self, X):
        """Post-processed label volumes on the fine grid."""
        cfg = self._fitted_cfg()
        return [
            postprocess(maps, ratio=cfg.ratio, threshold=cfg.post_threshold,
                        iterations=cfg.post_iterations).labels
            for maps in self.predict_proba(X)
        ]

    def score(self, X, y):
        """Mean Dice of the merged foreground against reference labels."""
        X, y = check_volume_pairs(X, y)
        cfg = self._fitted_cfg()
        high_sp = (cfg.spacing_high,) * 3
        scores = []
        for pred, ref in zip(self.predict(X), y):
            if ref.spacing != high_sp:
                ref = resample(ref, high_sp, "nearest")
            scores.append(dice(pred.data > 0, ref.data > 0))
        return float(np.mean(scores))
