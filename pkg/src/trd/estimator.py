"""scikit-learn style front end: ``TRDDetector().fit(train).predict(test)``."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig, from_dict
from .model import load_checkpoint, save_checkpoint
from .scoring import calibrate, fuse, image_score, predict_branch_maps
from .trainer import evaluate, train
from .validation import check_multimodal


class TRDDetector(OutlierMixin, BaseEstimator):
    """Dual-branch reverse-distillation anomaly detector for paired 2D/3D images.

    Parameters mirror the dotted config keys (``cf_enabled`` is ``cf.enabled``
    and so on). ``X`` is a list of :class:`~trd.datasets.MultimodalSample` or
    a pair of ``(N, 3, H, W)`` arrays in ``[0, 1]``.

    When ``fit`` gets no ``X_val``, the last ``validation_fraction`` of ``X``
    is held out for calibration.

    Attributes
    ----------
    model_ : TRDModel
    calibration_ : CalibrationStats
    train_log_ : TrainLog
    threshold_ : float
        Largest fused image score seen on the calibration samples; ``predict``
        flags samples scoring above it.
    """

    def __init__(self, profile="toy", weights_path=None, backbone_seed=0, cf_enabled=True,
                 bottleneck_size=None, ca_enabled=True, expansion=2, epochs=200, batch_size=16,
                 learning_rate=0.005, seed=0, block_output_to_decoder=True, deterministic=True,
                 sigma=4.0, fusion="norm_sum", pro_fpr_limit=0.3, validation_fraction=0.2):
        self.profile = profile
        self.weights_path = weights_path
        self.backbone_seed = backbone_seed
        self.cf_enabled = cf_enabled
        self.bottleneck_size = bottleneck_size
        self.ca_enabled = ca_enabled
        self.expansion = expansion
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.seed = seed
        self.block_output_to_decoder = block_output_to_decoder
        self.deterministic = deterministic
        self.sigma = sigma
        self.fusion = fusion
        self.pro_fpr_limit = pro_fpr_limit
        self.validation_fraction = validation_fraction

    def to_config(self) -> RunConfig:
        return from_dict(overrides={
            "backbone.profile": self.profile, "backbone.weights_path": self.weights_path,
            "backbone.seed": self.backbone_seed,
            "cf.enabled": self.cf_enabled, "cf.bottleneck_size": self.bottleneck_size,
            "ca.enabled": self.ca_enabled, "ca.expansion": self.expansion,
            "trainer.epochs": self.epochs, "trainer.batch_size": self.batch_size,
            "trainer.learning_rate": self.learning_rate, "trainer.seed": self.seed,
            "trainer.block_output_to_decoder": self.block_output_to_decoder,
            "trainer.deterministic": self.deterministic,
            "score.sigma": self.sigma, "score.fusion": self.fusion,
            "metrics.pro_fpr_limit": self.pro_fpr_limit,
        })

    def fit(self, X, y=None, X_val=None):
        cfg = self.to_config()
        samples = check_multimodal(X, cfg.resolution)
        if X_val is None:
            n_val = max(1, int(round(len(samples) * self.validation_fraction)))
            if n_val >= len(samples):
                raise ValueError("validation_fraction leaves no training samples")
            samples, val = samples[:-n_val], samples[-n_val:]
        else:
            val = check_multimodal(X_val, cfg.resolution, "X_val")
        result = train(cfg, samples, val)
        self._set_fitted(result.model, result.log)
        self.threshold_ = float(np.max(self._scores(val)))
        return self

    def _set_fitted(self, model, log=None):
        self.model_ = model
        self.calibration_ = model.calibration
        self.train_log_ = log
        self.config_ = model.config

    def calibrate(self, X_val):
        """Recompute calibration stats and threshold on normal samples."""
        check_is_fitted(self, "model_")
        val = check_multimodal(X_val, self.config_.resolution, "X_val")
        self.model_.calibration = calibrate(self.model_, val, self.config_.pixel_sigma)
        self.calibration_ = self.model_.calibration
        self.threshold_ = float(np.max(self._scores(val)))
        return self

    def branch_maps(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Smoothed per-branch anomaly maps, each ``(N, H, W)``."""
        check_is_fitted(self, "model_")
        samples = check_multimodal(X, self.config_.resolution)
        return predict_branch_maps(self.model_, samples, self.config_.pixel_sigma)

    def transform(self, X) -> np.ndarray:
        """Fused anomaly maps ``(N, H, W)``."""
        m2d, m3d = self.branch_maps(X)
        return fuse(m2d, m3d, self.calibration_, self.fusion)

    def _scores(self, X) -> np.ndarray:
        return np.atleast_1d(image_score(self.transform(X)))

    def score_samples(self, X) -> np.ndarray:
        """Image anomaly scores (max of the fused map); higher means more anomalous."""
        return self._scores(X)

    def decision_function(self, X) -> np.ndarray:
        return self._scores(X) - self.threshold_

    def predict(self, X) -> np.ndarray:
        """1 for anomalous, 0 for normal."""
        return (self.decision_function(X) > 0).astype(int)

    def evaluate(self, X_test):
        """Full metrics report on labelled test samples."""
        check_is_fitted(self, "model_")
        return evaluate(self.model_, check_multimodal(X_test, self.config_.resolution), self.config_,
                        self.fusion).report

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.model_, extra={"epoch": self.epochs, "threshold": self.threshold_})

    @classmethod
    def load(cls, path) -> TRDDetector:
        model, manifest = load_checkpoint(path)
        cfg = model.config
        est = cls(profile=cfg.backbone.profile, weights_path=cfg.backbone.weights_path,
                  backbone_seed=cfg.backbone.seed, cf_enabled=cfg.cf.enabled,
                  bottleneck_size=cfg.cf.bottleneck_size, ca_enabled=cfg.ca.enabled,
                  expansion=cfg.ca.expansion, epochs=cfg.trainer.epochs, batch_size=cfg.trainer.batch_size,
                  learning_rate=cfg.trainer.learning_rate, seed=cfg.trainer.seed,
                  block_output_to_decoder=cfg.trainer.block_output_to_decoder,
                  deterministic=cfg.trainer.deterministic, sigma=cfg.score.sigma,
                  fusion=cfg.score.fusion, pro_fpr_limit=cfg.metrics.pro_fpr_limit)
        est._set_fitted(model)
        est.threshold_ = float(manifest["extra"].get("threshold", np.inf))
        return est
