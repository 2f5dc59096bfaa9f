"""scikit-learn style wrapper: ``fit`` on volumes and masks, ``predict`` masks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .augment import AugmentSpec, Case
from .metrics import dice
from .model import SwtrConfig, predict_slices
from .training import FoldPlan, TrainConfig, train
from .validation import check_masks, check_volumes
from .volume import VoxelMask
from .weights import load_weights, save_weights


class SwtrSegmenter(BaseEstimator):
    """Slice-wise hybrid Unet segmenter for 3D volumes.

    ``X`` is a list of :class:`VolumeImage` (or 3D arrays) already preprocessed
    to ``input_size`` in-plane; ``y`` the matching :class:`VoxelMask` list.
    All volumes are used for training; the cross-validation harness lives in
    :mod:`swtrunet.training`.
    """

    def __init__(self, input_size=(224, 224), d_model=96, num_transformer_layers=12, heads=3,
                 window_size=7, num_skip_connections=3, encoder_channels=(16, 32, 48, 64),
                 decoder_channels=(64, 32, 16, 8), loss="dice+ce", optimizer="sgd", lr=1e-4,
                 epochs=70, batch_size=32, copies=20, include_original=False, augment=True,
                 seed=0, verbose=False):
        self.input_size = input_size
        self.d_model = d_model
        self.num_transformer_layers = num_transformer_layers
        self.heads = heads
        self.window_size = window_size
        self.num_skip_connections = num_skip_connections
        self.encoder_channels = encoder_channels
        self.decoder_channels = decoder_channels
        self.loss = loss
        self.optimizer = optimizer
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.copies = copies
        self.include_original = include_original
        self.augment = augment
        self.seed = seed
        self.verbose = verbose

    def _model_config(self) -> SwtrConfig:
        return SwtrConfig(input_size=self.input_size, d_model=self.d_model,
                          num_transformer_layers=self.num_transformer_layers, heads=self.heads,
                          window_size=self.window_size, num_skip_connections=self.num_skip_connections,
                          encoder_channels=self.encoder_channels, decoder_channels=self.decoder_channels,
                          seed=self.seed)

    def _augment_spec(self) -> AugmentSpec:
        if not self.augment:
            return AugmentSpec.identity(copies=1, seed=self.seed)
        return AugmentSpec(copies=self.copies, include_original=self.include_original, seed=self.seed)

    def fit(self, X, y):
        vols = check_volumes(X)
        masks = check_masks(y, vols)
        cases = [Case(f"v{i:04d}", v, m) for i, (v, m) in enumerate(zip(vols, masks))]
        tcfg = TrainConfig(loss=self.loss, optimizer=self.optimizer, lr=self.lr, epochs=self.epochs,
                           batch_size=self.batch_size, seed=self.seed)
        plan = FoldPlan([([c.patient_id for c in cases], [])])
        log_fn = print if self.verbose else None
        result = train(self._model_config(), plan, cases, tcfg, self._augment_spec(),
                       log_fn=log_fn, val_every=0, keep_model=True)
        self.model_ = result.folds[0].model
        self.epoch_log_ = result.folds[0].epoch_log
        self.n_features_in_ = 1
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("SwtrSegmenter is not fitted yet; call fit first")

    def predict_proba(self, X) -> list[np.ndarray]:
        """Per-voxel class probabilities, ``[x, y, z, C]`` per volume."""
        self._check_fitted()
        out = []
        for v in check_volumes(X):
            probs = predict_slices(self.model_, np.moveaxis(v.data, 2, 0))  # [z, C, x, y]
            out.append(np.transpose(probs, (2, 3, 0, 1)))
        return out

    def predict(self, X) -> list[VoxelMask]:
        vols = check_volumes(X)
        return [VoxelMask(np.argmax(p, axis=-1).astype(np.uint8), v.spacing)
                for v, p in zip(vols, self.predict_proba(vols))]

    def score(self, X, y) -> float:
        """Mean of liver and lesion Dice over the given volumes."""
        vols = check_volumes(X)
        masks = check_masks(y, vols)
        scores = [(dice(p.liver, m.liver) + dice(p.lesion, m.lesion)) / 2.0
                  for p, m in zip(self.predict(vols), masks)]
        return float(np.mean(scores))

    def save(self, path) -> None:
        self._check_fitted()
        save_weights(self.model_, path, meta={"estimator_params": _jsonable(self.get_params())})

    @classmethod
    def load(cls, path) -> "SwtrSegmenter":
        from .weights import read_tensor_file

        model = load_weights(path)
        _, _, meta = read_tensor_file(path)
        params = {k: tuple(v) if isinstance(v, list) else v for k, v in meta.get("estimator_params", {}).items()}
        est = cls(**params)
        est.model_ = model
        est.n_features_in_ = 1
        return est


def _jsonable(params: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in params.items()}
