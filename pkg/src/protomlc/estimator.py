"""scikit-learn style wrapper around the multimodal encoder, prototypes and training schedule."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import encoders as enc
from . import evaluate as ev
from . import trainer as tr
from .datamodel import Dataset, DatasetManifest, MultiModalSample


def _check_samples(X) -> list[MultiModalSample]:
    if isinstance(X, Dataset):
        raise TypeError("pass a list of samples (e.g. dataset.split('train')), not a Dataset")
    samples = list(X)
    if not samples:
        raise ValueError("no samples given")
    for s in samples:
        if not isinstance(s, MultiModalSample):
            raise TypeError(f"expected MultiModalSample, got {type(s).__name__}")
        if s.tokens_v is None and s.tokens_t is None:
            raise ValueError(f"sample {s.id!r} has no modality")
    return samples


def _check_labels(y, n: int, k: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 1:
        if k is None:
            k = int(y.max()) + 1
        onehot = np.zeros((n, k), dtype=np.int64)
        onehot[np.arange(n), y.astype(np.int64)] = 1
        y = onehot
    if y.shape[0] != n:
        raise ValueError(f"y has {y.shape[0]} rows for {n} samples")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary indicators or integer class ids")
    return y.astype(np.int64)


class MultimodalPrototypeClassifier(ClassifierMixin, BaseEstimator):
    """Two-modality transformer encoder with prototype or classifier-head scoring.

    ``X`` is a list of :class:`MultiModalSample`; ``y`` is an N x K binary
    indicator matrix (or class ids for single-label data). If ``y`` is None the
    labels stored on the samples are used.

    Parameters
    ----------
    loss : {"mlc", "supcon", "bce", "focal", "asym"}
    prototype_init : {"orthogonal", "random"}
    fusion_layers : int
    stage1_epochs, stage2_epochs : int
        For non-prototype losses the budget is their sum.
    batch_size, lr, tau : training settings.
    task_mode : {"multilabel", "singlelabel"}
    threshold : float
        Decision threshold on multilabel confidences for ``predict``.
    encoder_options, train_options : dict, optional
        Any other EncoderConfig / TrainConfig fields.
    random_state : int
    """

    def __init__(self, loss="mlc", prototype_init="orthogonal", fusion_layers=2, stage1_epochs=2,
                 stage2_epochs=8, batch_size=64, lr=5e-4, tau=0.1, task_mode="multilabel", threshold=0.5,
                 encoder_options=None, train_options=None, random_state=0):
        self.loss = loss
        self.prototype_init = prototype_init
        self.fusion_layers = fusion_layers
        self.stage1_epochs = stage1_epochs
        self.stage2_epochs = stage2_epochs
        self.batch_size = batch_size
        self.lr = lr
        self.tau = tau
        self.task_mode = task_mode
        self.threshold = threshold
        self.encoder_options = encoder_options
        self.train_options = train_options
        self.random_state = random_state

    def _configs(self) -> tuple[tr.TrainConfig, enc.EncoderConfig]:
        topts = dict(self.train_options or {})
        mlc = dict(topts.pop("mlc", {}) or {})
        mlc["tau"] = self.tau
        tc = tr.TrainConfig(loss=self.loss, prototype_init=self.prototype_init, stage1_epochs=self.stage1_epochs,
                            stage2_epochs=self.stage2_epochs, batch_size=self.batch_size, lr=self.lr,
                            seed=self.random_state, mlc=mlc, **topts)
        ec = enc.EncoderConfig(layers_f=self.fusion_layers, seed=self.random_state, **(self.encoder_options or {}))
        return tc, ec

    def fit(self, X, y=None):
        samples = _check_samples(X)
        if y is None:
            labels = np.stack([s.labels for s in samples]).astype(np.int64)
        else:
            labels = _check_labels(y, len(samples))
            samples = [MultiModalSample(s.id, s.tokens_v, s.tokens_t, row) for s, row in zip(samples, labels)]
        k = labels.shape[1]
        first_v = next((s.tokens_v for s in samples if s.tokens_v is not None), None)
        first_t = next((s.tokens_t for s in samples if s.tokens_t is not None), None)
        if first_v is None or first_t is None:
            raise ValueError("training needs both modalities")
        self.classes_ = np.arange(k)
        self.n_classes_ = k
        manifest = DatasetManifest(
            class_names=[f"class_{i}" for i in range(k)], d_v=first_v.shape[1], d_t=first_t.shape[1],
            split_counts={"train": len(samples), "val": 0, "test": 0}, task_mode=self.task_mode)
        dataset = Dataset(manifest, {"train": samples, "val": [], "test": []})
        tc, ec = self._configs()
        self.checkpoint_ = tr.train(dataset, tc, ec)
        return self

    def transform(self, X, source: str = "z_f") -> np.ndarray:
        """Embeddings of the samples (``z_f`` by default)."""
        check_is_fitted(self, "checkpoint_")
        samples = _check_samples(X)
        reps = enc.encode_samples(samples, self.checkpoint_.eval_params(), self.checkpoint_.encoder_config)
        return reps[source]

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return ev.score_samples(self.checkpoint_, _check_samples(X), self.task_mode)

    decision_function = predict_proba

    def predict(self, X) -> np.ndarray:
        """Binary indicator matrix (multilabel) or class ids (singlelabel)."""
        scores = self.predict_proba(X)
        if self.task_mode == "singlelabel":
            return np.argmax(scores, axis=1)
        return ev.predict_labels(scores, "multilabel", self.threshold)

    def score(self, X, y=None, sample_weight=None) -> float:
        """LRAP for multilabel data, top-1 accuracy for single-label data."""
        samples = _check_samples(X)
        labels = np.stack([s.labels for s in samples]) if y is None else _check_labels(y, len(samples),
                                                                                       self.n_classes_)
        scores = self.predict_proba(samples)
        if self.task_mode == "singlelabel":
            return ev.top1_accuracy(scores, labels)
        return ev.lrap(scores, labels)

    def report(self, X: Sequence[MultiModalSample], class_names=None) -> ev.EvalReport:
        samples = _check_samples(X)
        names = class_names or [f"class_{i}" for i in range(self.n_classes_)]
        return ev.metric_report(self.predict_proba(samples), np.stack([s.labels for s in samples]), names,
                                self.task_mode)
