"""Prototype inference, ranking / precision-recall metrics, and the missing-modality sweep."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .datamodel import MultiModalSample, drop_modality_tokens, label_matrix
from .losses import LossContractError
from .seeding import child_seed

SCORE_RULES = ("cosine", "softmax")


class MetricUndefinedError(ValueError):
    pass


# -- inference ------------------------------------------------------------------


def infer(z, prototypes, mode: str = "multilabel", tau: float = 0.1, score: str = "cosine") -> np.ndarray:
    """Per-class scores for a batch of representations (N x d) against K prototypes.

    multilabel + ``cosine``: independent confidences ``(cos + 1) / 2``.
    multilabel + ``softmax`` or singlelabel: ``softmax(cos / tau)`` across classes.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    cp = prototypes.matrix if hasattr(prototypes, "matrix") else np.asarray(prototypes, dtype=np.float64)
    if mode not in ("multilabel", "singlelabel"):
        raise ValueError(f"unknown mode {mode!r}")
    if score not in SCORE_RULES:
        raise ValueError(f"score must be one of {SCORE_RULES}")
    if np.any(~np.isfinite(z)):
        raise dc.DegenerateInputError("infer: non-finite representation")
    try:
        sims = dc.cosine_matrix(z, cp).data
    except dc.DegenerateInputError as exc:
        raise dc.DegenerateInputError(f"infer: zero-norm representation ({exc})") from exc
    if mode == "multilabel" and score == "cosine":
        return np.clip((sims + 1.0) / 2.0, 0.0, 1.0)
    return dc.softmax(dc.Tensor(sims / tau), axis=1).data


def predict_labels(scores: np.ndarray, mode: str = "multilabel", threshold: float = 0.5) -> np.ndarray:
    if mode == "singlelabel":
        out = np.zeros(scores.shape, dtype=np.int64)
        out[np.arange(scores.shape[0]), np.argmax(scores, axis=1)] = 1
        return out
    return (scores >= threshold).astype(np.int64)


# -- metrics ----------------------------------------------------------------------


def _check(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    y = np.atleast_2d(np.asarray(labels))
    if s.shape != y.shape:
        raise dc.ShapeError(f"scores {s.shape} and labels {y.shape} differ")
    return s, y.astype(bool)


def ranks(scores: np.ndarray) -> np.ndarray:
    """1-based rank of every class per row; higher score first, ties to the lower class index."""
    s = np.atleast_2d(scores)
    order = np.lexsort((np.broadcast_to(np.arange(s.shape[1]), s.shape), -s), axis=1)
    r = np.empty_like(order)
    np.put_along_axis(r, order, np.arange(1, s.shape[1] + 1)[None, :].repeat(s.shape[0], 0), axis=1)
    return r


def lrap(scores, labels, return_excluded: bool = False):
    """Label ranking average precision with a strict total order on classes.

    Rows without a positive label are skipped; pass ``return_excluded`` to get their count.
    """
    s, y = _check(scores, labels)
    r = ranks(s)
    keep = y.any(axis=1)
    total = 0.0
    for ri, yi in zip(r[keep], y[keep]):
        pos_ranks = np.sort(ri[yi])
        # the i-th smallest positive rank has i positives at or above it
        total += float(np.mean(np.arange(1, pos_ranks.size + 1) / pos_ranks))
    n = int(keep.sum())
    value = total / n if n else float("nan")
    if return_excluded:
        return value, int((~keep).sum())
    return value


@dataclass
class PRCurve:
    """Operating points in decreasing threshold order, starting at (precision 1, recall 0)."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray


def pr_curve(scores, labels) -> PRCurve:
    """Precision/recall at every unique threshold of a flat score vector (ties grouped)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1] if s.size else np.array([], dtype=int)
    tp = np.cumsum(y)[last].astype(np.float64)
    depth = (last + 1).astype(np.float64)
    n_pos = float(y.sum())
    recall = tp / n_pos if n_pos else np.zeros_like(tp)
    return PRCurve(np.r_[np.inf, s[last]], np.r_[1.0, tp / depth], np.r_[0.0, recall])


def average_precision(scores, labels) -> float:
    """Step-wise area: sum over thresholds of (recall increase) x precision."""
    y = np.asarray(labels).astype(bool).ravel()
    if not y.any():
        raise MetricUndefinedError("average precision is undefined without positives")
    c = pr_curve(scores, labels)
    return float(np.sum(np.diff(c.recall) * c.precision[1:]))


def aupr(scores, labels, averaging: str = "micro", return_excluded: bool = False):
    """Micro pools every (sample, class) pair; macro averages over classes that have positives."""
    s, y = _check(scores, labels)
    if not y.any():
        raise MetricUndefinedError("AUPR is undefined: no positive labels")
    if averaging == "micro":
        value, excluded = average_precision(s, y), []
    elif averaging == "macro":
        excluded = [k for k in range(y.shape[1]) if not y[:, k].any()]
        value = float(np.mean([average_precision(s[:, k], y[:, k])
                               for k in range(y.shape[1]) if k not in excluded]))
    else:
        raise ValueError("averaging must be micro or macro")
    return (value, excluded) if return_excluded else value


def per_class_aupr(scores, labels) -> list[float | None]:
    s, y = _check(scores, labels)
    return [average_precision(s[:, k], y[:, k]) if y[:, k].any() else None for k in range(y.shape[1])]


def recall_at_precision(scores, labels, precision_floor: float = 0.8) -> tuple[float, float | None]:
    """Largest micro recall over thresholds whose precision is at least the floor.

    Returns ``(recall, threshold)`` with the smallest qualifying threshold, or
    ``(0.0, None)`` when no threshold qualifies.
    """
    s, y = _check(scores, labels)
    if not y.any():
        raise MetricUndefinedError("recall at precision is undefined: no positive labels")
    c = pr_curve(s, y)
    ok = np.flatnonzero(c.precision[1:] >= precision_floor)
    if ok.size == 0:
        return 0.0, None
    i = ok[-1] + 1
    return float(c.recall[i]), float(c.thresholds[i])


def top1_accuracy(scores, labels) -> float:
    s, y = _check(scores, labels)
    if np.any(y.sum(axis=1) != 1):
        raise LossContractError("top1_accuracy needs exactly one positive label per row")
    return float(np.mean(np.argmax(s, axis=1) == np.argmax(y, axis=1)))


# -- reports -------------------------------------------------------------------------


@dataclass
class EvalReport:
    n_samples: int
    lrap: float
    micro_aupr: float
    macro_aupr: float
    per_class_aupr: list
    recall_at_precision: dict
    top1: float | None
    class_names: list
    rows_without_positives: int = 0
    classes_without_positives: list = field(default_factory=list)
    pr_curves: dict = field(default_factory=dict)
    robustness: list = field(default_factory=list)

    def to_json(self) -> dict:
        d = asdict(self)
        d["pr_curves"] = {name: {"thresholds": [None if math.isinf(t) else t for t in c["thresholds"]],
                                 "precision": c["precision"], "recall": c["recall"]}
                          for name, c in self.pr_curves.items()}
        return d

    def summary(self) -> dict:
        out = {"lrap": self.lrap, "micro_aupr": self.micro_aupr, "macro_aupr": self.macro_aupr}
        for key, v in self.recall_at_precision.items():
            out[f"r@{key}"] = v["recall"]
        if self.top1 is not None:
            out["top1"] = self.top1
        return out


def metric_report(scores, labels, class_names: Sequence[str], mode: str = "multilabel",
                  precision_floors: Sequence[float] = (0.8,)) -> EvalReport:
    s, y = _check(scores, labels)
    value, n_excl = lrap(s, y, return_excluded=True)
    macro, excl = aupr(s, y, "macro", return_excluded=True)
    rap = {}
    for p in precision_floors:
        r, t = recall_at_precision(s, y, p)
        rap[f"{p:g}"] = {"recall": r, "threshold": t}
    curves = {}
    for k, name in enumerate(class_names):
        c = pr_curve(s[:, k], y[:, k])
        curves[name] = {"thresholds": c.thresholds.tolist(), "precision": c.precision.tolist(),
                        "recall": c.recall.tolist()}
    return EvalReport(
        n_samples=int(s.shape[0]),
        lrap=value,
        micro_aupr=aupr(s, y, "micro"),
        macro_aupr=macro,
        per_class_aupr=per_class_aupr(s, y),
        recall_at_precision=rap,
        top1=top1_accuracy(s, y) if mode == "singlelabel" else None,
        class_names=list(class_names),
        rows_without_positives=n_excl,
        classes_without_positives=[class_names[k] for k in excl],
        pr_curves=curves,
    )


@dataclass
class EvalOptions:
    split: str = "test"
    source: str = "z_f"
    score: str = "cosine"
    tau: float | None = None
    threshold: float = 0.5
    precision_floors: list = field(default_factory=lambda: [0.8])
    drop_seed: int = 0
    batch_size: int = 256

    def validate(self) -> None:
        if self.source not in ("z_f", "z_v", "z_t"):
            raise ValueError("source must be z_f, z_v or z_t")
        if self.score not in SCORE_RULES:
            raise ValueError(f"score must be one of {SCORE_RULES}")
        if any(not 0 < p <= 1 for p in self.precision_floors):
            raise ValueError("precision floors must lie in (0, 1]")


def score_samples(ckpt, samples: Sequence[MultiModalSample], mode: str = "multilabel",
                  opts: EvalOptions | None = None) -> np.ndarray:
    """Scores for every sample from a trained checkpoint (EMA shadow by default)."""
    opts = opts or EvalOptions()
    reps = enc.encode_samples(samples, ckpt.eval_params(), ckpt.encoder_config, opts.batch_size)
    z = reps[opts.source]
    if ckpt.train_config.loss in ("bce", "focal", "asym"):
        p = enc.as_leaves(ckpt.eval_params(), trainable=())
        logits = enc.classifier_logits(dc.Tensor(reps["z_f"]), p).data
        if mode == "singlelabel":
            return dc.softmax(dc.Tensor(logits), axis=1).data
        return dc.sigmoid(dc.Tensor(logits)).data
    tau = ckpt.train_config.mlc.tau if opts.tau is None else opts.tau
    return infer(z, ckpt.prototypes, mode, tau, opts.score)


def evaluate(ckpt, samples: Sequence[MultiModalSample], class_names: Sequence[str],
             mode: str = "multilabel", opts: EvalOptions | None = None) -> EvalReport:
    opts = opts or EvalOptions()
    scores = score_samples(ckpt, samples, mode, opts)
    return metric_report(scores, label_matrix(samples), class_names, mode, opts.precision_floors)


def robustness_eval(ckpt, samples: Sequence[MultiModalSample], class_names: Sequence[str], modality: str,
                    fractions: Sequence[float], mode: str = "multilabel",
                    opts: EvalOptions | None = None) -> list[dict]:
    """Metric summary after dropping a fraction of one modality's tokens from every sample."""
    opts = opts or EvalOptions()
    rows = []
    for frac in fractions:
        dropped = [drop_modality_tokens(s, modality, frac, child_seed(opts.drop_seed, "drop", modality, s.id))
                   for s in samples]
        rep = evaluate(ckpt, dropped, class_names, mode, opts)
        rows.append({"modality": modality, "fraction": float(frac), **rep.summary()})
    return rows


# -- writers -----------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "inf" if math.isinf(v) else repr(v)
    return str(v)


def metrics_json(report: EvalReport) -> str:
    return json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n"


def pr_curves_csv(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["class", "threshold", "precision", "recall"])
    for name in report.class_names:
        c = report.pr_curves[name]
        for t, p, r in zip(c["thresholds"], c["precision"], c["recall"]):
            w.writerow([name, _fmt(float(t)), _fmt(float(p)), _fmt(float(r))])
    return buf.getvalue()


def robustness_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if not rows:
        w.writerow(["modality", "fraction"])
        return buf.getvalue()
    cols = list(rows[0])
    w.writerow(cols)
    for row in rows:
        w.writerow([_fmt(row.get(c)) for c in cols])
    return buf.getvalue()
