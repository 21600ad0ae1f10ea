"""Datasets of two-modality token sequences with multi-hot labels.

On-disk layout of a dataset directory::

    manifest.json            format version, classes, dims, split counts, file map
    labels_<split>.csv       id, comma-joined class names
    tokens_v_<split>.jsonl   {"id": ..., "tokens": [[...], ...]}  (null if absent)
    tokens_t_<split>.jsonl
    signatures.json          hidden generator state (synthetic data only)
"""

from __future__ import annotations

import csv
import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .seeding import child_rng

FORMAT_VERSION = 1
SPLITS = ("train", "val", "test")
MODALITIES = ("v", "t")
PACKED_MAGIC = b"MLPC"
PACKED_VERSION = 1


class DatasetError(ValueError):
    """A dataset file is missing, malformed, or inconsistent with its manifest."""


@dataclass
class ClassTaxonomy:
    class_names: list[str]
    superclass_of: dict[int, int] | None = None
    superclass_names: list[str] | None = None

    def __post_init__(self):
        if len(set(self.class_names)) != len(self.class_names):
            raise DatasetError("class names must be unique")
        if self.superclass_of is not None:
            self.superclass_of = {int(k): int(v) for k, v in self.superclass_of.items()}
            missing = set(range(self.num_classes)) - set(self.superclass_of)
            if missing:
                raise DatasetError(f"classes without a superclass: {sorted(missing)}")
            if self.superclass_names is None:
                n = max(self.superclass_of.values()) + 1
                self.superclass_names = [f"super_{i}" for i in range(n)]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def num_superclasses(self) -> int:
        return 0 if self.superclass_names is None else len(self.superclass_names)

    def superclass_labels(self, labels: np.ndarray) -> np.ndarray:
        """Map an N x K label matrix to N x K' (a superclass is on if any child is)."""
        if self.superclass_of is None:
            raise DatasetError("taxonomy has no superclass map")
        labels = np.atleast_2d(labels)
        out = np.zeros((labels.shape[0], self.num_superclasses), dtype=labels.dtype)
        for k, s in self.superclass_of.items():
            out[:, s] |= labels[:, k]
        return out


@dataclass
class MultiModalSample:
    """One sample. ``tokens_v`` / ``tokens_t`` are ``None`` when that modality is absent."""

    id: str
    tokens_v: np.ndarray | None
    tokens_t: np.ndarray | None
    labels: np.ndarray

    def tokens(self, modality: str) -> np.ndarray | None:
        return self.tokens_v if modality == "v" else self.tokens_t

    def replace_tokens(self, modality: str, tokens) -> "MultiModalSample":
        if modality == "v":
            return MultiModalSample(self.id, tokens, self.tokens_t, self.labels)
        return MultiModalSample(self.id, self.tokens_v, tokens, self.labels)


@dataclass
class DatasetManifest:
    class_names: list[str]
    d_v: int
    d_t: int
    split_counts: dict[str, int]
    task_mode: str = "multilabel"
    format_version: int = FORMAT_VERSION
    superclass_of: dict[int, int] | None = None
    superclass_names: list[str] | None = None

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def taxonomy(self) -> ClassTaxonomy:
        return ClassTaxonomy(list(self.class_names), self.superclass_of, self.superclass_names)

    def dim(self, modality: str) -> int:
        return self.d_v if modality == "v" else self.d_t

    def to_json(self) -> dict:
        doc = {
            "format_version": self.format_version,
            "task_mode": self.task_mode,
            "num_classes": self.num_classes,
            "class_names": list(self.class_names),
            "d_v": self.d_v,
            "d_t": self.d_t,
            "split_counts": dict(self.split_counts),
            "files": {
                split: {
                    "labels": f"labels_{split}.csv",
                    "tokens_v": f"tokens_v_{split}.jsonl",
                    "tokens_t": f"tokens_t_{split}.jsonl",
                }
                for split in self.split_counts
            },
        }
        if self.superclass_of is not None:
            doc["superclass_of"] = {str(k): v for k, v in sorted(self.superclass_of.items())}
            doc["superclass_names"] = list(self.superclass_names)
        return doc

    def signature(self) -> dict:
        """The fields a trained model depends on."""
        return {"class_names": list(self.class_names), "d_v": self.d_v, "d_t": self.d_t,
                "task_mode": self.task_mode}


@dataclass
class Dataset:
    manifest: DatasetManifest
    splits: dict[str, list[MultiModalSample]]

    def split(self, name: str) -> list[MultiModalSample]:
        return self.splits.get(name, [])

    @property
    def taxonomy(self) -> ClassTaxonomy:
        return self.manifest.taxonomy


def label_matrix(samples: Sequence[MultiModalSample], num_classes: int | None = None) -> np.ndarray:
    if not samples:
        return np.zeros((0, num_classes or 0), dtype=np.int64)
    return np.stack([s.labels for s in samples]).astype(np.int64)


# -- writing -----------------------------------------------------------------


def _atomic_write(path: Path, data: str | bytes) -> None:
    path = Path(path)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"encoding": "utf-8", "newline": ""})) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _tokens_record(sample_id: str, tokens: np.ndarray | None) -> str:
    payload = None if tokens is None else [[float(x) for x in row] for row in tokens]
    return json.dumps({"id": sample_id, "tokens": payload})


def save_dataset(dataset: Dataset, out_dir, extra_files: dict[str, str] | None = None) -> Path:
    """Write ``dataset`` under ``out_dir``; every file is written temp-then-rename,
    the manifest last."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = dataset.manifest
    man.split_counts = {name: len(dataset.split(name)) for name in man.split_counts}
    names = man.class_names
    for split in man.split_counts:
        samples = sorted(dataset.split(split), key=lambda s: s.id)
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "labels"])
        for s in samples:
            writer.writerow([s.id, ",".join(names[k] for k in np.flatnonzero(s.labels))])
        _atomic_write(out / f"labels_{split}.csv", buf.getvalue())
        for mod in MODALITIES:
            lines = "".join(_tokens_record(s.id, s.tokens(mod)) + "\n" for s in samples)
            _atomic_write(out / f"tokens_{mod}_{split}.jsonl", lines)
    for name, text in (extra_files or {}).items():
        _atomic_write(out / name, text)
    _atomic_write(out / "manifest.json", json.dumps(man.to_json(), indent=2, sort_keys=True) + "\n")
    return out


# -- reading -----------------------------------------------------------------


def _manifest_from_json(doc: dict) -> DatasetManifest:
    try:
        names = list(doc["class_names"])
        if doc.get("num_classes", len(names)) != len(names):
            raise DatasetError("manifest num_classes disagrees with class_names")
        sup = doc.get("superclass_of")
        return DatasetManifest(
            class_names=names,
            d_v=int(doc["d_v"]),
            d_t=int(doc["d_t"]),
            split_counts={k: int(v) for k, v in doc["split_counts"].items()},
            task_mode=doc.get("task_mode", "multilabel"),
            format_version=int(doc.get("format_version", FORMAT_VERSION)),
            superclass_of=None if sup is None else {int(k): int(v) for k, v in sup.items()},
            superclass_names=doc.get("superclass_names"),
        )
    except KeyError as exc:
        raise DatasetError(f"manifest is missing field {exc}") from exc


def _read_tokens(path: Path, dim: int) -> dict[str, np.ndarray | None]:
    if not path.exists():
        raise DatasetError(f"missing token file {path}")
    out: dict[str, np.ndarray | None] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                sid = rec["id"]
            except (json.JSONDecodeError, KeyError) as exc:
                raise DatasetError(f"{path.name}:{lineno}: malformed record") from exc
            if sid in out:
                raise DatasetError(f"{path.name}: duplicate id {sid!r}")
            toks = rec.get("tokens")
            if toks is None:
                out[sid] = None
                continue
            arr = np.asarray(toks, dtype=np.float64)
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DatasetError(f"{path.name}: sample {sid!r} has no tokens or a ragged token list")
            if arr.shape[1] != dim:
                raise DatasetError(
                    f"{path.name}: sample {sid!r} token width {arr.shape[1]} != manifest dim {dim}")
            out[sid] = arr
    return out


def _read_labels(path: Path, class_index: dict[str, int], task_mode: str) -> dict[str, np.ndarray]:
    if not path.exists():
        raise DatasetError(f"missing label file {path}")
    out: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "labels"]:
            raise DatasetError(f"{path.name}: expected header id,labels")
        for row in reader:
            if not row:
                continue
            sid, names = row[0], row[1] if len(row) > 1 else ""
            if sid in out:
                raise DatasetError(f"{path.name}: duplicate id {sid!r}")
            vec = np.zeros(len(class_index), dtype=np.int64)
            for name in filter(None, names.split(",")):
                if name not in class_index:
                    raise DatasetError(f"{path.name}: sample {sid!r} has unknown class {name!r}")
                vec[class_index[name]] = 1
            if task_mode == "singlelabel" and vec.sum() != 1:
                raise DatasetError(f"{path.name}: sample {sid!r} must have exactly one label")
            out[sid] = vec
    return out


def load_dataset(manifest_path) -> Dataset:
    """Load every split named in the manifest, validating dims, ids and classes."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.exists():
        raise DatasetError(f"missing manifest {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{path}: invalid JSON") from exc
    man = _manifest_from_json(doc)
    if man.format_version != FORMAT_VERSION:
        raise DatasetError(f"unsupported dataset format version {man.format_version}")
    root = path.parent
    class_index = {name: i for i, name in enumerate(man.class_names)}
    splits: dict[str, list[MultiModalSample]] = {}
    for split, expected in man.split_counts.items():
        files = doc.get("files", {}).get(split, {})
        labels = _read_labels(root / files.get("labels", f"labels_{split}.csv"), class_index, man.task_mode)
        tokens = {
            mod: _read_tokens(root / files.get(f"tokens_{mod}", f"tokens_{mod}_{split}.jsonl"), man.dim(mod))
            for mod in MODALITIES
        }
        for mod in MODALITIES:
            extra = set(tokens[mod]) ^ set(labels)
            if extra:
                raise DatasetError(f"split {split!r}: id {sorted(extra)[0]!r} not present in every file")
        samples = [MultiModalSample(sid, tokens["v"][sid], tokens["t"][sid], labels[sid])
                   for sid in sorted(labels)]
        if len(samples) != expected:
            raise DatasetError(f"split {split!r}: manifest says {expected} samples, found {len(samples)}")
        splits[split] = samples
    return Dataset(man, splits)


# -- packed binary tokens ----------------------------------------------------------


def write_packed_tokens(samples: Iterable[MultiModalSample], modality: str, path) -> dict[str, int]:
    """Write one modality as packed float32 records plus ``<path>.index.json``.

    Record layout (little-endian): ``b"MLPC"``, u32 version, u32 T, u32 d,
    then T*d float32 values. An absent modality is stored with T = 0.
    """
    path = Path(path)
    buf = io.BytesIO()
    index: dict[str, int] = {}
    for s in samples:
        toks = s.tokens(modality)
        arr = np.zeros((0, 0), dtype="<f4") if toks is None else np.asarray(toks, dtype="<f4")
        index[s.id] = buf.tell()
        buf.write(PACKED_MAGIC)
        buf.write(struct.pack("<III", PACKED_VERSION, arr.shape[0], arr.shape[1] if arr.ndim == 2 else 0))
        buf.write(arr.tobytes(order="C"))
    _atomic_write(path, buf.getvalue())
    _atomic_write(Path(str(path) + ".index.json"), json.dumps(index, sort_keys=True))
    return index


def read_packed_tokens(path) -> dict[str, np.ndarray | None]:
    path = Path(path)
    index = json.loads(Path(str(path) + ".index.json").read_text(encoding="utf-8"))
    blob = path.read_bytes()
    out: dict[str, np.ndarray | None] = {}
    for sid, offset in index.items():
        if blob[offset:offset + 4] != PACKED_MAGIC:
            raise DatasetError(f"{path.name}: bad magic for record {sid!r}")
        version, n_tok, dim = struct.unpack_from("<III", blob, offset + 4)
        if version != PACKED_VERSION:
            raise DatasetError(f"{path.name}: unsupported packed version {version}")
        start = offset + 16
        vals = np.frombuffer(blob, dtype="<f4", count=n_tok * dim, offset=start)
        out[sid] = None if n_tok == 0 else vals.reshape(n_tok, dim).astype(np.float64)
    return out


# -- robustness perturbation --------------------------------------------------------


def drop_modality_tokens(sample: MultiModalSample, modality: str, fraction: float, seed) -> MultiModalSample:
    """Remove ``ceil(fraction * T)`` uniformly chosen tokens of one modality.

    Remaining tokens keep their order. ``fraction == 1`` (or dropping every
    token) marks the modality absent.
    """
    if modality not in MODALITIES:
        raise ValueError(f"unknown modality {modality!r}")
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    toks = sample.tokens(modality)
    if toks is None:
        raise ValueError(f"sample {sample.id!r}: modality {modality!r} is already absent")
    if fraction == 0.0:
        return sample
    n_tok = toks.shape[0]
    n_drop = math.ceil(fraction * n_tok - 1e-9)
    if fraction >= 1.0 or n_drop >= n_tok:
        return sample.replace_tokens(modality, None)
    rng = np.random.default_rng(seed)
    drop = rng.choice(n_tok, size=n_drop, replace=False)
    keep = np.setdiff1d(np.arange(n_tok), drop)
    return sample.replace_tokens(modality, toks[keep])


# -- synthetic generator -----------------------------------------------------------


@dataclass
class SynthConfig:
    num_classes: int = 8
    d_v: int = 16
    d_t: int = 16
    tokens_v: int = 8
    tokens_t: int = 6
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 500
    max_labels_per_sample: int = 3
    co_occurrence_strength: float = 0.6
    cooccurrence_group_size: int = 3
    base_concentration: float = 20.0
    noise_sigma: float = 0.18
    mixture_concentration: float = 2.0
    fine_grained_pairs: list = field(default_factory=lambda: [[0, 1], [2, 3]])
    fine_grained_cosine: float = 0.8
    num_superclasses: int = 2
    task_mode: str = "multilabel"
    seed: int = 0

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if min(self.d_v, self.d_t) < self.num_classes:
            raise ValueError("cannot orthonormalize: d_v and d_t must be >= num_classes")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.tokens_v < 1 or self.tokens_t < 1:
            raise ValueError("token counts must be positive")
        if not 0.0 <= self.co_occurrence_strength <= 1.0:
            raise ValueError("co_occurrence_strength must lie in [0, 1]")
        if self.max_labels_per_sample < 1:
            raise ValueError("max_labels_per_sample must be >= 1")
        if self.task_mode not in ("multilabel", "singlelabel"):
            raise ValueError("task_mode must be multilabel or singlelabel")
        used = [k for pair in self.fine_grained_pairs for k in pair]
        if len(set(used)) != len(used) or any(not 0 <= k < self.num_classes for k in used):
            raise ValueError("fine_grained_pairs must be disjoint pairs of valid class indices")
        if not 1 <= self.num_superclasses <= self.num_classes:
            raise ValueError("num_superclasses must lie in [1, num_classes]")

    @property
    def effective_max_labels(self) -> int:
        return 1 if self.task_mode == "singlelabel" else self.max_labels_per_sample


@dataclass
class SyntheticTruth:
    """Generator state hidden from the learner: signatures and label process."""

    signatures_v: np.ndarray
    signatures_t: np.ndarray
    base_distribution: np.ndarray
    transition: np.ndarray

    def to_json(self) -> str:
        return json.dumps({
            "signatures_v": self.signatures_v.tolist(),
            "signatures_t": self.signatures_t.tolist(),
            "base_distribution": self.base_distribution.tolist(),
            "transition": self.transition.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTruth":
        doc = json.loads(text)
        return cls(*(np.asarray(doc[k], dtype=np.float64)
                     for k in ("signatures_v", "signatures_t", "base_distribution", "transition")))


def class_signatures(num_classes: int, dim: int, pairs, cosine: float, rng) -> np.ndarray:
    """Orthonormal rows, then the second class of each pair rotated toward the first."""
    if dim < num_classes:
        raise ValueError(f"cannot orthonormalize {num_classes} signatures in {dim} dimensions")
    q, r = np.linalg.qr(rng.standard_normal((dim, num_classes)))
    q = q * np.sign(np.diag(r))
    sig = q.T.copy()
    sine = math.sqrt(1.0 - cosine * cosine)
    for a, b in pairs:
        sig[b] = cosine * sig[a] + sine * sig[b]
    return sig


def label_process(cfg: SynthConfig, rng) -> tuple[np.ndarray, np.ndarray]:
    """Base class distribution and a cyclic transition matrix.

    Classes are split (by a seeded permutation) into co-occurrence groups of
    ``cooccurrence_group_size``; inside a group each class hands off to the next
    one in a cycle, so label sets are contiguous runs around their group's cycle.
    """
    k = cfg.num_classes
    base = rng.dirichlet(np.full(k, cfg.base_concentration))
    trans = np.zeros((k, k))
    order = rng.permutation(k)
    size = max(cfg.cooccurrence_group_size, 1)
    for start in range(0, k, size):
        group = order[start:start + size]
        if len(group) < 2:
            continue
        for a, b in zip(group, np.roll(group, -1)):
            trans[a, b] = 1.0
    return base, trans


def _sample_label_set(base, trans, strength: float, max_labels: int, rng) -> list[int]:
    chosen = [int(rng.choice(len(base), p=base))]
    while len(chosen) < max_labels and rng.random() < strength:
        w = trans[chosen[-1]].copy()
        w[chosen] = 0.0
        total = w.sum()
        if total <= 0:
            break
        chosen.append(int(rng.choice(len(w), p=w / total)))
    return chosen


def expected_cooccurrence(base, trans, strength: float, max_labels: int) -> np.ndarray:
    """E[y_i y_j] under the label process, by exact enumeration of label paths."""
    k = len(base)
    out = np.zeros((k, k))

    def walk(path: list[int], prob: float):
        stop = 1.0
        if len(path) < max_labels:
            w = trans[path[-1]].copy()
            w[path] = 0.0
            total = w.sum()
            if total > 0:
                for j in np.flatnonzero(w):
                    walk(path + [int(j)], prob * strength * w[j] / total)
                stop = 1.0 - strength
        idx = np.array(path)
        out[np.ix_(idx, idx)] += prob * stop

    for c in range(k):
        walk([c], base[c])
    return out


def _sample_tokens(label_idx: list[int], signatures: np.ndarray, n_tokens: int, cfg: SynthConfig, rng) -> np.ndarray:
    sig = signatures[label_idx]
    if len(label_idx) == 1:
        weights = np.ones((n_tokens, 1))
    else:
        weights = rng.dirichlet(np.full(len(label_idx), cfg.mixture_concentration), size=n_tokens)
    toks = weights @ sig
    if cfg.noise_sigma > 0:
        toks = toks + cfg.noise_sigma * rng.standard_normal(toks.shape)
    return toks


def synthesize(cfg: SynthConfig) -> tuple[Dataset, SyntheticTruth]:
    """Build an in-memory synthetic dataset, deterministic in ``cfg.seed``."""
    cfg.validate()
    k = cfg.num_classes
    sig_v = class_signatures(k, cfg.d_v, cfg.fine_grained_pairs, cfg.fine_grained_cosine,
                             child_rng(cfg.seed, "synth", "signatures_v"))
    sig_t = class_signatures(k, cfg.d_t, cfg.fine_grained_pairs, cfg.fine_grained_cosine,
                             child_rng(cfg.seed, "synth", "signatures_t"))
    base, trans = label_process(cfg, child_rng(cfg.seed, "synth", "labels"))
    names = [f"class_{i}" for i in range(k)]
    superclass_of = {i: i * cfg.num_superclasses // k for i in range(k)}

    counts = {"train": cfg.n_train, "val": cfg.n_val, "test": cfg.n_test}
    splits: dict[str, list[MultiModalSample]] = {}
    for split, n in counts.items():
        rng = child_rng(cfg.seed, "synth", "split", split)
        samples = []
        for i in range(n):
            labels = _sample_label_set(base, trans, cfg.co_occurrence_strength, cfg.effective_max_labels, rng)
            vec = np.zeros(k, dtype=np.int64)
            vec[labels] = 1
            tv = _sample_tokens(labels, sig_v, cfg.tokens_v, cfg, rng)
            tt = _sample_tokens(labels, sig_t, cfg.tokens_t, cfg, rng)
            samples.append(MultiModalSample(f"{split}_{i:06d}", tv, tt, vec))
        splits[split] = samples

    manifest = DatasetManifest(
        class_names=names, d_v=cfg.d_v, d_t=cfg.d_t, split_counts=counts, task_mode=cfg.task_mode,
        superclass_of=superclass_of, superclass_names=[f"super_{i}" for i in range(cfg.num_superclasses)],
    )
    return Dataset(manifest, splits), SyntheticTruth(sig_v, sig_t, base, trans)


def generate_synthetic(cfg: SynthConfig, out_dir) -> tuple[Dataset, SyntheticTruth]:
    """Synthesize a dataset and write it, with ``signatures.json`` and the config, to ``out_dir``."""
    dataset, truth = synthesize(cfg)
    extra = {
        "signatures.json": truth.to_json() + "\n",
        "synth_config.json": json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n",
    }
    save_dataset(dataset, out_dir, extra_files=extra)
    return dataset, truth


def load_truth(data_dir) -> SyntheticTruth:
    return SyntheticTruth.from_json((Path(data_dir) / "signatures.json").read_text(encoding="utf-8"))


def signature_oracle_scores(samples: Sequence[MultiModalSample], truth: SyntheticTruth) -> np.ndarray:
    """Least-squares weights of each sample's mean tokens on the hidden signatures.

    Both modalities are stacked, so the weights solve
    ``min_c |S_v^T c - mean_v|^2 + |S_t^T c - mean_t|^2``.
    """
    sv, st = truth.signatures_v, truth.signatures_t
    gram = sv @ sv.T + st @ st.T
    rhs = []
    for s in samples:
        r = np.zeros(gram.shape[0])
        if s.tokens_v is not None:
            r += sv @ s.tokens_v.mean(axis=0)
        if s.tokens_t is not None:
            r += st @ s.tokens_t.mean(axis=0)
        rhs.append(r)
    return np.linalg.solve(gram, np.array(rhs).T).T


def signature_oracle_accuracy(samples: Sequence[MultiModalSample], truth: SyntheticTruth,
                              max_labels: int) -> float:
    """Per-label accuracy of thresholding the oracle weights at ``1 / (2 * max_labels)``."""
    weights = signature_oracle_scores(samples, truth)
    pred = weights > 1.0 / (2 * max_labels)
    return float((pred == label_matrix(samples).astype(bool)).mean())


def cooccurrence_matrix(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.float64)
    return labels.T @ labels / max(labels.shape[0], 1)
