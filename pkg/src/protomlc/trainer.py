"""Two-stage training with prototype refinement, AdamW, parameter EMA and checkpoints.

Stage 1 trains the modality encoders against fixed prototypes shared by both
modalities. Stage 2 trains the whole network and, every
``prototype_refresh_interval`` steps, refits prototypes by least squares on a
buffer of recent embeddings and blends them in with an EMA. Baselines
(BCE / focal / asymmetric / SupCon) reuse the same loop on the full network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from . import encoders as enc
from .datamodel import ClassTaxonomy, Dataset, MultiModalSample, label_matrix
from .losses import (AsymConfig, FocalConfig, LossContractError, MlcLossConfig, classifier_loss,
                     mlc_loss_batch, supcon_loss)
from .prototypes import (PrototypeSet, ema_update, estimate_prototypes, init_prototypes,
                         superclass_prototypes)
from .seeding import child_rng

logger = logging.getLogger(__name__)

LOSSES = ("mlc", "supcon", "bce", "focal", "asym")
CLASSIFIER_LOSSES = ("bce", "focal", "asym")
REFIT_SOURCES = ("z_f", "z_v", "z_t", "concat")
CKPT_MAGIC = b"MLCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class TrainingError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-4
    head_lr_multiplier: float = 10.0
    weight_decay: float = 1e-6
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 64
    stage1_epochs: int = 2
    stage2_epochs: int = 8
    prototype_init: str = "orthogonal"
    prototype_refresh_interval: int = 50
    prototype_buffer_size: int = 4096
    prototype_beta: float = 0.999
    prototype_ridge: float = 1e-6
    param_ema_decay: float = 0.999
    param_ema_interval: int = 10
    param_ema_warmup: bool = True
    eval_with_ema: bool = True
    loss: str = "mlc"
    mlc: MlcLossConfig = field(default_factory=MlcLossConfig)
    focal: FocalConfig = field(default_factory=FocalConfig)
    asym: AsymConfig = field(default_factory=AsymConfig)
    stage2_weights: tuple = (1.0, 1.0, 1.0)
    hierarchy_weight: float = 0.0
    refit_source: str = "z_f"
    seed: int = 0

    def __post_init__(self):
        for name, cls in (("mlc", MlcLossConfig), ("focal", FocalConfig), ("asym", AsymConfig)):
            value = getattr(self, name)
            if isinstance(value, dict):
                setattr(self, name, cls(**value))
        self.adam_betas = tuple(self.adam_betas)
        self.stage2_weights = tuple(float(w) for w in self.stage2_weights)

    def validate(self) -> None:
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.prototype_refresh_interval < 1 or self.param_ema_interval < 1:
            raise ValueError("intervals must be >= 1")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if self.refit_source not in REFIT_SOURCES:
            raise ValueError(f"refit_source must be one of {REFIT_SOURCES}")
        if self.prototype_init not in ("random", "orthogonal"):
            raise ValueError("prototype_init must be random or orthogonal")
        if self.hierarchy_weight < 0:
            raise ValueError("hierarchy_weight must be >= 0")
        if not 0.0 <= self.param_ema_decay < 1.0:
            raise ValueError("param_ema_decay must lie in [0, 1)")
        if self.head_lr_multiplier <= 0:
            raise ValueError("head_lr_multiplier must be positive")
        if len(self.stage2_weights) != 3:
            raise ValueError("stage2_weights needs three entries (z_v, z_t, z_f)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["stage2_weights"] = list(self.stage2_weights)
        return d

    @property
    def backbone_lr(self) -> float:
        return self.lr / self.head_lr_multiplier


def config_hash(train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig) -> str:
    doc = {"train": train_cfg.to_dict(), "encoder": enc_cfg.to_dict()}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


# -- optimizer and EMA ---------------------------------------------------------


def adamw_update(params: dict, grads: dict, state: dict, lrs: dict, decay: dict, cfg: TrainConfig) -> None:
    """In-place AdamW step for every parameter with a gradient.

    Decoupled decay: ``p -= lr * m_hat / (sqrt(v_hat) + eps) + wd * p``; the
    decay term is not scaled by the learning rate.
    """
    b1, b2 = cfg.adam_betas
    for name, g in grads.items():
        p = params[name]
        m = state["m"].setdefault(name, np.zeros_like(p))
        v = state["v"].setdefault(name, np.zeros_like(p))
        t = state["t"].get(name, 0) + 1
        state["t"][name] = t
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        wd = decay.get(name, 0.0)
        if wd:
            p -= wd * p
        lr = lrs[name]
        if lr:
            p -= lr * m_hat / (np.sqrt(v_hat) + cfg.adam_eps)


def ema_decay_at(n_updates: int, decay: float, warmup: bool) -> float:
    """Decay used for the ``n_updates``-th shadow update (1-based)."""
    if not warmup:
        return decay
    return min(decay, (1.0 + n_updates) / (10.0 + n_updates))


def ema_params(shadow: dict, params: dict, decay: float) -> None:
    for name, p in params.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * p


# -- batching -------------------------------------------------------------------


@dataclass
class PackedSplit:
    """Padded token arrays for a list of samples that all have both modalities."""

    tokens_v: np.ndarray
    mask_v: np.ndarray
    tokens_t: np.ndarray
    mask_t: np.ndarray
    labels: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[MultiModalSample], max_tokens: int) -> "PackedSplit":
        if any(s.tokens_v is None or s.tokens_t is None for s in samples):
            raise TrainingError("training samples must carry both modalities")
        tv, mv = enc.pad_tokens([s.tokens_v for s in samples], max_tokens)
        tt, mt = enc.pad_tokens([s.tokens_t for s in samples], max_tokens)
        return cls(tv, mv, tt, mt, label_matrix(samples).astype(np.float64))

    def __len__(self) -> int:
        return self.labels.shape[0]

    def batch(self, idx: np.ndarray):
        def trim(tokens, mask):
            t = int(mask[idx].sum(axis=1).max())
            return tokens[idx, :t], mask[idx, :t]

        return trim(self.tokens_v, self.mask_v), trim(self.tokens_t, self.mask_t), self.labels[idx]


# -- checkpoint -------------------------------------------------------------------


@dataclass
class Checkpoint:
    train_config: TrainConfig
    encoder_config: enc.EncoderConfig
    dataset_signature: dict
    params: dict
    prototypes: PrototypeSet
    adam: dict
    ema_shadow: dict
    ema_updates: int = 0
    step: int = 0
    buffer_z: np.ndarray | None = None
    buffer_l: np.ndarray | None = None
    buffer_pos: int = 0
    buffer_fill: int = 0
    format_version: int = CKPT_VERSION

    @property
    def config_hash(self) -> str:
        return config_hash(self.train_config, self.encoder_config)

    def eval_params(self) -> dict:
        return self.ema_shadow if self.train_config.eval_with_ema else self.params

    def copy(self) -> "Checkpoint":
        return load_checkpoint_bytes(checkpoint_bytes(self))


def _config_doc(ckpt: Checkpoint) -> dict:
    return {"train": ckpt.train_config.to_dict(), "encoder": ckpt.encoder_config.to_dict()}


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = []
    arrays += [(f"params/{k}", v) for k, v in sorted(ckpt.params.items())]
    arrays += [(f"ema/{k}", v) for k, v in sorted(ckpt.ema_shadow.items())]
    arrays += [(f"adam_m/{k}", v) for k, v in sorted(ckpt.adam["m"].items())]
    arrays += [(f"adam_v/{k}", v) for k, v in sorted(ckpt.adam["v"].items())]
    arrays.append(("prototypes", ckpt.prototypes.matrix))
    if ckpt.buffer_z is not None:
        arrays.append(("buffer_z", ckpt.buffer_z))
        arrays.append(("buffer_l", ckpt.buffer_l))
    payload = bytearray()
    index = []
    for name, arr in arrays:
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": len(payload)})
        payload += data
    header = {
        "format_version": ckpt.format_version,
        "config": _config_doc(ckpt),
        "config_hash": ckpt.config_hash,
        "dataset": ckpt.dataset_signature,
        "step": ckpt.step,
        "ema_updates": ckpt.ema_updates,
        "adam_t": dict(sorted(ckpt.adam["t"].items())),
        "prototypes": {"init_mode": ckpt.prototypes.init_mode, "beta": ckpt.prototypes.beta,
                       "ridge": ckpt.prototypes.ridge},
        "buffer": {"pos": ckpt.buffer_pos, "fill": ckpt.buffer_fill},
        "arrays": index,
        "payload_sha256": hashlib.sha256(bytes(payload)).hexdigest(),
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(head)) + head + bytes(payload)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write atomically: a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = checkpoint_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint_bytes(blob: bytes, expected_hash: str | None = None) -> Checkpoint:
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    version, head_len = struct.unpack_from("<II", blob, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError("corrupt checkpoint header") from exc
    payload = blob[12 + head_len:]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise CheckpointError("checkpoint payload does not match its recorded hash")
    train_cfg = TrainConfig(**header["config"]["train"])
    enc_cfg = enc.EncoderConfig(**header["config"]["encoder"])
    actual = config_hash(train_cfg, enc_cfg)
    if actual != header.get("config_hash"):
        raise CheckpointError(
            f"config hash mismatch: header says {header.get('config_hash')}, config hashes to {actual}")
    if expected_hash is not None and expected_hash != actual:
        raise CheckpointError(f"checkpoint config {actual[:12]} does not match the run config {expected_hash[:12]}")

    groups: dict[str, dict] = {"params": {}, "ema": {}, "adam_m": {}, "adam_v": {}}
    extras = {}
    for item in header["arrays"]:
        n = int(np.prod(item["shape"])) if item["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f8", count=n, offset=item["offset"]).reshape(item["shape"]).copy()
        prefix, _, name = item["name"].partition("/")
        if name:
            groups[prefix][name] = arr
        else:
            extras[prefix] = arr
    proto_meta = header["prototypes"]
    return Checkpoint(
        train_config=train_cfg,
        encoder_config=enc_cfg,
        dataset_signature=header["dataset"],
        params=groups["params"],
        prototypes=PrototypeSet(extras["prototypes"], proto_meta["init_mode"], proto_meta["beta"],
                                proto_meta["ridge"]),
        adam={"m": groups["adam_m"], "v": groups["adam_v"], "t": {k: int(v) for k, v in header["adam_t"].items()}},
        ema_shadow=groups["ema"],
        ema_updates=int(header["ema_updates"]),
        step=int(header["step"]),
        buffer_z=extras.get("buffer_z"),
        buffer_l=extras.get("buffer_l"),
        buffer_pos=int(header["buffer"]["pos"]),
        buffer_fill=int(header["buffer"]["fill"]),
        format_version=int(header["format_version"]),
    )


def load_checkpoint(path, expected_hash: str | None = None) -> Checkpoint:
    return load_checkpoint_bytes(Path(path).read_bytes(), expected_hash)


# -- trainer ------------------------------------------------------------------------


class EventLog:
    """JSON-lines event sink; the only place wall-clock timestamps are written."""

    def __init__(self, path=None):
        self.path = None if path is None else Path(path)
        self._fh = None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a", encoding="utf-8")

    def emit(self, event: str, **fields) -> None:
        if self._fh is None:
            return
        rec = {"event": event, "time": round(time.time(), 3), **fields}
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


def new_checkpoint(dataset: Dataset, train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig) -> Checkpoint:
    train_cfg.validate()
    man = dataset.manifest
    k = man.num_classes
    enc_cfg.validate(k, orthogonal=train_cfg.prototype_init == "orthogonal")
    with_classifier = k if train_cfg.loss in CLASSIFIER_LOSSES else None
    params = enc.init_params(enc_cfg, man.d_v, man.d_t, with_classifier)
    protos = init_prototypes(k, enc_cfg.proj_dim, train_cfg.prototype_init, train_cfg.seed,
                             beta=train_cfg.prototype_beta, ridge=train_cfg.prototype_ridge)
    return Checkpoint(
        train_config=train_cfg,
        encoder_config=enc_cfg,
        dataset_signature=man.signature(),
        params=params,
        prototypes=protos,
        adam={"m": {}, "v": {}, "t": {}},
        ema_shadow={name: v.copy() for name, v in params.items()},
    )


class Trainer:
    """Owns mutable training state and advances it one optimization step at a time."""

    def __init__(self, ckpt: Checkpoint, dataset: Dataset, event_log: EventLog | None = None):
        man = dataset.manifest
        if ckpt.dataset_signature != man.signature():
            raise TrainingError("checkpoint was created for a different dataset layout")
        self.ckpt = ckpt
        self.cfg = ckpt.train_config
        self.enc_cfg = ckpt.encoder_config
        self.taxonomy: ClassTaxonomy = man.taxonomy
        self.samples = dataset.split("train")
        self.data = PackedSplit.from_samples(self.samples, self.enc_cfg.max_tokens)
        if len(self.data) < self.cfg.batch_size:
            raise TrainingError(f"training split has {len(self.data)} samples, fewer than one batch")
        if self.cfg.loss == "supcon" and np.any(self.data.labels.sum(axis=1) != 1):
            raise LossContractError("supcon cannot be trained on multi-label data")
        if self.cfg.hierarchy_weight > 0 and self.taxonomy.superclass_of is None:
            raise TrainingError("hierarchy_weight > 0 needs a taxonomy with superclasses")
        self.log = event_log or EventLog(None)
        self.steps_per_epoch = len(self.data) // self.cfg.batch_size
        if self.cfg.loss == "mlc":
            self.stage1_steps = self.cfg.stage1_epochs * self.steps_per_epoch
            self.stage2_steps = self.cfg.stage2_epochs * self.steps_per_epoch
        else:
            self.stage1_steps = 0
            self.stage2_steps = (self.cfg.stage1_epochs + self.cfg.stage2_epochs) * self.steps_per_epoch
        self.total_steps = self.stage1_steps + self.stage2_steps
        self.lrs = {n: (self.cfg.lr if enc.param_group(n) == "head" else self.cfg.backbone_lr)
                    for n in ckpt.params}
        decayed = ("classifier.",) if self.cfg.loss in CLASSIFIER_LOSSES else ("head_v.", "head_t.", "head_f.")
        self.decay = {n: self.cfg.weight_decay for n in ckpt.params if n.startswith(decayed)}
        if ckpt.buffer_z is None and self.cfg.loss == "mlc":
            rows = self.cfg.prototype_buffer_size
            ckpt.buffer_z = np.zeros((rows, self.enc_cfg.proj_dim))
            ckpt.buffer_l = np.zeros((rows, man.num_classes))

    # -- schedule

    @property
    def step_index(self) -> int:
        return self.ckpt.step

    @property
    def done(self) -> bool:
        return self.ckpt.step >= self.total_steps

    def stage_of(self, step: int) -> int:
        return 1 if step < self.stage1_steps else 2

    def batch_indices(self, step: int) -> np.ndarray:
        stage = self.stage_of(step)
        local = step if stage == 1 else step - self.stage1_steps
        epoch, b = divmod(local, self.steps_per_epoch)
        perm = child_rng(self.cfg.seed, "shuffle", stage, epoch).permutation(len(self.data))
        bs = self.cfg.batch_size
        return np.sort(perm[b * bs:(b + 1) * bs])

    # -- one step

    def _trainable(self, stage: int) -> list[str]:
        names = list(self.ckpt.params)
        if stage == 1:
            return [n for n in names if n.startswith(("enc_v.", "enc_t.", "head_v.", "head_t."))]
        return names

    def _loss(self, stage: int, p: dict, bv, bt, y: np.ndarray, rng) -> tuple[dc.Tensor, dict, enc.Representations]:
        cfg = self.cfg
        protos = self.ckpt.prototypes.matrix
        parts = {}
        if cfg.loss == "mlc":
            reps = enc.forward(bv, bt, p, self.enc_cfg, with_fusion=stage == 2)
            parts["z_v"] = mlc_loss_batch(reps.z_v, y, protos, cfg.mlc, rng, skip_invalid=True)
            parts["z_t"] = mlc_loss_batch(reps.z_t, y, protos, cfg.mlc, rng, skip_invalid=True)
            if stage == 1:
                total = parts["z_v"] + parts["z_t"]
            else:
                parts["z_f"] = mlc_loss_batch(reps.z_f, y, protos, cfg.mlc, rng, skip_invalid=True)
                wv, wt, wf = cfg.stage2_weights
                total = parts["z_v"] * wv + parts["z_t"] * wt + parts["z_f"] * wf
                if cfg.hierarchy_weight > 0:
                    sup = superclass_prototypes(protos, self.taxonomy).matrix
                    ys = self.taxonomy.superclass_labels(y.astype(np.int64)).astype(np.float64)
                    parts["hier"] = mlc_loss_batch(reps.z_f, ys, sup, cfg.mlc, rng, skip_invalid=True)
                    total = total + parts["hier"] * cfg.hierarchy_weight
            return total, parts, reps
        reps = enc.forward(bv, bt, p, self.enc_cfg)
        if cfg.loss == "supcon":
            total = supcon_loss(reps.z_f, y, cfg.mlc.tau)
        else:
            logits = enc.classifier_logits(reps.z_f, p)
            total = classifier_loss(cfg.loss, logits, y, cfg.focal, cfg.asym)
        parts[cfg.loss] = total
        return total, parts, reps

    def step(self) -> float:
        if self.done:
            raise TrainingError("training already finished")
        ck, cfg = self.ckpt, self.cfg
        s = ck.step
        stage = self.stage_of(s)
        idx = self.batch_indices(s)
        bv, bt, y = self.data.batch(idx)
        trainable = self._trainable(stage)
        p = enc.as_leaves(ck.params, set(trainable))
        rng = child_rng(cfg.seed, "negatives", s)
        total, parts, reps = self._loss(stage, p, bv, bt, y, rng)
        if not np.isfinite(total.data):
            raise dc.NumericalError(f"non-finite loss at step {s}")
        if total.requires_grad:
            total.backward()
        grads = {n: p[n].grad for n in trainable if p[n].grad is not None}
        adamw_update(ck.params, grads, ck.adam, self.lrs, self.decay, cfg)
        ck.step = s + 1
        self.log.emit("step", step=s, stage=stage, loss=float(total.data),
                      losses={k: float(v.data) for k, v in parts.items()})

        if cfg.loss == "mlc" and stage == 2:
            self._push_buffer(reps, y)
            if (ck.step - self.stage1_steps) % cfg.prototype_refresh_interval == 0:
                self._refresh_prototypes()
        if ck.step % cfg.param_ema_interval == 0:
            ck.ema_updates += 1
            decay = ema_decay_at(ck.ema_updates, cfg.param_ema_decay, cfg.param_ema_warmup)
            ema_params(ck.ema_shadow, ck.params, decay)
            self.log.emit("ema_update", step=s, decay=decay, updates=ck.ema_updates)
        return float(total.data)

    def _push_buffer(self, reps: enc.Representations, y: np.ndarray) -> None:
        ck = self.ckpt
        src = self.cfg.refit_source
        if src == "concat":
            z = np.concatenate([reps.z_v.data, reps.z_t.data, reps.z_f.data])
            y = np.concatenate([y, y, y])
        else:
            z = getattr(reps, src).data
        rows = ck.buffer_z.shape[0]
        for zi, yi in zip(z, y):
            ck.buffer_z[ck.buffer_pos] = zi
            ck.buffer_l[ck.buffer_pos] = yi
            ck.buffer_pos = (ck.buffer_pos + 1) % rows
            ck.buffer_fill = min(ck.buffer_fill + 1, rows)

    def _refresh_prototypes(self) -> None:
        ck = self.ckpt
        if ck.buffer_fill == 0:
            logger.info("prototype refresh at step %d skipped: empty buffer", ck.step)
            self.log.emit("prototype_refresh_skipped", step=ck.step)
            return
        z = ck.buffer_z[: ck.buffer_fill]
        l = ck.buffer_l[: ck.buffer_fill]
        star = estimate_prototypes(z, l, ck.prototypes.ridge)
        before = ck.prototypes.matrix
        ck.prototypes = ema_update(ck.prototypes, star)
        self.log.emit("prototype_refresh", step=ck.step, buffer=int(ck.buffer_fill),
                      change=float(np.abs(ck.prototypes.matrix - before).max()))

    def run(self, until: int | None = None) -> list[float]:
        """Step until ``until`` (global step) or the end of the schedule; returns the losses."""
        stop = self.total_steps if until is None else min(until, self.total_steps)
        losses = []
        while self.ckpt.step < stop:
            losses.append(self.step())
        return losses

    def finalize(self) -> Checkpoint:
        """SupCon has no prototypes of its own; fit class means of the trained embeddings."""
        if self.cfg.loss == "supcon" and self.done:
            z = enc.encode_samples(self.samples, self.ckpt.eval_params(), self.enc_cfg)["z_f"]
            self.ckpt.prototypes = PrototypeSet(estimate_prototypes(z, self.data.labels, self.ckpt.prototypes.ridge),
                                                self.ckpt.prototypes.init_mode, self.ckpt.prototypes.beta,
                                                self.ckpt.prototypes.ridge)
        return self.ckpt


def train_stage1(dataset: Dataset, train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig,
                 event_log: EventLog | None = None) -> Checkpoint:
    """Fixed shared prototypes; only the modality encoders and their heads learn."""
    if train_cfg.loss != "mlc":
        raise TrainingError("stage 1 is defined for the mlc loss; use train_baseline for the others")
    trainer = Trainer(new_checkpoint(dataset, train_cfg, enc_cfg), dataset, event_log)
    trainer.run(until=trainer.stage1_steps)
    return trainer.ckpt


def train_stage2(ckpt: Checkpoint, dataset: Dataset, event_log: EventLog | None = None) -> Checkpoint:
    """End-to-end training with periodic least-squares + EMA prototype refresh."""
    trainer = Trainer(ckpt, dataset, event_log)
    if ckpt.step < trainer.stage1_steps:
        raise TrainingError("train_stage2 needs a checkpoint that has finished stage 1")
    trainer.run()
    return trainer.ckpt


def train_baseline(dataset: Dataset, train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig,
                   event_log: EventLog | None = None) -> Checkpoint:
    if train_cfg.loss == "mlc":
        raise TrainingError("train_baseline expects bce, focal, asym or supcon")
    trainer = Trainer(new_checkpoint(dataset, train_cfg, enc_cfg), dataset, event_log)
    trainer.run()
    return trainer.finalize()


def train(dataset: Dataset, train_cfg: TrainConfig, enc_cfg: enc.EncoderConfig,
          event_log: EventLog | None = None) -> Checkpoint:
    """Full schedule for the configured loss."""
    if train_cfg.loss == "mlc":
        return train_stage2(train_stage1(dataset, train_cfg, enc_cfg, event_log), dataset, event_log)
    return train_baseline(dataset, train_cfg, enc_cfg, event_log)


def train_config_from_dict(doc: dict) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown train config keys: {sorted(unknown)}")
    return TrainConfig(**doc)
