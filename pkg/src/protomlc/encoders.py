"""Small multimodal transformer: per-modality encoders, joint-attention fusion, projection heads.

Parameters live in a flat ``dict[str, np.ndarray]``. Forward functions take
the same names mapped to :class:`~protomlc.diffcore.Tensor` leaves so a
training step can build one graph, call ``backward`` and read ``.grad``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .seeding import child_rng

logger = logging.getLogger(__name__)

INIT_STD = 0.02
MASK_VALUE = -1e30
BLOCK_PARAMS = ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
                "ln1_g", "ln1_b", "ff1_w", "ff1_b", "ff2_w", "ff2_b", "ln2_g", "ln2_b")


@dataclass
class EncoderConfig:
    model_dim: int = 64
    num_heads: int = 4
    layers_v: int = 1
    layers_t: int = 1
    layers_f: int = 2
    proj_dim: int = 32
    ffn_dim: int = 128
    max_tokens: int = 16
    positional: bool = True
    seed: int = 0

    def validate(self, num_classes: int | None = None, orthogonal: bool = False) -> None:
        if self.model_dim % self.num_heads:
            raise ValueError("model_dim must be divisible by num_heads")
        if min(self.layers_v, self.layers_t, self.layers_f) < 0:
            raise ValueError("encoder depths must be >= 0")
        if self.proj_dim < 1 or self.max_tokens < 1 or self.ffn_dim < 1:
            raise ValueError("proj_dim, ffn_dim and max_tokens must be positive")
        if orthogonal and num_classes is not None and self.proj_dim < num_classes:
            raise ValueError("orthogonal prototypes need proj_dim >= num_classes")

    def to_dict(self) -> dict:
        return asdict(self)


# -- parameters ----------------------------------------------------------------


def _block_shapes(dm: int, dff: int) -> dict[str, tuple]:
    return {
        "wq": (dm, dm), "bq": (dm,), "wk": (dm, dm), "bk": (dm,), "wv": (dm, dm), "bv": (dm,),
        "wo": (dm, dm), "bo": (dm,), "ln1_g": (dm,), "ln1_b": (dm,),
        "ff1_w": (dm, dff), "ff1_b": (dff,), "ff2_w": (dff, dm), "ff2_b": (dm,),
        "ln2_g": (dm,), "ln2_b": (dm,),
    }


def param_shapes(cfg: EncoderConfig, d_v: int, d_t: int, num_classes: int | None = None) -> dict[str, tuple]:
    dm, d = cfg.model_dim, cfg.proj_dim
    shapes: dict[str, tuple] = {}
    for mod, d_in, depth in (("v", d_v, cfg.layers_v), ("t", d_t, cfg.layers_t)):
        p = f"enc_{mod}."
        shapes[p + "in_w"] = (d_in, dm)
        shapes[p + "in_b"] = (dm,)
        if depth > 0:
            shapes[p + "cls"] = (dm,)
            if cfg.positional:
                shapes[p + "pos"] = (cfg.max_tokens, dm)
        for i in range(depth):
            for name, shape in _block_shapes(dm, cfg.ffn_dim).items():
                shapes[f"{p}blocks.{i}.{name}"] = shape
    shapes["fusion.cls"] = (dm,)
    shapes["fusion.mod_v"] = (dm,)
    shapes["fusion.mod_t"] = (dm,)
    for i in range(cfg.layers_f):
        for name, shape in _block_shapes(dm, cfg.ffn_dim).items():
            shapes[f"fusion.blocks.{i}.{name}"] = shape
    for head in ("head_v", "head_t", "head_f"):
        shapes[head + ".w1"] = (dm, dm)
        shapes[head + ".b1"] = (dm,)
        shapes[head + ".w2"] = (dm, d)
        shapes[head + ".b2"] = (d,)
    if num_classes is not None:
        shapes["classifier.w"] = (d, num_classes)
        shapes["classifier.b"] = (num_classes,)
    return shapes


def param_count(cfg: EncoderConfig, d_v: int, d_t: int, num_classes: int | None = None) -> int:
    """Exact number of scalar parameters, computed in closed form."""
    dm, dff, d = cfg.model_dim, cfg.ffn_dim, cfg.proj_dim
    block = 4 * (dm * dm + dm) + 2 * (2 * dm) + (dm * dff + dff) + (dff * dm + dm)
    total = 0
    for d_in, depth in ((d_v, cfg.layers_v), (d_t, cfg.layers_t)):
        total += d_in * dm + dm
        if depth > 0:
            total += dm + (cfg.max_tokens * dm if cfg.positional else 0)
        total += depth * block
    total += 3 * dm + cfg.layers_f * block
    total += 3 * (dm * dm + dm + dm * d + d)
    if num_classes is not None:
        total += d * num_classes + num_classes
    return total


def init_params(cfg: EncoderConfig, d_v: int, d_t: int, num_classes: int | None = None) -> dict[str, np.ndarray]:
    """Gaussian(0, 0.02) weights, zero biases, unit layer-norm gains."""
    rng = child_rng(cfg.seed, "encoder_init")
    params = {}
    for name, shape in param_shapes(cfg, d_v, d_t, num_classes).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.endswith("_g"):
            params[name] = np.ones(shape)
        elif leaf.startswith("b") or leaf.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            params[name] = INIT_STD * rng.standard_normal(shape)
    return params


def param_group(name: str) -> str:
    """``backbone`` for the modality encoders, ``head`` for everything else."""
    return "backbone" if name.startswith(("enc_v.", "enc_t.")) else "head"


def as_leaves(params: Mapping[str, np.ndarray], trainable=None) -> dict[str, Tensor]:
    """Wrap arrays as graph leaves; names outside ``trainable`` become constants."""
    return {k: (dc.parameter(v) if trainable is None or k in trainable else Tensor(v))
            for k, v in params.items()}


# -- building blocks ------------------------------------------------------------


def linear(x, w, b) -> Tensor:
    return dc.matmul(x, w) + b


def multi_head_attention(x: Tensor, p: Mapping[str, Tensor], prefix: str, num_heads: int,
                         key_mask: np.ndarray | None = None, return_weights: bool = False):
    """Scaled dot-product self-attention over ``x`` of shape (B, S, d_m)."""
    B, S, dm = x.shape
    dh = dm // num_heads

    def split(t):
        return dc.transpose(dc.reshape(t, (B, S, num_heads, dh)), (0, 2, 1, 3))

    q = split(linear(x, p[prefix + "wq"], p[prefix + "bq"]))
    k = split(linear(x, p[prefix + "wk"], p[prefix + "bk"]))
    v = split(linear(x, p[prefix + "wv"], p[prefix + "bv"]))
    scores = dc.matmul(q, dc.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    if key_mask is not None and not key_mask.all():
        scores = scores + np.where(key_mask, 0.0, MASK_VALUE)[:, None, None, :]
    weights = dc.softmax(scores, axis=-1)
    ctx = dc.reshape(dc.transpose(dc.matmul(weights, v), (0, 2, 1, 3)), (B, S, dm))
    out = linear(ctx, p[prefix + "wo"], p[prefix + "bo"])
    return (out, weights) if return_weights else out


def transformer_block(x: Tensor, p: Mapping[str, Tensor], prefix: str, num_heads: int,
                      key_mask: np.ndarray | None = None) -> Tensor:
    """attention -> residual -> layer norm -> GELU feed-forward -> residual -> layer norm."""
    a = multi_head_attention(x, p, prefix, num_heads, key_mask)
    x = dc.layer_norm(x + a, p[prefix + "ln1_g"], p[prefix + "ln1_b"])
    h = dc.gelu(linear(x, p[prefix + "ff1_w"], p[prefix + "ff1_b"]))
    f = linear(h, p[prefix + "ff2_w"], p[prefix + "ff2_b"])
    return dc.layer_norm(x + f, p[prefix + "ln2_g"], p[prefix + "ln2_b"])


def project_head(cls, p: Mapping[str, Tensor], prefix: str) -> Tensor:
    """Two-layer MLP d_m -> d_m -> d with GELU between; output is not normalized."""
    h = dc.gelu(linear(cls, p[prefix + ".w1"], p[prefix + ".b1"]))
    return linear(h, p[prefix + ".w2"], p[prefix + ".b2"])


def _masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    w = mask.astype(np.float64)
    w = w / w.sum(axis=1, keepdims=True)
    return dc.tsum(x * w[:, :, None], axis=1)


def pad_tokens(token_list: Sequence[np.ndarray], max_tokens: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack ragged (T_i, d) arrays into (B, T_max, d) plus a validity mask.

    Sequences longer than ``max_tokens`` are truncated with a logged warning.
    """
    lengths = []
    for toks in token_list:
        if toks.shape[0] < 1:
            raise ValueError("a present modality needs at least one token")
        if toks.shape[0] > max_tokens:
            logger.warning("truncating a %d-token sequence to max_tokens=%d", toks.shape[0], max_tokens)
        lengths.append(min(toks.shape[0], max_tokens))
    t_max = max(lengths)
    d = token_list[0].shape[1]
    out = np.zeros((len(token_list), t_max, d))
    mask = np.zeros((len(token_list), t_max), dtype=bool)
    for i, (toks, n) in enumerate(zip(token_list, lengths)):
        out[i, :n] = toks[:n]
        mask[i, :n] = True
    return out, mask


def encode_modality(tokens, mask: np.ndarray | None, p: Mapping[str, Tensor], modality: str,
                    cfg: EncoderConfig) -> tuple[Tensor, Tensor]:
    """Encode a padded batch (B, T, d_in) of one modality.

    Returns the summary vector (B, d_m) and the encoded tokens (B, T, d_m).
    With depth 0 the summary is the input projection of the mean token.
    Otherwise a learned CLS token is prepended and its final state is the
    summary; for the visual modality this single CLS attends over all frames.
    """
    prefix = f"enc_{modality}."
    tokens = dc.as_tensor(tokens)
    if tokens.ndim == 2:
        tokens = dc.reshape(tokens, (1,) + tokens.shape)
    B, T, _ = tokens.shape
    if mask is None:
        mask = np.ones((B, T), dtype=bool)
    if T > cfg.max_tokens:
        logger.warning("truncating %d tokens to max_tokens=%d", T, cfg.max_tokens)
        tokens, mask, T = tokens[:, : cfg.max_tokens], mask[:, : cfg.max_tokens], cfg.max_tokens
    x = linear(tokens, p[prefix + "in_w"], p[prefix + "in_b"])
    depth = cfg.layers_v if modality == "v" else cfg.layers_t
    if depth == 0:
        return _masked_mean(x, mask), x
    if cfg.positional:
        x = x + p[prefix + "pos"][:T]
    cls = dc.add(np.zeros((B, 1, cfg.model_dim)), p[prefix + "cls"])
    seq = dc.concat([cls, x], axis=1)
    seq_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    for i in range(depth):
        seq = transformer_block(seq, p, f"{prefix}blocks.{i}.", cfg.num_heads, seq_mask)
    return seq[:, 0, :], seq[:, 1:, :]


def fuse(enc_v: Tensor, mask_v: np.ndarray, enc_t: Tensor, mask_t: np.ndarray,
         p: Mapping[str, Tensor], cfg: EncoderConfig) -> Tensor:
    """Joint self-attention over [fusion CLS; visual tokens; text tokens].

    Each modality's tokens get that modality's learned embedding added. The
    fused CLS state goes through ``head_f``. With zero fusion layers the
    summary is the masked mean of all modality tokens instead.
    """
    B = enc_v.shape[0]
    xv = enc_v + p["fusion.mod_v"]
    xt = enc_t + p["fusion.mod_t"]
    if cfg.layers_f == 0:
        both = dc.concat([xv, xt], axis=1)
        summary = _masked_mean(both, np.concatenate([mask_v, mask_t], axis=1))
        return project_head(summary, p, "head_f")
    cls = dc.add(np.zeros((B, 1, cfg.model_dim)), p["fusion.cls"])
    seq = dc.concat([cls, xv, xt], axis=1)
    seq_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask_v, mask_t], axis=1)
    for i in range(cfg.layers_f):
        seq = transformer_block(seq, p, f"fusion.blocks.{i}.", cfg.num_heads, seq_mask)
    return project_head(seq[:, 0, :], p, "head_f")


@dataclass
class Representations:
    """Per-sample projections. ``z_v`` / ``z_t`` are ``None`` when that modality is absent."""

    z_v: Tensor | None
    z_t: Tensor | None
    z_f: Tensor


def forward(batch_v, batch_t, p: Mapping[str, Tensor], cfg: EncoderConfig,
            with_fusion: bool = True) -> Representations:
    """Encode one batch whose samples share the same modality presence.

    ``batch_v`` / ``batch_t`` are ``(padded_tokens, mask)`` pairs or ``None``
    for an absent modality. With only one modality present, ``z_f`` falls
    back to that modality's own projection.
    """
    if batch_v is None and batch_t is None:
        raise ValueError("a sample needs at least one modality")
    z = {}
    enc = {}
    for mod, batch in (("v", batch_v), ("t", batch_t)):
        if batch is None:
            z[mod] = None
            continue
        tokens, mask = batch
        cls, toks = encode_modality(tokens, mask, p, mod, cfg)
        enc[mod] = (toks, mask)
        z[mod] = project_head(cls, p, f"head_{mod}")
    if batch_v is None or batch_t is None:
        z_f = z["t"] if batch_v is None else z["v"]
    elif with_fusion:
        z_f = fuse(enc["v"][0], enc["v"][1], enc["t"][0], enc["t"][1], p, cfg)
    else:
        z_f = None
    return Representations(z["v"], z["t"], z_f)


def classifier_logits(z_f: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    return linear(z_f, p["classifier.w"], p["classifier.b"])


def encode_samples(samples, params: Mapping[str, np.ndarray], cfg: EncoderConfig,
                   batch_size: int = 256) -> dict[str, np.ndarray]:
    """Inference over a list of samples; returns ``z_v``, ``z_t``, ``z_f`` arrays (N x d).

    Samples are grouped by which modalities they carry and processed in
    fixed-order chunks. Rows for an absent modality are NaN in ``z_v``/``z_t``.
    """
    p = as_leaves(params, trainable=())
    n = len(samples)
    out = {k: np.full((n, cfg.proj_dim), np.nan) for k in ("z_v", "z_t", "z_f")}
    groups: dict[tuple, list[int]] = {}
    for i, s in enumerate(samples):
        key = (s.tokens_v is not None, s.tokens_t is not None)
        if key == (False, False):
            raise ValueError(f"sample {s.id!r} has no modality")
        groups.setdefault(key, []).append(i)
    for (has_v, has_t), idx in sorted(groups.items()):
        for start in range(0, len(idx), batch_size):
            chunk = idx[start:start + batch_size]
            bv = pad_tokens([samples[i].tokens_v for i in chunk], cfg.max_tokens) if has_v else None
            bt = pad_tokens([samples[i].tokens_t for i in chunk], cfg.max_tokens) if has_t else None
            reps = forward(bv, bt, p, cfg)
            out["z_f"][chunk] = reps.z_f.data
            if has_v:
                out["z_v"][chunk] = reps.z_v.data
            if has_t:
                out["z_t"][chunk] = reps.z_t.data
    return out
