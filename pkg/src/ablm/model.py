"""Transformer encoder over the dual-level vocabulary, plus objective heads.

Pre-norm blocks, multi-head self-attention with rotary positions, GELU
feed-forward, a shared final layer norm. One encoder serves both input
levels; the only level signal is the token-type embedding. Heads:

  * mlm       position-wise projection to the full vocabulary
  * ssm       linear read-out on pooled pair features [u, v, u*v, |u-v|]
  * binding / maturation   pooled classification (2-way / 6-way)
  * paratope  position-wise binary labeling
  * affinity  two-layer fusion MLP on pooled antibody+antigen features

The SSM read-out includes the elementwise product and absolute difference
of the two pooled vectors: a head that is affine in the concatenation
alone cannot separate matched from mismatched pairs inside a batch (the
diagonal and any derangement share the same logit sum), while a single
linear layer over these pair features can.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .tensor import IGNORE_LABEL, Tensor
from .vocab import DEFAULT_VOCAB, PAD_ID

# Additive attention-mask value: large enough that exp() underflows to
# exactly 0.0 after row-max subtraction, small enough to stay finite.
MASK_NEG = -1e30

POOL_MEAN = "mean"
POOL_CLS = "cls"


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_hidden: int = 128
    d_ff: int = 512
    max_len: int = 256
    vocab_size: int = DEFAULT_VOCAB.size
    dropout: float = 0.0
    pool: str = POOL_MEAN

    def __post_init__(self):
        if self.d_hidden % self.n_heads != 0:
            raise ValueError("d_hidden must be divisible by n_heads")
        if (self.d_hidden // self.n_heads) % 2 != 0:
            raise ValueError("head dimension must be even for rotary embedding")
        if self.pool not in (POOL_MEAN, POOL_CLS):
            raise ValueError(f"unknown pooling mode {self.pool!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_hidden": self.d_hidden,
            "d_ff": self.d_ff,
            "max_len": self.max_len,
            "vocab_size": self.vocab_size,
            "dropout": self.dropout,
            "pool": self.pool,
        }


# Named preset mirroring the full-scale setup; not the test target.
LARGE_PRESET = ModelConfig(
    n_layers=33, n_heads=20, d_hidden=1280, d_ff=5120, max_len=1024
)


@dataclass
class TokenBatch:
    """Padded id matrix with token types, a real-token mask, and labels."""

    ids: np.ndarray  # [B, L] int64
    token_type: np.ndarray  # [B, L] int64 (0 = 1D, 1 = 3Di)
    pad_mask: np.ndarray  # [B, L] bool, True at real tokens
    labels: np.ndarray  # [B, L] int64, IGNORE_LABEL where unsupervised

    def __post_init__(self):
        shape = self.ids.shape
        for name in ("token_type", "pad_mask", "labels"):
            if getattr(self, name).shape != shape:
                raise ValueError(f"TokenBatch field {name} shape mismatch")

    @property
    def batch_size(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.ids.shape[1]


def pack_batch(rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]]) -> TokenBatch:
    """Right-pad per-sequence (ids, types, labels) rows into one batch."""
    if not rows:
        raise ValueError("cannot pack an empty batch")
    max_len = max(len(ids) for ids, _, _ in rows)
    b = len(rows)
    ids = np.full((b, max_len), PAD_ID, dtype=np.int64)
    types = np.zeros((b, max_len), dtype=np.int64)
    mask = np.zeros((b, max_len), dtype=bool)
    labels = np.full((b, max_len), IGNORE_LABEL, dtype=np.int64)
    for r, (tid, tty, lab) in enumerate(rows):
        n = len(tid)
        ids[r, :n] = tid
        types[r, :n] = tty
        mask[r, :n] = True
        labels[r, :n] = lab
    return TokenBatch(ids, types, mask, labels)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

INIT_SCALE = 0.02


def init_weights(config: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Fresh parameter set; names are stable and ordered for checkpointing."""
    rng = np.random.default_rng(seed)

    def w(shape):
        return Tensor(rng.normal(0.0, INIT_SCALE, size=shape), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d, ff, v = config.d_hidden, config.d_ff, config.vocab_size
    params: dict[str, Tensor] = {}
    params["emb.tok"] = w((v, d))
    params["emb.type"] = w((2, d))
    for i in range(config.n_layers):
        p = f"layer{i}."
        params[p + "ln1.g"] = ones((d,))
        params[p + "ln1.b"] = zeros((d,))
        for name in ("wq", "wk", "wv", "wo"):
            params[p + "attn." + name] = w((d, d))
        for name in ("bq", "bk", "bv", "bo"):
            params[p + "attn." + name] = zeros((d,))
        params[p + "ln2.g"] = ones((d,))
        params[p + "ln2.b"] = zeros((d,))
        params[p + "ffn.w1"] = w((d, ff))
        params[p + "ffn.b1"] = zeros((ff,))
        params[p + "ffn.w2"] = w((ff, d))
        params[p + "ffn.b2"] = zeros((d,))
    params["final_ln.g"] = ones((d,))
    params["final_ln.b"] = zeros((d,))
    params["mlm.w"] = w((d, v))
    params["mlm.b"] = zeros((v,))
    params["ssm.w"] = w((4 * d, 1))
    params["ssm.b"] = zeros((1,))
    params["head.binding.w"] = w((d, 2))
    params["head.binding.b"] = zeros((2,))
    params["head.maturation.w"] = w((d, 6))
    params["head.maturation.b"] = zeros((6,))
    params["head.paratope.w"] = w((d, 2))
    params["head.paratope.b"] = zeros((2,))
    params["head.affinity.w1"] = w((2 * d, d))
    params["head.affinity.b1"] = zeros((d,))
    params["head.affinity.w2"] = w((d, 1))
    params["head.affinity.b2"] = zeros((1,))
    return params


def zero_grads(weights: dict[str, Tensor]) -> None:
    for p in weights.values():
        p.grad = None


def clone_weights(weights: dict[str, Tensor]) -> dict[str, Tensor]:
    out = {}
    for k, p in weights.items():
        t = Tensor(p.data.copy(), requires_grad=True)
        out[k] = t
    return out


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


def encoder_forward(
    batch: TokenBatch,
    config: ModelConfig,
    weights: dict[str, Tensor],
    want_attention: bool = False,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the encoder stack.

    Returns ``(hidden, attention)`` where hidden is a [B, L, d] tensor and
    attention is a list (one per layer) of [B, heads, L, L] row-stochastic
    arrays, or None unless requested. PAD key positions receive exactly
    zero attention; PAD query rows are garbage and must be masked by the
    caller (pooling and losses already do).
    """
    b, seq_len = batch.ids.shape
    if seq_len > config.max_len:
        raise ValueError(f"sequence length {seq_len} exceeds max_len {config.max_len}")
    if train and config.dropout > 0.0 and rng is None:
        raise ValueError("training forward with dropout needs an rng")

    x = T.add(
        T.embedding(weights["emb.tok"], batch.ids),
        T.embedding(weights["emb.type"], batch.token_type),
    )

    key_mask = np.where(batch.pad_mask, 0.0, MASK_NEG)[:, None, None, :]
    positions = np.arange(seq_len)
    scale = 1.0 / np.sqrt(config.d_head)
    attn_maps: list[np.ndarray] = []

    def maybe_dropout(t: Tensor) -> Tensor:
        if train and config.dropout > 0.0:
            return T.dropout(t, config.dropout, rng)
        return t

    def split_heads(t: Tensor) -> Tensor:
        # [B, L, d] -> [B, heads, L, d_head]
        t = T.reshape(t, (b, seq_len, config.n_heads, config.d_head))
        return T.transpose(t, (0, 2, 1, 3))

    for i in range(config.n_layers):
        p = f"layer{i}."
        h = T.layer_norm(x, weights[p + "ln1.g"], weights[p + "ln1.b"])
        q = split_heads(T.add(T.matmul(h, weights[p + "attn.wq"]), weights[p + "attn.bq"]))
        k = split_heads(T.add(T.matmul(h, weights[p + "attn.wk"]), weights[p + "attn.bk"]))
        v = split_heads(T.add(T.matmul(h, weights[p + "attn.wv"]), weights[p + "attn.bv"]))
        q = T.rope_rotate(q, positions)
        k = T.rope_rotate(k, positions)
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), key_mask)
        attn = T.softmax(scores, axis=-1)
        if want_attention:
            attn_maps.append(attn.data.copy())
        ctx = T.matmul(attn, v)  # [B, heads, L, d_head]
        ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, seq_len, config.d_hidden))
        out = T.add(T.matmul(ctx, weights[p + "attn.wo"]), weights[p + "attn.bo"])
        x = T.add(x, maybe_dropout(out))

        h2 = T.layer_norm(x, weights[p + "ln2.g"], weights[p + "ln2.b"])
        ff = T.add(T.matmul(T.gelu(T.add(T.matmul(h2, weights[p + "ffn.w1"]), weights[p + "ffn.b1"])), weights[p + "ffn.w2"]), weights[p + "ffn.b2"])
        x = T.add(x, maybe_dropout(ff))

    hidden = T.layer_norm(x, weights["final_ln.g"], weights["final_ln.b"])
    return hidden, (attn_maps if want_attention else None)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------


def mlm_logits(hidden: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Project final hidden states to vocabulary logits [B, L, V]."""
    return T.add(T.matmul(hidden, weights["mlm.w"]), weights["mlm.b"])


def masked_mean(hidden: Tensor, pad_mask: np.ndarray) -> Tensor:
    """Mean over non-PAD positions, per batch row."""
    counts = pad_mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("cannot pool an all-PAD sequence")
    m = pad_mask.astype(np.float64)[:, :, None]
    summed = T.tensor_sum(T.mul(hidden, m), axis=1)
    return T.mul(summed, (1.0 / counts)[:, None])


def pool_hidden(hidden: Tensor, pad_mask: np.ndarray, config: ModelConfig) -> Tensor:
    if config.pool == POOL_CLS:
        return hidden[:, 0, :]
    return masked_mean(hidden, pad_mask)


def pooled_head(
    hidden: Tensor,
    pad_mask: np.ndarray,
    weights: dict[str, Tensor],
    head: str,
    config: ModelConfig,
) -> Tensor:
    """Pool and apply a sequence-level linear head ('binding'/'maturation')."""
    wkey, bkey = f"head.{head}.w", f"head.{head}.b"
    if wkey not in weights:
        raise KeyError(f"no such head: {head}")
    pooled = pool_hidden(hidden, pad_mask, config)
    return T.add(T.matmul(pooled, weights[wkey]), weights[bkey])


def token_head(hidden: Tensor, weights: dict[str, Tensor], head: str = "paratope") -> Tensor:
    """Position-wise linear head; [B, L, 2] for binary labeling."""
    return T.add(T.matmul(hidden, weights[f"head.{head}.w"]), weights[f"head.{head}.b"])


def ssm_pair_features(u: Tensor, v: Tensor) -> Tensor:
    """Order-aware pair features: [u, v, u*v, |u - v|] along the last axis."""
    return T.concat([u, v, T.mul(u, v), T.absolute(T.sub(u, v))], axis=1)


def ssm_logits_from_pooled(u: Tensor, v: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Match logits for aligned rows of pooled 1D (u) and 3Di (v) vectors."""
    feats = ssm_pair_features(u, v)
    out = T.add(T.matmul(feats, weights["ssm.w"]), weights["ssm.b"])
    return T.reshape(out, (out.shape[0],))


def ssm_logit(
    hidden_1d: Tensor,
    hidden_3di: Tensor,
    pad_mask_1d: np.ndarray,
    pad_mask_3di: np.ndarray,
    weights: dict[str, Tensor],
    config: ModelConfig,
) -> Tensor:
    """Match logit per aligned (1D, 3Di) pair of independently encoded rows."""
    u = pool_hidden(hidden_1d, pad_mask_1d, config)
    v = pool_hidden(hidden_3di, pad_mask_3di, config)
    return ssm_logits_from_pooled(u, v, weights)


def affinity_output(pooled_ab: Tensor, pooled_ag: Tensor, weights: dict[str, Tensor]) -> Tensor:
    """Fusion MLP on concatenated pooled antibody/antigen features -> [B]."""
    h = T.concat([pooled_ab, pooled_ag], axis=1)
    h = T.gelu(T.add(T.matmul(h, weights["head.affinity.w1"]), weights["head.affinity.b1"]))
    out = T.add(T.matmul(h, weights["head.affinity.w2"]), weights["head.affinity.b2"])
    return T.reshape(out, (out.shape[0],))


# ---------------------------------------------------------------------------
# Bundled model
# ---------------------------------------------------------------------------


@dataclass
class Model:
    """A config plus its parameter set; convenience wrapper for callers."""

    config: ModelConfig
    weights: dict[str, Tensor] = field(default_factory=dict)

    @classmethod
    def init(cls, config: ModelConfig, seed: int) -> "Model":
        return cls(config, init_weights(config, seed))

    def forward(self, batch: TokenBatch, want_attention: bool = False, train: bool = False, rng=None):
        return encoder_forward(batch, self.config, self.weights, want_attention, train, rng)

    def params(self) -> list[Tensor]:
        return list(self.weights.values())

    def clone(self) -> "Model":
        return Model(replace(self.config), clone_weights(self.weights))


def rope_rotate(x, positions):
    """Rotary rotation on [..., L, d_head]; see tensor.rope_rotate."""
    return T.rope_rotate(x, positions)
