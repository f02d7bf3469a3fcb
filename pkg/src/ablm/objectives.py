"""Training-batch corruption and the five pretraining loss terms.

Stage I: masked-token reconstruction per level (1D-MLM, 3Di-MLM), losses
summed. Stage II on paired data: in-batch sequence-structure matching over
all N^2 pairings of a minibatch, plus cross-level reconstruction where one
level is corrupted and the aligned intact level is interleaved into the
encoder input as conditioning context.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import (
    Model,
    TokenBatch,
    encoder_forward,
    masked_mean,
    mlm_logits,
    pack_batch,
    ssm_logits_from_pooled,
)
from .seqio import PairedRecord
from .tensor import IGNORE_LABEL, Tensor
from .vocab import CLS_ID, LEVEL_1D, LEVEL_3DI, MASK_ID, PAD_ID, Vocab

ACTION_MASK = 0
ACTION_RANDOM = 1
ACTION_KEEP = 2

MASK_FRACTION = 0.80
RANDOM_FRACTION = 0.10  # remainder after MASK and RANDOM is KEEP

DEFAULT_MASK_RATE = 0.15


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


@dataclass
class MaskPlan:
    """Positions to corrupt and the per-position action."""

    positions: np.ndarray  # sorted, distinct indices
    actions: np.ndarray  # ACTION_* codes aligned with positions

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.positions.shape != self.actions.shape:
            raise ValueError("positions and actions must align")
        if len(np.unique(self.positions)) != len(self.positions):
            raise ValueError("mask positions must be distinct")

    def __len__(self):
        return len(self.positions)


def make_mask_plan(length: int, rate: float, rng: np.random.Generator) -> MaskPlan:
    """Choose ``max(1, round(rate * length))`` positions (0 when rate is 0)
    and draw each position's action 80/10/10 MASK/RANDOM/KEEP."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if not 0.0 <= rate <= 1.0:
        raise ValueError("rate must lie in [0, 1]")
    if rate == 0.0:
        empty = np.empty(0, dtype=np.int64)
        return MaskPlan(empty, empty.copy())
    count = min(length, max(1, _round_half_up(rate * length)))
    positions = np.sort(rng.choice(length, size=count, replace=False))
    draws = rng.random(count)
    actions = np.full(count, ACTION_KEEP, dtype=np.int64)
    actions[draws < MASK_FRACTION + RANDOM_FRACTION] = ACTION_RANDOM
    actions[draws < MASK_FRACTION] = ACTION_MASK
    return MaskPlan(positions, actions)


def apply_mask(
    tokens: np.ndarray,
    plan: MaskPlan,
    vocab: Vocab,
    rng: np.random.Generator,
    level: str,
) -> tuple[np.ndarray, np.ndarray]:
    """Corrupt ``tokens`` per the plan; return (corrupted, labels).

    RANDOM replacements are uniform over the same level's 20-letter id
    range, never specials and never the other level. Labels hold the
    original ids at plan positions and IGNORE_LABEL elsewhere.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if len(plan) and (plan.positions.min() < 0 or plan.positions.max() >= len(tokens)):
        raise IndexError("mask plan position out of range")
    if len(plan) and np.any(np.isin(tokens[plan.positions], (PAD_ID, CLS_ID))):
        raise ValueError("mask plan touches a PAD or CLS position")
    lo, hi = vocab.level_range(level)
    corrupted = tokens.copy()
    labels = np.full(len(tokens), IGNORE_LABEL, dtype=np.int64)
    for pos, action in zip(plan.positions, plan.actions):
        labels[pos] = tokens[pos]
        if action == ACTION_MASK:
            corrupted[pos] = MASK_ID
        elif action == ACTION_RANDOM:
            corrupted[pos] = rng.integers(lo, hi)
    return corrupted, labels


# ---------------------------------------------------------------------------
# Batch builders
# ---------------------------------------------------------------------------


def _with_cls(ids, types, labels, cls_type):
    ids = np.concatenate([[CLS_ID], ids])
    types = np.concatenate([[cls_type], types])
    labels = np.concatenate([[IGNORE_LABEL], labels])
    return ids, types, labels


def make_mlm_batch(
    seqs: list[str],
    level: str,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
    cls: bool = False,
) -> TokenBatch:
    """Corrupted single-level batch for masked-token reconstruction."""
    rows = []
    type_id = vocab.type_id(level)
    for seq in seqs:
        tokens = vocab.encode(seq, level)
        plan = make_mask_plan(len(tokens), rate, rng)
        corrupted, labels = apply_mask(tokens, plan, vocab, rng, level)
        types = np.full(len(tokens), type_id, dtype=np.int64)
        if cls:
            corrupted, types, labels = _with_cls(corrupted, types, labels, type_id)
        rows.append((corrupted, types, labels))
    return pack_batch(rows)


def clr_corrupt(
    record: PairedRecord,
    level: str,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Corrupt exactly one level of a paired record.

    Returns (corrupted level tokens, labels for that level, intact tokens
    of the other level, bit-identical to the input encoding).
    """
    t1d = vocab.encode_residues(record.residues.residues)
    t3di = vocab.encode_struct(record.struct3di)
    target = t1d if level == LEVEL_1D else t3di
    other = t3di if level == LEVEL_1D else t1d
    plan = make_mask_plan(len(target), rate, rng)
    corrupted, labels = apply_mask(target, plan, vocab, rng, level)
    return corrupted, labels, other


def interleave_levels(tokens_1d: np.ndarray, tokens_3di: np.ndarray):
    """Zip the aligned levels into one input: slot 2i holds residue i, slot
    2i+1 its structure token. Token types alternate 0/1 accordingly."""
    n = len(tokens_1d)
    if len(tokens_3di) != n:
        raise ValueError("levels must be aligned position for position")
    ids = np.empty(2 * n, dtype=np.int64)
    ids[0::2] = tokens_1d
    ids[1::2] = tokens_3di
    types = np.empty(2 * n, dtype=np.int64)
    types[0::2] = 0
    types[1::2] = 1
    return ids, types


def make_clr_batch(
    records: list[PairedRecord],
    level: str,
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
    condition_on_intact: bool = True,
    cls: bool = False,
) -> TokenBatch:
    """Cross-level reconstruction batch.

    The encoder input interleaves the two aligned levels (residue token,
    then its structure token, position by position; the token-type id
    flags each slot's level). Only the chosen level is corrupted and only
    its slots carry labels, so the prediction is conditioned on hybrid
    context from both levels. With ``condition_on_intact=False`` the
    intact level is dropped entirely, which reduces the task to
    single-level reconstruction (ablation probe).
    """
    rows = []
    for rec in records:
        corrupted, labels, other = clr_corrupt(rec, level, rate, rng, vocab)
        if not condition_on_intact:
            ids = corrupted
            types = np.full(len(corrupted), vocab.type_id(level), dtype=np.int64)
            labs = labels
        else:
            if level == LEVEL_1D:
                ids, types = interleave_levels(corrupted, other)
            else:
                ids, types = interleave_levels(other, corrupted)
            labs = np.full(len(ids), IGNORE_LABEL, dtype=np.int64)
            offset = 0 if level == LEVEL_1D else 1
            labs[offset::2] = labels
        if cls:
            ids, types, labs = _with_cls(ids, types, labs, int(types[0]))
        rows.append((ids, types, labs))
    return pack_batch(rows)


@dataclass
class SSMPairBatch:
    """All N^2 pairings of a corrupted minibatch; diagonal pairs match."""

    batch_1d: TokenBatch
    batch_3di: TokenBatch
    pair_i: np.ndarray  # [N^2] row index into batch_1d
    pair_j: np.ndarray  # [N^2] row index into batch_3di
    labels: np.ndarray  # [N^2] float 1.0 = match
    n: int


def build_ssm_pairs(
    records: list[PairedRecord],
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
    cls: bool = False,
) -> SSMPairBatch:
    """Corrupt both levels of each record, then cross every 1D row with
    every 3Di row: N^2 pairs, the N diagonal ones labeled as matches."""
    n = len(records)
    if n < 2:
        raise ValueError("SSM needs a minibatch of at least 2 records")
    rows_1d, rows_3di = [], []
    for rec in records:
        c1, _, _ = clr_corrupt(rec, LEVEL_1D, rate, rng, vocab)
        c3, _, _ = clr_corrupt(rec, LEVEL_3DI, rate, rng, vocab)
        t1 = np.full(len(c1), vocab.type_id(LEVEL_1D), dtype=np.int64)
        t3 = np.full(len(c3), vocab.type_id(LEVEL_3DI), dtype=np.int64)
        l1 = np.full(len(c1), IGNORE_LABEL, dtype=np.int64)
        l3 = np.full(len(c3), IGNORE_LABEL, dtype=np.int64)
        if cls:
            c1, t1, l1 = _with_cls(c1, t1, l1, t1[0])
            c3, t3, l3 = _with_cls(c3, t3, l3, t3[0])
        rows_1d.append((c1, t1, l1))
        rows_3di.append((c3, t3, l3))
    pair_i = np.repeat(np.arange(n), n)
    pair_j = np.tile(np.arange(n), n)
    labels = (pair_i == pair_j).astype(np.float64)
    return SSMPairBatch(pack_batch(rows_1d), pack_batch(rows_3di), pair_i, pair_j, labels, n)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def mlm_loss(model: Model, batch: TokenBatch) -> tuple[Tensor, int]:
    """Cross-entropy over masked positions only; (scalar, n_masked)."""
    hidden, _ = model.forward(batch)
    logits = mlm_logits(hidden, model.weights)
    b, length, v = logits.shape
    flat = T.reshape(logits, (b * length, v))
    loss = T.cross_entropy(flat, batch.labels.ravel())
    return loss, loss.n_items


def ssm_forward(model: Model, pairs: SSMPairBatch) -> Tensor:
    """Match logits for every pair; both batches share the encoder."""
    h1, _ = model.forward(pairs.batch_1d)
    h3, _ = model.forward(pairs.batch_3di)
    u = masked_mean(h1, pairs.batch_1d.pad_mask)
    v = masked_mean(h3, pairs.batch_3di.pad_mask)
    ui = T.index_select(u, pairs.pair_i)
    vj = T.index_select(v, pairs.pair_j)
    return ssm_logits_from_pooled(ui, vj, model.weights)


def ssm_loss(model: Model, pairs: SSMPairBatch, positive_weight: float = 1.0) -> Tensor:
    """Mean binary cross-entropy over the N^2 pairs.

    Unweighted by default (matched and mismatched pairs count equally
    despite the N vs N^2-N imbalance); ``positive_weight`` upweights the
    matched pairs when a caller wants balance.
    """
    logits = ssm_forward(model, pairs)
    if positive_weight == 1.0:
        return T.bce_with_logits(logits, pairs.labels)
    return weighted_bce_with_logits(logits, pairs.labels, positive_weight)


def weighted_bce_with_logits(logits: Tensor, labels: np.ndarray, positive_weight: float) -> Tensor:
    """BCE with positives scaled by ``positive_weight``; mean over weights."""
    weights = np.where(labels > 0.5, positive_weight, 1.0)
    z = logits
    per = T.add(
        T.sub(T.absolute(T.mul(z, 0.5)) + T.mul(z, 0.5), T.mul(z, Tensor(labels))),
        softplus_neg_abs(z),
    )
    weighted = T.mul(per, Tensor(weights))
    return T.div(T.tensor_sum(weighted), float(weights.sum()))


def softplus_neg_abs(z: Tensor) -> Tensor:
    """log(1 + exp(-|z|)) composed from stable primitives."""
    return T.log(T.add(T.exp(T.neg(T.absolute(z))), 1.0))


def ssm_accuracy_from_logits(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(((logits > 0.0) == (labels > 0.5)).mean())


def clr_loss(model: Model, batch: TokenBatch) -> tuple[Tensor, int]:
    """Cross-entropy at the corrupted level's masked positions of a
    cross-level batch; the conditioning context carries no labels."""
    return mlm_loss(model, batch)


# ---------------------------------------------------------------------------
# Stage aggregates
# ---------------------------------------------------------------------------


@dataclass
class LossReport:
    """Per-objective scalars for one step; terms not in play stay None."""

    l_1d_mlm: float | None = None
    l_3di_mlm: float | None = None
    l_ssm: float | None = None
    l_1d_clr: float | None = None
    l_3di_clr: float | None = None
    counts: dict = field(default_factory=dict)

    @property
    def total(self) -> float:
        terms = [
            v
            for v in (self.l_1d_mlm, self.l_3di_mlm, self.l_ssm, self.l_1d_clr, self.l_3di_clr)
            if v is not None
        ]
        return float(sum(terms))

    def to_dict(self) -> dict:
        out = {"total": self.total}
        for name in ("l_1d_mlm", "l_3di_mlm", "l_ssm", "l_1d_clr", "l_3di_clr"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        return out


def stage1_loss(model: Model, batch_1d: TokenBatch, batch_3di: TokenBatch) -> LossReport:
    """Both MLM terms on given sub-batches; the schedule feeds the levels
    on alternating steps, this reports them side by side."""
    with T.no_grad():
        l1, n1 = mlm_loss(model, batch_1d)
        l3, n3 = mlm_loss(model, batch_3di)
    return LossReport(
        l_1d_mlm=l1.item(),
        l_3di_mlm=l3.item(),
        counts={"1d_masked": n1, "3di_masked": n3},
    )


def stage2_terms(
    model: Model,
    records: list[PairedRecord],
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
    use_ssm: bool = True,
    use_clr: bool = True,
    cls: bool = False,
    ssm_positive_weight: float = 1.0,
) -> dict:
    """Live tensors for the enabled stage-II terms on one minibatch.

    Ablation flags drop whole terms; they never change how the surviving
    terms build their batches (each term draws from the shared rng in a
    fixed order regardless, so corruption of a surviving term is
    unaffected by which other terms are enabled).
    """
    out: dict = {}
    # Batches are built unconditionally so the rng stream (and therefore the
    # corruption of surviving terms) does not depend on the ablation flags.
    ssm_pairs = build_ssm_pairs(records, rate, rng, vocab, cls)
    clr_1d = make_clr_batch(records, LEVEL_1D, rate, rng, vocab, cls=cls)
    clr_3di = make_clr_batch(records, LEVEL_3DI, rate, rng, vocab, cls=cls)
    if use_ssm:
        logits = ssm_forward(model, ssm_pairs)
        if ssm_positive_weight == 1.0:
            loss = T.bce_with_logits(logits, ssm_pairs.labels)
        else:
            loss = weighted_bce_with_logits(logits, ssm_pairs.labels, ssm_positive_weight)
        out["ssm"] = (loss, logits, ssm_pairs.labels)
    if use_clr:
        out["1d_clr"] = clr_loss(model, clr_1d)
        out["3di_clr"] = clr_loss(model, clr_3di)
    return out


def stage2_loss(
    model: Model,
    records: list[PairedRecord],
    rate: float,
    rng: np.random.Generator,
    vocab: Vocab,
    use_ssm: bool = True,
    use_clr: bool = True,
    cls: bool = False,
) -> LossReport:
    """Report of the enabled stage-II terms (sum = total)."""
    with T.no_grad():
        terms = stage2_terms(model, records, rate, rng, vocab, use_ssm, use_clr, cls)
    report = LossReport()
    if "ssm" in terms:
        loss, logits, labels = terms["ssm"]
        report.l_ssm = loss.item()
        report.counts["ssm_pairs"] = len(labels)
        report.counts["ssm_accuracy"] = ssm_accuracy_from_logits(logits.data, labels)
    if "1d_clr" in terms:
        loss, n = terms["1d_clr"]
        report.l_1d_clr = loss.item()
        report.counts["1d_clr_masked"] = n
    if "3di_clr" in terms:
        loss, n = terms["3di_clr"]
        report.l_3di_clr = loss.item()
        report.counts["3di_clr_masked"] = n
    return report
