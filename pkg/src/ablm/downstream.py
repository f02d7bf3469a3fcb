"""Fine-tuning, evaluation, span infilling, and interpretability exports.

Task kinds
  binary-seq       pooled 2-way classification (antigen binding style)
  multi6-seq       pooled 6-way classification (maturation-state style)
  token-binary     per-position binary labeling (paratope style)
  regression-pair  dual-encoder antibody+antigen affinity regression
  infill           masked-span generation scored by AAR / DIV / self-PPL

The affinity task fuses two independently pooled encoders through a small
MLP head trained with mean squared error. Generative perplexity is the
model's own masked pseudo-likelihood restricted to the residue alphabet
(an external scorer would not run offline), so absolute values are not
comparable across models scored differently.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from . import tensor as T
from .model import (
    Model,
    TokenBatch,
    affinity_output,
    masked_mean,
    mlm_logits,
    pack_batch,
    pooled_head,
    token_head,
)
from .objectives import interleave_levels, make_mlm_batch  # noqa: F401
from .seqio import DatasetSplit, PairedRecord, ResidueSeq, split_dataset
from .tensor import IGNORE_LABEL, Tensor
from .trainer import AdamWState, Checkpoint, adamw_step
from .vocab import AA_LETTERS, DEFAULT_VOCAB, LEVEL_1D, MASK_ID, TYPE_1D

KIND_BINARY = "binary-seq"
KIND_MULTI6 = "multi6-seq"
KIND_TOKEN = "token-binary"
KIND_REGRESSION = "regression-pair"
KIND_INFILL = "infill"

_HEAD_FOR_KIND = {KIND_BINARY: "binding", KIND_MULTI6: "maturation", KIND_TOKEN: "paratope"}
_N_CLASSES = {KIND_BINARY: 2, KIND_MULTI6: 6}


@dataclass
class TaskExample:
    seq_id: str
    seq: str
    label: object = None
    antigen: str | None = None
    struct3di: str | None = None


@dataclass
class TaskDataset:
    kind: str
    examples: list[TaskExample]
    split: DatasetSplit | None = None

    def __post_init__(self):
        if self.kind not in (KIND_BINARY, KIND_MULTI6, KIND_TOKEN, KIND_REGRESSION, KIND_INFILL):
            raise ValueError(f"unknown task kind {self.kind!r}")
        ids = [e.seq_id for e in self.examples]
        if len(set(ids)) != len(ids):
            raise ValueError("task example ids must be unique")
        for e in self.examples:
            self._validate(e)

    def _validate(self, e: TaskExample):
        if self.kind == KIND_BINARY and e.label not in (0, 1):
            raise ValueError(f"{e.seq_id}: binary label must be 0/1")
        if self.kind == KIND_MULTI6 and e.label not in range(6):
            raise ValueError(f"{e.seq_id}: 6-way label must lie in [0, 6)")
        if self.kind == KIND_TOKEN:
            lab = np.asarray(e.label)
            if lab.shape != (len(e.seq),) or not np.isin(lab, (0, 1)).all():
                raise ValueError(f"{e.seq_id}: token labels must be 0/1 aligned to the sequence")
        if self.kind == KIND_REGRESSION:
            if e.antigen is None:
                raise ValueError(f"{e.seq_id}: regression pairs need an antigen sequence")
            if e.label is None or not np.isfinite(float(e.label)):
                raise ValueError(f"{e.seq_id}: affinity label must be finite")

    def by_id(self) -> dict[str, TaskExample]:
        return {e.seq_id: e for e in self.examples}

    def with_default_split(self, fractions=(0.7, 0.15, 0.15), seed: int = 0) -> "TaskDataset":
        ids = [e.seq_id for e in self.examples]
        return TaskDataset(self.kind, self.examples, split_dataset(ids, fractions, seed))


@dataclass
class MetricsReport:
    auc: float | None = None
    f1: float | None = None
    mcc: float | None = None
    acc: float | None = None
    pearson: float | None = None
    spearman: float | None = None
    aar: float | None = None
    div: float | None = None
    ppl: float | None = None
    flags: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {}
        for name in ("auc", "f1", "mcc", "acc", "pearson", "spearman", "aar", "div", "ppl"):
            v = getattr(self, name)
            if v is not None:
                out[name] = v
        if self.flags:
            out["flags"] = dict(self.flags)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class FinetuneConfig:
    lr: float = 1e-4
    weight_decay: float = 0.01
    batch_size: int = 8
    max_epochs: int = 20
    patience: int = 3
    seed: int = 0


# ---------------------------------------------------------------------------
# Batching helpers
# ---------------------------------------------------------------------------


def _pack_plain(seqs: list[str], type_id: int = TYPE_1D, cls: bool = False) -> TokenBatch:
    vocab = DEFAULT_VOCAB
    rows = []
    for s in seqs:
        ids = vocab.encode_residues(s) if type_id == TYPE_1D else vocab.encode_struct(s)
        types = np.full(len(ids), type_id, dtype=np.int64)
        labels = np.full(len(ids), IGNORE_LABEL, dtype=np.int64)
        if cls:
            from .objectives import _with_cls

            ids, types, labels = _with_cls(ids, types, labels, type_id)
        rows.append((ids, types, labels))
    return pack_batch(rows)


def _token_label_matrix(examples: list[TaskExample], seq_len: int) -> np.ndarray:
    labels = np.full((len(examples), seq_len), IGNORE_LABEL, dtype=np.int64)
    for r, e in enumerate(examples):
        lab = np.asarray(e.label, dtype=np.int64)
        labels[r, : len(lab)] = lab
    return labels


def _batches(items: list, size: int):
    for lo in range(0, len(items), size):
        yield items[lo : lo + size]


# ---------------------------------------------------------------------------
# Forward passes per task
# ---------------------------------------------------------------------------


def _classification_scores(model: Model, examples: list[TaskExample], head: str, batch_size: int):
    """Softmax probabilities [N, C] for pooled classification heads."""
    probs = []
    cls = model.config.pool == "cls"
    with T.no_grad():
        for chunk in _batches(examples, batch_size):
            batch = _pack_plain([e.seq for e in chunk], cls=cls)
            hidden, _ = model.forward(batch)
            logits = pooled_head(hidden, batch.pad_mask, model.weights, head, model.config)
            probs.append(T.softmax(logits, axis=-1).data)
    return np.concatenate(probs, axis=0)


def _token_scores(model: Model, examples: list[TaskExample], batch_size: int):
    """Per-position class-1 probabilities and labels, PAD excluded."""
    scores, labels = [], []
    with T.no_grad():
        for chunk in _batches(examples, batch_size):
            batch = _pack_plain([e.seq for e in chunk])
            hidden, _ = model.forward(batch)
            logits = token_head(hidden, model.weights)
            p = T.softmax(logits, axis=-1).data[:, :, 1]
            lab = _token_label_matrix(chunk, batch.seq_len)
            keep = lab != IGNORE_LABEL
            scores.append(p[keep])
            labels.append(lab[keep])
    return np.concatenate(scores), np.concatenate(labels)


def _affinity_predictions(
    model_ab: Model, model_ag: Model, examples: list[TaskExample], batch_size: int
):
    preds = []
    with T.no_grad():
        for chunk in _batches(examples, batch_size):
            ab = _pack_plain([e.seq for e in chunk], cls=model_ab.config.pool == "cls")
            ag = _pack_plain([e.antigen for e in chunk], cls=model_ag.config.pool == "cls")
            h_ab, _ = model_ab.forward(ab)
            h_ag, _ = model_ag.forward(ag)
            out = affinity_output(
                masked_mean(h_ab, ab.pad_mask), masked_mean(h_ag, ag.pad_mask), model_ab.weights
            )
            preds.append(out.data)
    return np.concatenate(preds)


# ---------------------------------------------------------------------------
# Metric assembly
# ---------------------------------------------------------------------------


def _binary_report(scores: np.ndarray, labels: np.ndarray) -> MetricsReport:
    preds = (scores > 0.5).astype(int)
    report = MetricsReport()
    report.auc, a_flag = M.auc(scores, labels, with_flag=True)
    report.f1, f_flag = M.f1(preds, labels, with_flag=True)
    report.mcc, m_flag = M.mcc(preds, labels, with_flag=True)
    report.acc = M.acc(preds, labels)
    for name, flag in (("auc", a_flag), ("f1", f_flag), ("mcc", m_flag)):
        if flag:
            report.flags[name + "_degenerate"] = True
    return report


def eval_task(model: Model, dataset: TaskDataset, subset: str = "test", batch_size: int = 8) -> MetricsReport:
    """Metrics of a tuned single-encoder model on one split subset."""
    examples = _subset_examples(dataset, subset)
    if dataset.kind == KIND_BINARY:
        probs = _classification_scores(model, examples, "binding", batch_size)
        labels = np.array([e.label for e in examples])
        return _binary_report(probs[:, 1], labels)
    if dataset.kind == KIND_MULTI6:
        probs = _classification_scores(model, examples, "maturation", batch_size)
        labels = np.array([e.label for e in examples])
        report = MetricsReport()
        report.acc = M.acc(probs.argmax(axis=1), labels)
        return report
    if dataset.kind == KIND_TOKEN:
        scores, labels = _token_scores(model, examples, batch_size)
        return _binary_report(scores, labels)
    raise ValueError(f"eval_task does not handle kind {dataset.kind!r}")


def eval_affinity(
    model_ab: Model, model_ag: Model, dataset: TaskDataset, subset: str = "test", batch_size: int = 8
) -> MetricsReport:
    examples = _subset_examples(dataset, subset)
    preds = _affinity_predictions(model_ab, model_ag, examples, batch_size)
    labels = np.array([float(e.label) for e in examples])
    report = MetricsReport()
    report.pearson, p_flag = M.pearson(preds, labels, with_flag=True)
    report.spearman, s_flag = M.spearman(preds, labels, with_flag=True)
    if p_flag:
        report.flags["pearson_degenerate"] = True
    if s_flag:
        report.flags["spearman_degenerate"] = True
    return report


def _subset_examples(dataset: TaskDataset, subset: str) -> list[TaskExample]:
    if dataset.split is None:
        raise ValueError("dataset has no split; call with_default_split first")
    by_id = dataset.by_id()
    ids = getattr(dataset.split, subset)
    return [by_id[i] for i in ids]


def _primary_metric(kind: str, report: MetricsReport) -> float:
    if kind == KIND_BINARY or kind == KIND_TOKEN:
        return report.auc
    if kind == KIND_MULTI6:
        return report.acc
    if kind == KIND_REGRESSION:
        return report.pearson
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# Fine-tuning
# ---------------------------------------------------------------------------


def finetune(ckpt: Checkpoint, dataset: TaskDataset, config: FinetuneConfig | None = None):
    """Tune the full encoder plus the task head; early stop on the val
    metric; return (tuned model, test MetricsReport)."""
    if dataset.kind not in _HEAD_FOR_KIND:
        raise ValueError(
            f"finetune handles classification/labeling kinds, not {dataset.kind!r}"
        )
    config = config or FinetuneConfig()
    model = ckpt.model()
    head = _HEAD_FOR_KIND[dataset.kind]
    train_examples = _subset_examples(dataset, "train")
    moments = AdamWState.for_weights(model.weights)
    params = model.params()
    # token labels align position-for-position, so the labeling task never
    # sees a CLS slot; pooled tasks follow the model's pooling mode
    cls = model.config.pool == "cls" and dataset.kind != KIND_TOKEN

    best_metric, best_weights, stale, opt_step = -np.inf, None, 0, 0
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng((config.seed, 77, epoch))
        order = rng.permutation(len(train_examples))
        for chunk_idx in _batches(list(order), config.batch_size):
            chunk = [train_examples[i] for i in chunk_idx]
            batch = _pack_plain([e.seq for e in chunk], cls=cls)
            for p in params:
                p.zero_grad()
            hidden, _ = model.forward(batch)
            if dataset.kind == KIND_TOKEN:
                logits = token_head(hidden, model.weights)
                b, length, c = logits.shape
                flat = T.reshape(logits, (b * length, c))
                loss = T.cross_entropy(flat, _token_label_matrix(chunk, length).ravel())
            else:
                logits = pooled_head(hidden, batch.pad_mask, model.weights, head, model.config)
                loss = T.cross_entropy(logits, np.array([e.label for e in chunk]))
            loss.backward(params=params)
            opt_step += 1
            adamw_step(model.weights, moments, opt_step, config.lr, config.weight_decay)

        val = _primary_metric(dataset.kind, eval_task(model, dataset, "val", config.batch_size))
        if val > best_metric + 1e-9:
            best_metric, stale = val, 0
            best_weights = {k: p.data.copy() for k, p in model.weights.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_weights is not None:
        for k, p in model.weights.items():
            p.data = best_weights[k]
    return model, eval_task(model, dataset, "test", config.batch_size)


def finetune_affinity(
    ckpt_ab: Checkpoint,
    ckpt_ag: Checkpoint,
    dataset: TaskDataset,
    config: FinetuneConfig | None = None,
):
    """Dual-encoder regression: both encoders and the fusion head train
    under mean squared error; returns ((ab, ag) models, test report)."""
    if dataset.kind != KIND_REGRESSION:
        raise ValueError("finetune_affinity needs a regression-pair dataset")
    config = config or FinetuneConfig()
    model_ab = ckpt_ab.model()
    model_ag = ckpt_ag.model()
    merged = {f"ab.{k}": p for k, p in model_ab.weights.items()}
    merged.update({f"ag.{k}": p for k, p in model_ag.weights.items()})
    moments = AdamWState.for_weights(merged)
    params = list(merged.values())
    train_examples = _subset_examples(dataset, "train")

    best_metric, best_data, stale, opt_step = -np.inf, None, 0, 0
    for epoch in range(config.max_epochs):
        rng = np.random.default_rng((config.seed, 78, epoch))
        order = rng.permutation(len(train_examples))
        for chunk_idx in _batches(list(order), config.batch_size):
            chunk = [train_examples[i] for i in chunk_idx]
            cls = model_ab.config.pool == "cls"
            ab = _pack_plain([e.seq for e in chunk], cls=cls)
            ag = _pack_plain([e.antigen for e in chunk], cls=model_ag.config.pool == "cls")
            for p in params:
                p.zero_grad()
            h_ab, _ = model_ab.forward(ab)
            h_ag, _ = model_ag.forward(ag)
            pred = affinity_output(
                masked_mean(h_ab, ab.pad_mask), masked_mean(h_ag, ag.pad_mask), model_ab.weights
            )
            target = np.array([float(e.label) for e in chunk])
            loss = T.tensor_mean(T.power(T.sub(pred, Tensor(target)), 2.0))
            loss.backward(params=params)
            opt_step += 1
            adamw_step(merged, moments, opt_step, config.lr, config.weight_decay)

        val = eval_affinity(model_ab, model_ag, dataset, "val", config.batch_size).pearson
        if val > best_metric + 1e-9:
            best_metric, stale = val, 0
            best_data = {k: p.data.copy() for k, p in merged.items()}
        else:
            stale += 1
            if stale >= config.patience:
                break

    if best_data is not None:
        for k, p in merged.items():
            p.data = best_data[k]
    return (model_ab, model_ag), eval_affinity(model_ab, model_ag, dataset, "test", config.batch_size)


# ---------------------------------------------------------------------------
# Span infilling and its metrics
# ---------------------------------------------------------------------------


def infill_cdr(
    model: Model,
    record: PairedRecord,
    span: tuple[int, int],
    n_samples: int,
    temperature: float = 1.0,
    rng: np.random.Generator | None = None,
    mode: str = "sample",
) -> list[str]:
    """Replace ``span`` with MASK in both levels, run one forward pass over
    the interleaved two-level input, and decode the residue logits per
    position (argmax or temperature sampling, each position independent).
    Returns ``n_samples`` strings.
    """
    start, end = span
    n = len(record)
    if not (0 <= start < end <= n):
        raise ValueError(f"span [{start}, {end}) invalid for record of length {n}")
    if mode not in ("greedy", "sample"):
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "sample":
        if rng is None:
            raise ValueError("sampling mode needs an rng")
        if temperature <= 0:
            raise ValueError("temperature must be positive")

    vocab = DEFAULT_VOCAB
    t1d = vocab.encode_residues(record.residues.residues)
    t3di = vocab.encode_struct(record.struct3di)
    t1d[start:end] = MASK_ID
    t3di[start:end] = MASK_ID
    ids, types = interleave_levels(t1d, t3di)
    labels = np.full(2 * n, IGNORE_LABEL, dtype=np.int64)
    batch = pack_batch([(ids, types, labels)])

    with T.no_grad():
        hidden, _ = model.forward(batch)
        logits = mlm_logits(hidden, model.weights).data[0]
    lo, hi = vocab.level_range(LEVEL_1D)
    span_logits = logits[2 * start : 2 * end : 2, lo:hi]  # residue slots of the span

    if mode == "greedy":
        letters = "".join(AA_LETTERS[c] for c in span_logits.argmax(axis=1))
        return [letters] * n_samples

    shifted = (span_logits - span_logits.max(axis=1, keepdims=True)) / temperature
    probs = np.exp(shifted)
    probs /= probs.sum(axis=1, keepdims=True)
    out = []
    for _ in range(n_samples):
        chars = [AA_LETTERS[rng.choice(20, p=probs[i])] for i in range(end - start)]
        out.append("".join(chars))
    return out


def aar(samples: list[str], truth: str) -> float:
    """Mean per-position identity of the samples against the truth."""
    if not samples:
        raise ValueError("need at least one sample")
    for s in samples:
        if len(s) != len(truth):
            raise ValueError("sample/truth length mismatch")
    per = [sum(a == b for a, b in zip(s, truth)) / len(truth) for s in samples]
    return float(np.mean(per))


def span_exact_match(samples: list[str], truth: str) -> float:
    """Secondary generation number: fraction of samples equal to the truth."""
    if not samples:
        raise ValueError("need at least one sample")
    return float(np.mean([s == truth for s in samples]))


def div(samples: list[str]) -> float:
    """One minus the mean pairwise identity over unordered sample pairs."""
    if len(samples) < 2:
        raise ValueError("diversity needs at least two samples")
    length = len(samples[0])
    for s in samples:
        if len(s) != length:
            raise ValueError("samples must share one length")
    sims = []
    for i in range(len(samples)):
        for j in range(i + 1, len(samples)):
            sims.append(sum(a == b for a, b in zip(samples[i], samples[j])) / length)
    return float(1.0 - np.mean(sims))


def self_ppl(model: Model, seq: str) -> float:
    """Masked pseudo-perplexity over the residue alphabet.

    Position i is scored by masking it, re-encoding, and reading the
    softmax over the 20 residue ids; all L masked variants run as one
    batch.
    """
    vocab = DEFAULT_VOCAB
    tokens = vocab.encode_residues(seq)
    n = len(tokens)
    rows = []
    for i in range(n):
        ids = tokens.copy()
        ids[i] = MASK_ID
        types = np.full(n, TYPE_1D, dtype=np.int64)
        labels = np.full(n, IGNORE_LABEL, dtype=np.int64)
        rows.append((ids, types, labels))
    batch = pack_batch(rows)
    with T.no_grad():
        hidden, _ = model.forward(batch)
        logits = mlm_logits(hidden, model.weights).data
    lo, hi = vocab.level_range(LEVEL_1D)
    total = 0.0
    for i in range(n):
        z = logits[i, i, lo:hi]
        z = z - z.max()
        logp = z - np.log(np.exp(z).sum())
        total += logp[tokens[i] - lo]
    return float(np.exp(-total / n))


# ---------------------------------------------------------------------------
# Interpretability exports
# ---------------------------------------------------------------------------


def export_embeddings(model: Model, seqs: list[ResidueSeq], path, batch_size: int = 16) -> None:
    """Mean-pooled last-layer vectors, one `id\\tv1\\t...` line per input."""
    with open(path, "w", encoding="utf-8") as fh, T.no_grad():
        for chunk in _batches(seqs, batch_size):
            batch = _pack_plain([s.residues for s in chunk])
            hidden, _ = model.forward(batch)
            pooled = masked_mean(hidden, batch.pad_mask).data
            for s, vec in zip(chunk, pooled):
                fh.write(s.id + "\t" + "\t".join(repr(float(v)) for v in vec) + "\n")


def export_attention(model: Model, seq: str, layer: int, head: int, path) -> None:
    """L x L row-stochastic attention map of one layer/head as TSV."""
    cfg = model.config
    if not 0 <= layer < cfg.n_layers:
        raise ValueError(f"layer {layer} outside [0, {cfg.n_layers})")
    if not 0 <= head < cfg.n_heads:
        raise ValueError(f"head {head} outside [0, {cfg.n_heads})")
    batch = _pack_plain([seq])
    with T.no_grad():
        _, maps = model.forward(batch, want_attention=True)
    mat = maps[layer][0, head]
    with open(path, "w", encoding="utf-8") as fh:
        for row in mat:
            fh.write("\t".join(repr(float(v)) for v in row) + "\n")


# ---------------------------------------------------------------------------
# Task files:   binary/multi6   id <TAB> seq <TAB> label
#               token-binary    id <TAB> seq <TAB> 0/1 string
#               regression-pair id <TAB> ab_seq <TAB> ag_seq <TAB> value
# ---------------------------------------------------------------------------


def load_task_dataset(path, kind: str) -> TaskDataset:
    examples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if kind in (KIND_BINARY, KIND_MULTI6):
                    rid, seq, label = parts
                    examples.append(TaskExample(rid, seq, int(label)))
                elif kind == KIND_TOKEN:
                    rid, seq, labstr = parts
                    labels = np.array([int(c) for c in labstr], dtype=np.int64)
                    examples.append(TaskExample(rid, seq, labels))
                elif kind == KIND_REGRESSION:
                    rid, ab_seq, ag_seq, value = parts
                    examples.append(TaskExample(rid, ab_seq, float(value), antigen=ag_seq))
                else:
                    raise ValueError(f"no file format for kind {kind!r}")
            except ValueError as e:
                raise ValueError(f"{path}:{lineno}: {e}") from None
    return TaskDataset(kind, examples)
