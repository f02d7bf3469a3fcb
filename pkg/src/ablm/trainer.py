"""Two-stage training schedule, AdamW, warmup, and binary checkpoints.

Determinism contract: every random draw comes from a generator derived as
``default_rng((seed, stream, step))``, so the whole run is a pure function
of (seed, config, corpus). Resuming from a checkpoint at step k reproduces
the unbroken run bit-exactly because no generator state is carried across
steps.
"""

from __future__ import annotations

import json
import struct
import time
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, clone_weights, init_weights
from .objectives import (
    DEFAULT_MASK_RATE,
    LossReport,
    make_mlm_batch,
    mlm_loss,
    ssm_accuracy_from_logits,
    stage2_terms,
)
from .seqio import PairedRecord
from .tensor import Tensor
from .vocab import DEFAULT_VOCAB, LEVEL_1D, LEVEL_3DI

STAGE_I = "I"
STAGE_II = "II"

# rng stream tags (second entry of the seed tuple)
_STREAM_STAGE1 = 11
_STREAM_STAGE2 = 22
_STREAM_EVAL = 33

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class TrainConfig:
    stage: str = STAGE_I
    base_lr: float | None = None  # stage default when None
    weight_decay: float = 0.01
    warmup_steps: int = 2000
    total_steps: int = 2000
    batch_size: int = 8
    seed: int = 0
    mask_rate: float = DEFAULT_MASK_RATE
    mlm_intersperse_period: int = 4  # stage II: every period-th step is 1D-MLM
    use_ssm: bool = True
    use_clr: bool = True
    ssm_positive_weight: float = 1.0  # >1 upweights matched pairs in the SSM loss
    lr_decay: bool = False  # linear decay to 0 after warmup when True
    checkpoint_every: int | None = None

    def __post_init__(self):
        if self.stage not in (STAGE_I, STAGE_II):
            raise ValueError(f"stage must be '{STAGE_I}' or '{STAGE_II}'")
        if self.base_lr is None:
            self.base_lr = 4e-4 if self.stage == STAGE_I else 1e-3
        if self.base_lr <= 0 or self.total_steps <= 0 or self.warmup_steps < 0:
            raise ValueError("learning rate and step counts must be positive")
        if self.mlm_intersperse_period < 1:
            raise ValueError("mlm_intersperse_period must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


def adamw_update(theta, grad, m, v, step, lr, weight_decay):
    """One AdamW update on raw arrays; returns (theta, m, v).

    Bias-corrected moments; decoupled decay enters the same lr-scaled
    update: theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
    """
    if step < 1:
        raise ValueError("AdamW step index starts at 1")
    m = ADAM_BETA1 * m + (1.0 - ADAM_BETA1) * grad
    v = ADAM_BETA2 * v + (1.0 - ADAM_BETA2) * grad * grad
    m_hat = m / (1.0 - ADAM_BETA1**step)
    v_hat = v / (1.0 - ADAM_BETA2**step)
    theta = theta - lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + weight_decay * theta)
    return theta, m, v


@dataclass
class AdamWState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_weights(cls, weights: dict[str, Tensor]) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(p.data) for k, p in weights.items()},
            v={k: np.zeros_like(p.data) for k, p in weights.items()},
        )


def adamw_step(
    weights: dict[str, Tensor],
    moments: AdamWState,
    step: int,
    lr: float,
    weight_decay: float,
) -> None:
    """Apply one update across all parameters in place.

    A NaN/Inf gradient anywhere aborts the whole step before any
    parameter has been touched.
    """
    for name, p in weights.items():
        g = p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, p in weights.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.data, moments.m[name], moments.v[name] = adamw_update(
            p.data, g, moments.m[name], moments.v[name], step, lr, weight_decay
        )


def lr_at(step: int, config: TrainConfig) -> float:
    """Linear 0 -> base_lr ramp over warmup, then constant (or linear decay
    to 0 at total_steps when ``lr_decay`` is set)."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if config.warmup_steps > 0 and step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    if not config.lr_decay:
        return config.base_lr
    span = max(1, config.total_steps - config.warmup_steps)
    frac = min(1.0, (step - config.warmup_steps) / span)
    return config.base_lr * (1.0 - frac)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_MAGIC = b"ABLM"
_VERSION = 1


@dataclass
class Checkpoint:
    config: ModelConfig
    weights: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    seed: int
    stage: str

    def model(self) -> Model:
        weights = {k: Tensor(v.copy(), requires_grad=True) for k, v in self.weights.items()}
        return Model(self.config, weights)


def checkpoint_from_state(
    model: Model, moments: AdamWState, step: int, seed: int, stage: str
) -> Checkpoint:
    return Checkpoint(
        config=model.config,
        weights={k: p.data.copy() for k, p in model.weights.items()},
        adam_m={k: a.copy() for k, a in moments.m.items()},
        adam_v={k: a.copy() for k, a in moments.v.items()},
        step=step,
        seed=seed,
        stage=stage,
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    """Little-endian binary: magic, version, header length, JSON header
    (config, step, seed, stage, tensor table, blob CRC32), raw blob."""
    tensors = []
    blob_parts = []
    offset = 0
    for kind, table in (("w", ckpt.weights), ("m", ckpt.adam_m), ("v", ckpt.adam_v)):
        for name, arr in table.items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            tensors.append(
                {"name": name, "kind": kind, "shape": list(a.shape), "offset": offset}
            )
            blob_parts.append(a.tobytes())
            offset += a.nbytes
    blob = b"".join(blob_parts)
    header = {
        "config": ckpt.config.to_dict(),
        "step": ckpt.step,
        "seed": ckpt.seed,
        "stage": ckpt.stage,
        "tensors": tensors,
        "blob_size": len(blob),
        "blob_crc32": zlib.crc32(blob) & 0xFFFFFFFF,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint: {e}") from e
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if 16 + hlen > len(raw):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    blob = raw[16 + hlen :]
    try:
        blob_size = header["blob_size"]
        crc = header["blob_crc32"]
        tensors = header["tensors"]
        config = ModelConfig(**header["config"])
        step, seed, stage = int(header["step"]), int(header["seed"]), header["stage"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from e
    if len(blob) != blob_size:
        raise CheckpointError("truncated checkpoint blob")
    if (zlib.crc32(blob) & 0xFFFFFFFF) != crc:
        raise CheckpointError("checkpoint blob failed its CRC check")

    tables = {"w": {}, "m": {}, "v": {}}
    for entry in tensors:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=count, offset=start).reshape(shape)
        tables[entry["kind"]][entry["name"]] = arr.astype(np.float64)
    if set(tables["w"]) != set(tables["m"]) or set(tables["w"]) != set(tables["v"]):
        raise CheckpointError("checkpoint parameter/moment tables disagree")
    return Checkpoint(config, tables["w"], tables["m"], tables["v"], step, seed, stage)


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _sample_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    return rng.choice(n, size=batch_size, replace=n < batch_size)


def _format_log(entry: dict) -> str:
    parts = [f"step={entry['step']}"]
    parts.append(f"total={entry['total']:.6f}")
    for k, v in entry.items():
        if k.startswith("l_"):
            parts.append(f"{k}={v:.6f}")
    parts.append(f"lr={entry['lr']:.3e}")
    parts.append(f"wall_ms={entry['wall_ms']:.1f}")
    return " ".join(parts)


def train_stage1(
    corpus_1d: list[str],
    corpus_3di: list[str],
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    init: Checkpoint | None = None,
    log_fn=None,
    out_path=None,
) -> tuple[Checkpoint, list[dict]]:
    """Alternating 1D/3Di masked-token training (even steps consume 1D).

    Returns the final checkpoint and one log entry per executed step.
    When ``init`` is given, training resumes at ``init.step``.
    """
    if not corpus_1d or not corpus_3di:
        raise ValueError("stage I needs nonempty 1D and 3Di corpora")
    vocab = DEFAULT_VOCAB
    if init is not None:
        model = init.model()
        moments = AdamWState(
            m={k: a.copy() for k, a in init.adam_m.items()},
            v={k: a.copy() for k, a in init.adam_v.items()},
        )
        start_step = init.step
    else:
        model_config = model_config or ModelConfig()
        model = Model(model_config, init_weights(model_config, config.seed))
        moments = AdamWState.for_weights(model.weights)
        start_step = 0

    history: list[dict] = []
    params = model.params()
    use_cls = model.config.pool == "cls"
    for step in range(start_step, config.total_steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng((config.seed, _STREAM_STAGE1, step))
        level = LEVEL_1D if step % 2 == 0 else LEVEL_3DI
        corpus = corpus_1d if level == LEVEL_1D else corpus_3di
        idx = _sample_indices(rng, len(corpus), config.batch_size)
        batch = make_mlm_batch(
            [corpus[i] for i in idx], level, config.mask_rate, rng, vocab, cls=use_cls
        )

        for p in params:
            p.zero_grad()
        loss, n_masked = mlm_loss(model, batch)
        loss.backward(params=params)
        lr = lr_at(step + 1, config)
        adamw_step(model.weights, moments, step + 1, lr, config.weight_decay)

        entry = {
            "step": step,
            "total": loss.item(),
            ("l_1d_mlm" if level == LEVEL_1D else "l_3di_mlm"): loss.item(),
            "n_masked": n_masked,
            "lr": lr,
            "wall_ms": (time.perf_counter() - t0) * 1e3,
        }
        history.append(entry)
        if log_fn is not None:
            log_fn(_format_log(entry))
        if (
            out_path is not None
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
        ):
            save_checkpoint(
                checkpoint_from_state(model, moments, step + 1, config.seed, STAGE_I), out_path
            )

    ckpt = checkpoint_from_state(model, moments, config.total_steps, config.seed, STAGE_I)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt, history


def train_stage2(
    corpus: list[PairedRecord],
    init: Checkpoint | None,
    config: TrainConfig,
    model_config: ModelConfig | None = None,
    from_scratch: bool = False,
    log_fn=None,
    out_path=None,
) -> tuple[Checkpoint, list[dict]]:
    """Stage II: matching + cross-level reconstruction on paired records,
    with plain 1D-MLM interspersed at step indices == 0 mod period."""
    if not corpus:
        raise ValueError("stage II needs a nonempty paired corpus")
    if init is None and not from_scratch:
        raise ValueError("stage II requires a stage-I checkpoint (or from_scratch=True)")
    vocab = DEFAULT_VOCAB
    if init is not None:
        model = init.model()
        start_step = init.step if init.stage == STAGE_II else 0
    else:
        model_config = model_config or ModelConfig()
        model = Model(model_config, init_weights(model_config, config.seed))
        start_step = 0
    moments = (
        AdamWState(
            m={k: a.copy() for k, a in init.adam_m.items()},
            v={k: a.copy() for k, a in init.adam_v.items()},
        )
        if init is not None and init.stage == STAGE_II
        else AdamWState.for_weights(model.weights)
    )

    seqs_1d = [r.residues.residues for r in corpus]
    params = model.params()
    use_cls = model.config.pool == "cls"
    history: list[dict] = []
    for step in range(start_step, config.total_steps):
        t0 = time.perf_counter()
        rng = np.random.default_rng((config.seed, _STREAM_STAGE2, step))
        idx = _sample_indices(rng, len(corpus), config.batch_size)
        for p in params:
            p.zero_grad()

        entry: dict = {"step": step}
        if step % config.mlm_intersperse_period == 0:
            batch = make_mlm_batch(
                [seqs_1d[i] for i in idx], LEVEL_1D, config.mask_rate, rng, vocab, cls=use_cls
            )
            loss, n_masked = mlm_loss(model, batch)
            entry["l_1d_mlm"] = loss.item()
            entry["n_masked"] = n_masked
            total = loss
        else:
            records = [corpus[i] for i in idx]
            terms = stage2_terms(
                model,
                records,
                config.mask_rate,
                rng,
                vocab,
                use_ssm=config.use_ssm,
                use_clr=config.use_clr,
                cls=use_cls,
                ssm_positive_weight=config.ssm_positive_weight,
            )
            total = None
            if "ssm" in terms:
                ssm, logits, labels = terms["ssm"]
                entry["l_ssm"] = ssm.item()
                entry["ssm_accuracy"] = ssm_accuracy_from_logits(logits.data, labels)
                total = ssm
            if "1d_clr" in terms:
                l1, _ = terms["1d_clr"]
                entry["l_1d_clr"] = l1.item()
                total = l1 if total is None else T.add(total, l1)
            if "3di_clr" in terms:
                l3, _ = terms["3di_clr"]
                entry["l_3di_clr"] = l3.item()
                total = l3 if total is None else T.add(total, l3)
            if total is None:
                raise ValueError("both objectives disabled; nothing to train on")

        total.backward(params=params)
        lr = lr_at(step + 1, config)
        adamw_step(model.weights, moments, step + 1, lr, config.weight_decay)

        entry["total"] = total.item()
        entry["lr"] = lr
        entry["wall_ms"] = (time.perf_counter() - t0) * 1e3
        history.append(entry)
        if log_fn is not None:
            log_fn(_format_log(entry))
        if (
            out_path is not None
            and config.checkpoint_every
            and (step + 1) % config.checkpoint_every == 0
        ):
            save_checkpoint(
                checkpoint_from_state(model, moments, step + 1, config.seed, STAGE_II), out_path
            )

    ckpt = checkpoint_from_state(model, moments, config.total_steps, config.seed, STAGE_II)
    if out_path is not None:
        save_checkpoint(ckpt, out_path)
    return ckpt, history


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def evaluate_mlm(
    model: Model, corpus: list[str], level: str, rate: float, seed: int, batch_size: int = 16
) -> LossReport:
    """Corpus-wide masked-token loss with a fixed evaluation rng."""
    vocab = DEFAULT_VOCAB
    rng = np.random.default_rng((seed, _STREAM_EVAL, 0 if level == LEVEL_1D else 1))
    total, count = 0.0, 0
    with T.no_grad():
        for lo in range(0, len(corpus), batch_size):
            batch = make_mlm_batch(corpus[lo : lo + batch_size], level, rate, rng, vocab)
            loss, n = mlm_loss(model, batch)
            total += loss.item() * n
            count += n
    report = LossReport()
    value = total / max(1, count)
    if level == LEVEL_1D:
        report.l_1d_mlm = value
    else:
        report.l_3di_mlm = value
    report.counts[f"{level}_masked"] = count
    return report


def evaluate_stage2(
    model: Model,
    corpus: list[PairedRecord],
    rate: float,
    seed: int,
    batch_size: int = 8,
    n_batches: int = 16,
) -> dict:
    """SSM accuracy and CLR losses over fresh seeded evaluation batches."""
    vocab = DEFAULT_VOCAB
    accs, ssm_losses = [], []
    clr1_total = clr1_n = clr3_total = clr3_n = 0.0
    with T.no_grad():
        for b in range(n_batches):
            rng = np.random.default_rng((seed, _STREAM_EVAL, 100 + b))
            idx = _sample_indices(rng, len(corpus), batch_size)
            records = [corpus[i] for i in idx]
            terms = stage2_terms(model, records, rate, rng, vocab)
            ssm, logits, labels = terms["ssm"]
            ssm_losses.append(ssm.item())
            accs.append(ssm_accuracy_from_logits(logits.data, labels))
            l1, n1 = terms["1d_clr"]
            l3, n3 = terms["3di_clr"]
            clr1_total += l1.item() * n1
            clr1_n += n1
            clr3_total += l3.item() * n3
            clr3_n += n3
    return {
        "ssm_accuracy": float(np.mean(accs)),
        "l_ssm": float(np.mean(ssm_losses)),
        "l_1d_clr": clr1_total / max(1.0, clr1_n),
        "l_3di_clr": clr3_total / max(1.0, clr3_n),
    }
