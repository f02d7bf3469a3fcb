"""Command-line driver for the full pipeline.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Standard output carries machine-readable payload only (JSON objects, TSV,
raw strings); every diagnostic goes to standard error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import downstream as D
from . import seqio
from . import structure
from .model import Model, ModelConfig
from .seqio import ParseError
from .trainer import (
    STAGE_I,
    STAGE_II,
    Checkpoint,
    CheckpointError,
    TrainConfig,
    checkpoint_from_state,
    AdamWState,
    evaluate_mlm,
    evaluate_stage2,
    load_checkpoint,
    save_checkpoint,
    train_stage1,
    train_stage2,
)
from .vocab import LEVEL_1D, LEVEL_3DI


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


TASK_KINDS = {
    "binding": D.KIND_BINARY,
    "maturation": D.KIND_MULTI6,
    "paratope": D.KIND_TOKEN,
    "affinity": D.KIND_REGRESSION,
}

TASK_FILES = {
    "binding": "binding.tsv",
    "maturation": "maturation.tsv",
    "paratope": "paratope.tsv",
    "affinity": "affinity.tsv",
}


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _emit(payload) -> None:
    print(json.dumps(payload, sort_keys=True))


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with its own codes."""

    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# Run configuration (JSON)
# ---------------------------------------------------------------------------

_SECTION_FIELDS = {
    "model": {f.name for f in dataclasses.fields(ModelConfig)},
    "train": {f.name for f in dataclasses.fields(TrainConfig)},
    "finetune": {f.name for f in dataclasses.fields(D.FinetuneConfig)},
}


def load_run_config(path) -> dict:
    """Parse and validate the JSON config document; unknown keys reject."""
    try:
        raw = Path(path).read_text(encoding="utf-8")
        doc = json.loads(raw)
    except OSError as e:
        raise DataError(f"cannot read config: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"config is not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise DataError("config must be a JSON object")
    for section, content in doc.items():
        if section not in _SECTION_FIELDS:
            raise DataError(f"unknown config section {section!r}")
        if not isinstance(content, dict):
            raise DataError(f"config section {section!r} must be an object")
        unknown = set(content) - _SECTION_FIELDS[section]
        if unknown:
            raise DataError(f"unknown keys in config section {section!r}: {sorted(unknown)}")
    _log("config " + json.dumps(doc, sort_keys=True))
    return doc


def _model_config(doc: dict) -> ModelConfig:
    return ModelConfig(**doc.get("model", {}))


def _train_config(doc: dict, stage: str, overrides: dict) -> TrainConfig:
    fields = dict(doc.get("train", {}))
    fields["stage"] = stage
    fields.update(overrides)
    return TrainConfig(**fields)


# ---------------------------------------------------------------------------
# Subcommand implementations
# ---------------------------------------------------------------------------


def _read_file(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e


def _load_codebook(path) -> structure.Codebook:
    if path is None:
        return structure.default_codebook()
    try:
        return structure.read_codebook(path)
    except (OSError, ValueError) as e:
        raise DataError(f"bad codebook {path}: {e}") from e


def cmd_prep(args) -> int:
    records_out = None
    fasta = seqio.parse_fasta(_read_file(args.fasta))
    if not fasta:
        raise DataError(f"{args.fasta}: no records")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    with open(out_dir / "sequences.tsv", "w", encoding="utf-8") as fh:
        for r in fasta:
            fh.write(f"{r.id}\t{r.residues}\n")

    if args.pdb_dir is not None:
        codebook = _load_codebook(args.codebook)
        paired = []
        for r in fasta:
            pdb_path = Path(args.pdb_dir) / f"{r.id}.pdb"
            if not pdb_path.exists():
                _log(f"prep: no structure for {r.id}, skipping")
                continue
            chain = seqio.parse_pdb_ca(_read_file(pdb_path), args.chain)
            tdi = structure.encode_chain(chain, codebook)
            if len(tdi) != len(r.residues):
                raise DataError(
                    f"{r.id}: sequence length {len(r.residues)} does not match "
                    f"structure length {len(tdi)}"
                )
            paired.append(seqio.PairedRecord(r.id, r, tdi))
        if not paired:
            raise DataError("prep: no sequence/structure pairs produced")
        records_out = out_dir / "records.tsv"
        seqio.write_records(paired, records_out)

    clusters = seqio.dedup_cluster(fasta, args.cluster_threshold)
    with open(out_dir / "clusters.tsv", "w", encoding="utf-8") as fh:
        for c in clusters:
            fh.write("\t".join(c) + "\n")
    split = seqio.split_dataset(
        [r.id for r in fasta], (0.8, 0.1, 0.1), args.seed, clusters=clusters
    )
    seqio.write_split(split, out_dir / "split.json")

    n_records = None
    if records_out is not None:
        n_records = len(records_out.read_text(encoding="utf-8").splitlines())
    _emit(
        {
            "sequences": len(fasta),
            "records": n_records,
            "clusters": len(clusters),
            "out": str(out_dir),
        }
    )
    return 0


def cmd_encode_structure(args) -> int:
    chain = seqio.parse_pdb_ca(_read_file(args.pdb), args.chain)
    codebook = _load_codebook(args.codebook)
    print(structure.encode_chain(chain, codebook))
    return 0


def cmd_fit_codebook(args) -> int:
    pdbs = sorted(Path(args.pdb_dir).glob("*.pdb"))
    if not pdbs:
        raise DataError(f"no .pdb files under {args.pdb_dir}")
    chains = [seqio.parse_pdb_ca(_read_file(p), args.chain) for p in pdbs]
    try:
        cb = structure.fit_codebook(chains, args.seed)
    except ValueError as e:
        raise DataError(str(e)) from e
    structure.write_codebook(cb, args.out)
    _emit({"codebook": str(args.out), "chains": len(chains)})
    return 0


def _load_records(data_dir) -> list[seqio.PairedRecord]:
    path = Path(data_dir) / "records.tsv"
    if not path.exists():
        raise DataError(f"{path} not found (run `ablm prep` first)")
    return seqio.read_records(path)


def cmd_pretrain(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    records = _load_records(args.data)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.steps is not None:
        overrides["total_steps"] = args.steps
    if args.no_ssm:
        overrides["use_ssm"] = False
    if args.no_clr:
        overrides["use_clr"] = False

    if args.stage == 1:
        config = _train_config(doc, STAGE_I, overrides)
        corpus_1d = [r.residues.residues for r in records]
        corpus_3di = [r.struct3di for r in records]
        init = load_checkpoint(args.init) if args.init else None
        model_config = _model_config(doc) if init is None else None
        ckpt, history = train_stage1(
            corpus_1d, corpus_3di, config, model_config, init=init, log_fn=_log, out_path=args.out
        )
        model = ckpt.model()
        final = {
            "l_1d_mlm": evaluate_mlm(model, corpus_1d, LEVEL_1D, config.mask_rate, config.seed).l_1d_mlm,
            "l_3di_mlm": evaluate_mlm(model, corpus_3di, LEVEL_3DI, config.mask_rate, config.seed).l_3di_mlm,
        }
    else:
        if args.init is None and not args.from_scratch:
            raise UsageError("stage 2 needs --init CKPT (or --from-scratch)")
        config = _train_config(doc, STAGE_II, overrides)
        init = load_checkpoint(args.init) if args.init else None
        model_config = _model_config(doc) if init is None else None
        ckpt, history = train_stage2(
            records,
            init,
            config,
            model_config,
            from_scratch=args.from_scratch,
            log_fn=_log,
            out_path=args.out,
        )
        final = evaluate_stage2(ckpt.model(), records, config.mask_rate, config.seed)

    _emit({"checkpoint": str(args.out), "steps": len(history), "final": final})
    return 0


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise DataError(str(e)) from e


def _load_task(args):
    kind = TASK_KINDS[args.task]
    path = Path(args.data) / TASK_FILES[args.task]
    if not path.exists():
        raise DataError(f"{path} not found")
    try:
        dataset = D.load_task_dataset(path, kind)
    except (ValueError, OSError) as e:
        raise DataError(str(e)) from e
    split_path = Path(args.data) / "split.json"
    if split_path.exists():
        dataset.split = seqio.read_split(split_path)
    else:
        dataset = dataset.with_default_split(seed=0)
    return dataset


def cmd_finetune(args) -> int:
    doc = load_run_config(args.config) if args.config else {}
    ft = D.FinetuneConfig(**doc.get("finetune", {}))
    dataset = _load_task(args)
    ckpt = _load_ckpt(args.ckpt)
    if args.task == "affinity":
        ag_ckpt = _load_ckpt(args.ag_ckpt) if args.ag_ckpt else _load_ckpt(args.ckpt)
        (model_ab, model_ag), report = D.finetune_affinity(ckpt, ag_ckpt, dataset, ft)
        _save_model(model_ab, args.out, f"FT-{args.task}")
        _save_model(model_ag, str(args.out) + ".ag", f"FT-{args.task}-ag")
    else:
        model, report = D.finetune(ckpt, dataset, ft)
        _save_model(model, args.out, f"FT-{args.task}")
    _emit(report.to_dict())
    return 0


def _save_model(model: Model, path, stage: str) -> None:
    save_checkpoint(
        checkpoint_from_state(model, AdamWState.for_weights(model.weights), 0, 0, stage), path
    )


def cmd_eval(args) -> int:
    dataset = _load_task(args)
    ckpt = _load_ckpt(args.ckpt)
    model = ckpt.model()
    if args.task == "affinity":
        ag_path = args.ag_ckpt or (str(args.ckpt) + ".ag")
        ag_model = (_load_ckpt(ag_path) if Path(ag_path).exists() else ckpt).model()
        report = D.eval_affinity(model, ag_model, dataset)
    else:
        report = D.eval_task(model, dataset)
    _emit(report.to_dict())
    return 0


def _parse_span(text: str) -> tuple[int, int]:
    try:
        a, b = text.split(":")
        return int(a), int(b)
    except ValueError:
        raise UsageError(f"bad span {text!r}, expected A:B") from None


def cmd_generate(args) -> int:
    records = seqio.read_records(args.record) if Path(args.record).exists() else None
    if not records:
        raise DataError(f"no records in {args.record}")
    if args.id is not None:
        matches = [r for r in records if r.id == args.id]
        if not matches:
            raise DataError(f"record {args.id!r} not found in {args.record}")
        record = matches[0]
    else:
        record = records[0]
    span = _parse_span(args.span)
    model = _load_ckpt(args.ckpt).model()
    rng = np.random.default_rng(args.seed)
    mode = "greedy" if args.greedy else "sample"
    samples = D.infill_cdr(model, record, span, args.n, args.temperature, rng, mode)
    truth = record.residues.residues[span[0] : span[1]]
    payload = {
        "record": record.id,
        "span": [span[0], span[1]],
        "samples": samples,
        "aar": D.aar(samples, truth),
        "span_exact": D.span_exact_match(samples, truth),
        "div": D.div(samples) if len(samples) >= 2 else None,
        "self_ppl": D.self_ppl(model, record.residues.residues),
    }
    _emit(payload)
    return 0


def cmd_embed(args) -> int:
    seqs = seqio.parse_fasta(_read_file(args.fasta))
    if not seqs:
        raise DataError(f"{args.fasta}: no records")
    model = _load_ckpt(args.ckpt).model()
    D.export_embeddings(model, seqs, args.out)
    _emit({"out": str(args.out), "rows": len(seqs), "dims": model.config.d_hidden})
    return 0


def cmd_attn(args) -> int:
    model = _load_ckpt(args.ckpt).model()
    try:
        D.export_attention(model, args.seq, args.layer, args.head, args.out)
    except ValueError as e:
        raise UsageError(str(e)) from e
    _emit({"out": str(args.out), "length": len(args.seq)})
    return 0


# ---------------------------------------------------------------------------
# Parser wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ablm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prep", help="build paired-record files from FASTA (+ optional PDB dir)")
    p.add_argument("--fasta", required=True, help="input FASTA file")
    p.add_argument("--pdb-dir", default=None, help="directory of <id>.pdb structures")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--chain", default="A", help="PDB chain id (default A)")
    p.add_argument("--codebook", default=None, help="codebook file (default: bundled)")
    p.add_argument("--cluster-threshold", type=float, default=0.7, help="identity threshold (default 0.7)")
    p.add_argument("--seed", type=int, default=0, help="split seed (default 0)")
    p.set_defaults(fn=cmd_prep)

    p = sub.add_parser("encode-structure", help="print the 3Di string of a PDB chain")
    p.add_argument("--pdb", required=True, help="PDB file")
    p.add_argument("--chain", required=True, help="chain id")
    p.add_argument("--codebook", default=None, help="codebook file (default: bundled)")
    p.set_defaults(fn=cmd_encode_structure)

    p = sub.add_parser("fit-codebook", help="fit a 20-letter codebook on a PDB directory")
    p.add_argument("--pdb-dir", required=True, help="directory of .pdb files")
    p.add_argument("--seed", type=int, required=True, help="clustering seed")
    p.add_argument("--out", required=True, help="output codebook path")
    p.add_argument("--chain", default="A", help="chain id (default A)")
    p.set_defaults(fn=cmd_fit_codebook)

    p = sub.add_parser("pretrain", help="run pretraining stage 1 or 2")
    p.add_argument("--stage", type=int, choices=(1, 2), required=True, help="1: per-level MLM, 2: SSM+CLR")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--data", required=True, help="directory containing records.tsv")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--init", default=None, help="initial checkpoint (required for stage 2)")
    p.add_argument("--from-scratch", action="store_true", help="allow stage 2 without --init")
    p.add_argument("--no-ssm", action="store_true", help="ablation: drop the matching objective")
    p.add_argument("--no-clr", action="store_true", help="ablation: drop cross-level reconstruction")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--steps", type=int, default=None, help="override config total_steps")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune on a downstream task")
    p.add_argument("--task", choices=sorted(TASK_KINDS), required=True, help="task name")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--data", required=True, help="directory containing <task>.tsv")
    p.add_argument("--out", required=True, help="output tuned checkpoint")
    p.add_argument("--config", default=None, help="JSON run config")
    p.add_argument("--ag-ckpt", default=None, help="antigen encoder checkpoint (affinity)")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a task's test split")
    p.add_argument("--task", choices=sorted(TASK_KINDS), required=True, help="task name")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--data", required=True, help="directory containing <task>.tsv")
    p.add_argument("--ag-ckpt", default=None, help="antigen encoder checkpoint (affinity)")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="infill a masked span and score the samples")
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--record", required=True, help="records.tsv holding the target")
    p.add_argument("--id", default=None, help="record id (default: first record)")
    p.add_argument("--span", required=True, help="span A:B (0-based, end-exclusive)")
    p.add_argument("--n", type=int, default=10, help="number of samples (default 10)")
    p.add_argument("--temperature", type=float, default=1.0, help="sampling temperature (default 1.0)")
    p.add_argument("--greedy", action="store_true", help="argmax decoding instead of sampling")
    p.add_argument("--seed", type=int, default=0, help="sampling seed (default 0)")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("embed", help="export mean-pooled embeddings as TSV")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--fasta", required=True, help="input FASTA")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(fn=cmd_embed)

    p = sub.add_parser("attn", help="export one attention map as TSV")
    p.add_argument("--ckpt", required=True, help="checkpoint")
    p.add_argument("--seq", required=True, help="residue sequence")
    p.add_argument("--layer", type=int, required=True, help="layer index (0-based)")
    p.add_argument("--head", type=int, required=True, help="head index (0-based)")
    p.add_argument("--out", required=True, help="output TSV path")
    p.set_defaults(fn=cmd_attn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.fn(args)
    except UsageError as e:
        _log(f"usage error: {e}")
        return 1
    except (DataError, ParseError, CheckpointError, FileNotFoundError) as e:
        _log(f"data error: {e}")
        return 2
    except FloatingPointError as e:
        _log(f"numeric failure: {e}")
        return 3
    except ValueError as e:
        _log(f"data error: {e}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
