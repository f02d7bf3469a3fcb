"""Sequence/structure ingestion: FASTA, PDB C-alpha traces, paired records,
greedy identity clustering, and deterministic dataset splitting."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import numpy as np

from .vocab import AA_LETTERS, TDI_LETTERS

VALID_AA = set(AA_LETTERS)
VALID_TDI = set(TDI_LETTERS)

KMER_SIZE = 5  # fixed k for the greedy identity clustering


class ParseError(ValueError):
    """Malformed input data (FASTA/PDB/record files)."""


@dataclass
class ResidueSeq:
    id: str
    residues: str
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.residues) < 1:
            raise ParseError(f"record {self.id!r}: empty sequence")
        for pos, ch in enumerate(self.residues, start=1):
            if ch not in VALID_AA:
                raise ParseError(
                    f"record {self.id!r}: invalid residue {ch!r} at position {pos}"
                )

    def __len__(self):
        return len(self.residues)


@dataclass
class CoordChain:
    id: str
    ca_coords: np.ndarray  # [n, 3] Angstrom

    def __post_init__(self):
        self.ca_coords = np.asarray(self.ca_coords, dtype=np.float64)
        if self.ca_coords.ndim != 2 or self.ca_coords.shape[1] != 3:
            raise ParseError(f"chain {self.id!r}: coordinates must be [n, 3]")
        if len(self.ca_coords) < 3:
            raise ParseError(f"chain {self.id!r}: need at least 3 CA atoms")
        if not np.all(np.isfinite(self.ca_coords)):
            raise ParseError(f"chain {self.id!r}: non-finite coordinates")

    def __len__(self):
        return len(self.ca_coords)


@dataclass
class PairedRecord:
    """A chain as aligned residue string and 3Di string of equal length."""

    id: str
    residues: ResidueSeq
    struct3di: str

    def __post_init__(self):
        if len(self.struct3di) == 0:
            raise ParseError(f"record {self.id!r}: empty 3Di string")
        for pos, ch in enumerate(self.struct3di, start=1):
            if ch not in VALID_TDI:
                raise ParseError(
                    f"record {self.id!r}: invalid 3Di letter {ch!r} at position {pos}"
                )
        if len(self.residues.residues) != len(self.struct3di):
            raise ParseError(
                f"record {self.id!r}: residue/3Di length mismatch "
                f"({len(self.residues.residues)} vs {len(self.struct3di)})"
            )

    def __len__(self):
        return len(self.struct3di)


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    seed: int

    def as_dict(self):
        return {"train": list(self.train), "val": list(self.val), "test": list(self.test), "seed": self.seed}


# ---------------------------------------------------------------------------
# FASTA
# ---------------------------------------------------------------------------


def parse_fasta(data: bytes | str) -> list[ResidueSeq]:
    """Parse FASTA text into validated records.

    Sequence lines are concatenated, whitespace stripped, letters
    uppercased. Any character outside the 20-letter alphabet fails the
    whole parse with the offending record and 1-based position named.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    records: list[ResidueSeq] = []
    cur_id: str | None = None
    cur_desc = ""
    chunks: list[str] = []

    def flush():
        if cur_id is None:
            return
        seq = "".join(chunks).upper()
        meta = {"description": cur_desc} if cur_desc else {}
        records.append(ResidueSeq(cur_id, seq, meta))

    for line in data.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip()
            parts = header.split(None, 1)
            cur_id = parts[0] if parts else ""
            cur_desc = parts[1] if len(parts) > 1 else ""
            chunks = []
        else:
            if cur_id is None:
                raise ParseError("sequence data before the first FASTA header")
            chunks.append("".join(line.split()))
    flush()
    return records


def write_fasta(records: list[ResidueSeq]) -> str:
    lines = []
    for r in records:
        desc = r.metadata.get("description", "")
        lines.append(f">{r.id} {desc}".rstrip())
        lines.append(r.residues)
    return "\n".join(lines) + ("\n" if lines else "")


# ---------------------------------------------------------------------------
# PDB (fixed-column ATOM records, PDB v3.3)
# ---------------------------------------------------------------------------


def parse_pdb_ca(data: bytes | str, chain: str) -> CoordChain:
    """Extract the C-alpha trace of one chain.

    Uses the fixed v3.3 columns: atom name 13-16, altLoc 17, chain 22,
    resSeq 23-26, x/y/z 31-54. The first occurrence wins when alternate
    locations duplicate a residue's CA.
    """
    if isinstance(data, bytes):
        data = data.decode("utf-8")
    if len(chain) != 1:
        raise ParseError(f"chain must be a single character, got {chain!r}")

    seen_chains = set()
    coords: dict[tuple[int, str], np.ndarray] = {}
    for lineno, line in enumerate(data.splitlines(), start=1):
        if not line.startswith("ATOM"):
            continue
        if len(line) < 54:
            raise ParseError(f"line {lineno}: truncated ATOM record")
        atom_name = line[12:16].strip()
        chain_id = line[21]
        seen_chains.add(chain_id)
        if atom_name != "CA" or chain_id != chain:
            continue
        res_seq = line[22:26].strip()
        icode = line[26] if len(line) > 26 else " "
        try:
            key = (int(res_seq), icode)
            xyz = np.array(
                [float(line[30:38]), float(line[38:46]), float(line[46:54])],
                dtype=np.float64,
            )
        except ValueError:
            raise ParseError(f"line {lineno}: malformed ATOM fields") from None
        if key not in coords:  # altloc rule: keep the first occurrence
            coords[key] = xyz

    if not coords:
        if chain not in seen_chains:
            raise ParseError(
                f"chain {chain!r} not present (found: {sorted(seen_chains) or 'none'})"
            )
        raise ParseError(f"chain {chain!r} has no CA atoms")
    ordered = [coords[k] for k in sorted(coords.keys())]
    if len(ordered) < 3:
        raise ParseError(f"chain {chain!r} has only {len(ordered)} CA atoms (need >= 3)")
    return CoordChain(id=chain, ca_coords=np.stack(ordered))


# ---------------------------------------------------------------------------
# Paired record files:  id <TAB> residues <TAB> struct3di
# ---------------------------------------------------------------------------


def read_records(path) -> list[PairedRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields")
            rid, res, tdi = parts
            records.append(PairedRecord(rid, ResidueSeq(rid, res), tdi))
    return records


def write_records(records: list[PairedRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.id}\t{r.residues.residues}\t{r.struct3di}\n")


def read_sequences(path) -> list[ResidueSeq]:
    """Read an `id<TAB>residues` file."""
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 2 tab-separated fields")
            out.append(ResidueSeq(parts[0], parts[1]))
    return out


# ---------------------------------------------------------------------------
# Greedy identity clustering (external-tool-free stand-in for profile tools)
# ---------------------------------------------------------------------------


def _kmers(seq: str, k: int = KMER_SIZE) -> set:
    if len(seq) < k:
        return set()
    return {seq[i : i + k] for i in range(len(seq) - k + 1)}


def kmer_identity(a: str, b: str, k: int = KMER_SIZE) -> float:
    """Fraction of the shorter sequence's distinct k-mers shared by both."""
    ka, kb = _kmers(a, k), _kmers(b, k)
    if len(a) < len(b):
        denom = len(ka)
    elif len(b) < len(a):
        denom = len(kb)
    else:
        denom = min(len(ka), len(kb))
    if denom == 0:
        return 1.0 if a == b else 0.0
    return len(ka & kb) / denom


def dedup_cluster(seqs: list[ResidueSeq], identity_threshold: float) -> list[list[str]]:
    """Greedy single-pass clustering by k-mer identity to cluster founders.

    A sequence joins the first existing cluster whose representative (the
    founding sequence) shares identity >= threshold, else founds a new
    cluster. Output clusters partition the input ids in input order.
    """
    if not seqs:
        raise ValueError("dedup_cluster requires a nonempty input")
    if not (0.0 < identity_threshold <= 1.0):
        raise ValueError("identity_threshold must lie in (0, 1]")
    reps: list[str] = []
    clusters: list[list[str]] = []
    for s in seqs:
        placed = False
        for ci, rep in enumerate(reps):
            if kmer_identity(s.residues, rep) >= identity_threshold:
                clusters[ci].append(s.id)
                placed = True
                break
        if not placed:
            reps.append(s.residues)
            clusters.append([s.id])
    return clusters


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def _largest_remainder_sizes(n: int, fractions) -> list[int]:
    raw = [f * n for f in fractions]
    sizes = [int(np.floor(x)) for x in raw]
    rem = n - sum(sizes)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - sizes[i]), i))
    for i in order[:rem]:
        sizes[i] += 1
    return sizes


def split_dataset(ids: list, fractions, seed: int, clusters: list[list] | None = None) -> DatasetSplit:
    """Deterministic train/val/test partition of ids.

    When ``clusters`` is given, each whole cluster lands in exactly one
    partition (leakage control); cluster order is shuffled by the seed and
    clusters are assigned greedily to the partition with the largest
    remaining deficit against its target size.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ValueError("fractions must be three nonnegative numbers")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    ids = list(ids)
    rng = random.Random(seed)
    if clusters is None:
        shuffled = ids[:]
        rng.shuffle(shuffled)
        n_train, n_val, n_test = _largest_remainder_sizes(len(ids), fractions)
        return DatasetSplit(
            train=shuffled[:n_train],
            val=shuffled[n_train : n_train + n_val],
            test=shuffled[n_train + n_val :],
            seed=seed,
        )

    id_set = set(ids)
    covered = [i for c in clusters for i in c]
    if sorted(covered) != sorted(ids):
        raise ValueError("clusters must cover exactly the input ids")
    del id_set
    groups = [list(c) for c in clusters]
    rng.shuffle(groups)
    targets = [f * len(ids) for f in fractions]
    parts: list[list] = [[], [], []]
    for g in groups:
        deficits = [targets[i] - len(parts[i]) for i in range(3)]
        parts[deficits.index(max(deficits))].extend(g)
    return DatasetSplit(train=parts[0], val=parts[1], test=parts[2], seed=seed)


def write_split(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.as_dict(), fh, indent=1)
        fh.write("\n")


def read_split(path) -> DatasetSplit:
    with open(path, "r", encoding="utf-8") as fh:
        d = json.load(fh)
    return DatasetSplit(d["train"], d["val"], d["test"], int(d.get("seed", 0)))
