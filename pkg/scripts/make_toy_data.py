"""Regenerate the bundled toy corpus (paired records, PDB files, codebook).

The outputs are committed under src/ablm/data/ so tests and the CLI run
offline; rerunning this script reproduces them byte-for-byte.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from ablm import seqio, structure  # noqa: E402
from ablm.vocab import AA_LETTERS, TDI_LETTERS  # noqa: E402

DATA_DIR = Path(__file__).resolve().parent.parent / "src" / "ablm" / "data"
SEED = 20240501
N_RECORDS = 64
REC_LEN = 24


MOTIF_LEN = 6  # records are a distinct random motif tiled to REC_LEN


def _distinct_motifs(rng: np.random.Generator, letters: str, n: int) -> list[str]:
    seen: set[str] = set()
    out: list[str] = []
    while len(out) < n:
        m = "".join(rng.choice(list(letters), size=MOTIF_LEN))
        if m not in seen:
            seen.add(m)
            out.append(m)
    return out


def make_records(rng: np.random.Generator) -> list[seqio.PairedRecord]:
    """Periodic toy records: motif-tiled strings memorize quickly at desk
    scale (a small encoder learns the copy-from-offset circuit fast),
    which is what the overfit-style convergence checks need."""
    reps = REC_LEN // MOTIF_LEN
    res_motifs = _distinct_motifs(rng, AA_LETTERS, N_RECORDS)
    tdi_motifs = _distinct_motifs(rng, TDI_LETTERS, N_RECORDS)
    records = []
    for i in range(N_RECORDS):
        rid = f"ab{i:03d}"
        res = res_motifs[i] * reps
        tdi = tdi_motifs[i] * reps
        records.append(seqio.PairedRecord(rid, seqio.ResidueSeq(rid, res), tdi))
    return records


def helix_coords(n: int) -> np.ndarray:
    """Ideal alpha-helix CA trace: 2.3 A radius, 1.5 A rise, 100 deg/res."""
    t = np.arange(n)
    ang = np.deg2rad(100.0) * t
    return np.stack([2.3 * np.cos(ang), 2.3 * np.sin(ang), 1.5 * t], axis=1)


def hairpin_coords(n_arm: int) -> np.ndarray:
    """Two antiparallel strands joined by a turn; cross-strand contacts."""
    up = np.stack(
        [np.zeros(n_arm), 0.5 * (-1.0) ** np.arange(n_arm), 3.4 * np.arange(n_arm)], axis=1
    )
    turn = np.array([[2.4, 0.0, 3.4 * n_arm + 1.0]])
    down = np.stack(
        [
            np.full(n_arm, 4.8),
            0.5 * (-1.0) ** np.arange(n_arm),
            3.4 * (n_arm - 1 - np.arange(n_arm)),
        ],
        axis=1,
    )
    return np.concatenate([up, turn, down], axis=0)


def coil_coords(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random walk with 3.8 A steps and mild self-avoidance."""
    pts = [np.zeros(3)]
    direction = np.array([1.0, 0.0, 0.0])
    for _ in range(n - 1):
        step = direction + 0.9 * rng.normal(size=3)
        step = step / np.linalg.norm(step) * 3.8
        pts.append(pts[-1] + step)
        direction = step / np.linalg.norm(step)
    return np.stack(pts)


def write_pdb(path: Path, coords: np.ndarray, rng: np.random.Generator) -> None:
    three = {
        "A": "ALA", "C": "CYS", "D": "ASP", "E": "GLU", "F": "PHE",
        "G": "GLY", "H": "HIS", "I": "ILE", "K": "LYS", "L": "LEU",
        "M": "MET", "N": "ASN", "P": "PRO", "Q": "GLN", "R": "ARG",
        "S": "SER", "T": "THR", "V": "VAL", "W": "TRP", "Y": "TYR",
    }
    with open(path, "w", encoding="utf-8") as fh:
        for i, (x, y, z) in enumerate(coords, start=1):
            res = three[rng.choice(list(AA_LETTERS))]
            fh.write(
                f"ATOM  {i:5d}  CA  {res} A{i:4d}    "
                f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00           C\n"
            )
        fh.write("END\n")


def main() -> None:
    DATA_DIR.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(SEED)

    records = make_records(rng)
    seqio.write_records(records, DATA_DIR / "toy_records.tsv")

    write_pdb(DATA_DIR / "toy_helix.pdb", helix_coords(48), rng)
    write_pdb(DATA_DIR / "toy_hairpin.pdb", hairpin_coords(20), rng)
    write_pdb(DATA_DIR / "toy_coil.pdb", coil_coords(45, rng), rng)

    chains = [
        seqio.parse_pdb_ca((DATA_DIR / name).read_bytes(), "A")
        for name in ("toy_helix.pdb", "toy_hairpin.pdb", "toy_coil.pdb")
    ]
    codebook = structure.fit_codebook(chains, seed=7)
    structure.write_codebook(codebook, DATA_DIR / "default_codebook.txt")

    golden = structure.encode_chain(chains[0], codebook)
    (DATA_DIR / "golden_helix_3di.txt").write_text(golden + "\n")
    print("records:", len(records))
    print("golden helix 3Di:", golden)


if __name__ == "__main__":
    main()
