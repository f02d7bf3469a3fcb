"""FASTA/PDB parsing, clustering, and splitting."""

import numpy as np
import pytest

from ablm import seqio
from ablm.seqio import (
    ParseError,
    ResidueSeq,
    dedup_cluster,
    kmer_identity,
    parse_fasta,
    parse_pdb_ca,
    split_dataset,
    write_fasta,
)
from ablm.vocab import AA_LETTERS

# ---------------------------------------------------------------------------
# FASTA
# ---------------------------------------------------------------------------


def test_parse_single_record():
    records = parse_fasta(b">a\nQVQ")
    assert len(records) == 1
    assert records[0].id == "a"
    assert records[0].residues == "QVQ"


def test_parse_concatenates_sequence_lines():
    records = parse_fasta(b">a\nQV\nQL\n>b\nACD")
    assert [r.residues for r in records] == ["QVQL", "ACD"]
    assert [r.id for r in records] == ["a", "b"]


def test_parse_invalid_residue_names_position():
    with pytest.raises(ParseError, match="position 3"):
        parse_fasta(b">a\nQVXZ")


def test_parse_empty_file():
    assert parse_fasta(b"") == []


def test_parse_lowercase_and_whitespace():
    records = parse_fasta(b">a desc here\n qv q\nl\n")
    assert records[0].residues == "QVQL"
    assert records[0].metadata["description"] == "desc here"


def test_parse_sequence_before_header_rejected():
    with pytest.raises(ParseError):
        parse_fasta(b"QVQL\n>a\nACD")


def test_fasta_roundtrip_identity():
    rng = np.random.default_rng(3)
    records = [
        ResidueSeq(f"id{i}", "".join(rng.choice(list(AA_LETTERS), size=rng.integers(5, 40))))
        for i in range(25)
    ]
    back = parse_fasta(write_fasta(records))
    assert [(r.id, r.residues) for r in back] == [(r.id, r.residues) for r in records]


# ---------------------------------------------------------------------------
# PDB
# ---------------------------------------------------------------------------


def _atom_line(serial, name, resname, chain, resseq, x, y, z, altloc=" "):
    return (
        f"ATOM  {serial:5d} {name:^4s}{altloc}{resname:3s} {chain}{resseq:4d}    "
        f"{x:8.3f}{y:8.3f}{z:8.3f}  1.00  0.00           C"
    )


def test_parse_pdb_basic():
    lines = [
        _atom_line(1, "N", "ALA", "A", 1, 0.0, 0.0, 0.0),
        _atom_line(2, "CA", "ALA", "A", 1, 1.0, 2.0, 3.0),
        _atom_line(3, "CA", "GLY", "A", 2, 4.0, 5.0, 6.0),
        _atom_line(4, "CA", "SER", "A", 3, 7.0, 8.0, 9.0),
    ]
    chain = parse_pdb_ca("\n".join(lines), "A")
    assert len(chain) == 3
    assert np.allclose(chain.ca_coords[0], [1.0, 2.0, 3.0])


def test_parse_pdb_missing_chain():
    lines = [
        _atom_line(1, "CA", "ALA", "A", 1, 0.0, 0.0, 0.0),
        _atom_line(2, "CA", "ALA", "B", 1, 1.0, 0.0, 0.0),
    ]
    with pytest.raises(ParseError, match="chain 'C'"):
        parse_pdb_ca("\n".join(lines), "C")


def test_parse_pdb_altloc_keeps_first():
    lines = [
        _atom_line(1, "CA", "ALA", "A", 1, 1.0, 0.0, 0.0, altloc="A"),
        _atom_line(2, "CA", "ALA", "A", 1, 9.0, 9.0, 9.0, altloc="B"),
        _atom_line(3, "CA", "GLY", "A", 2, 2.0, 0.0, 0.0),
        _atom_line(4, "CA", "SER", "A", 3, 3.0, 0.0, 0.0),
    ]
    chain = parse_pdb_ca("\n".join(lines), "A")
    assert len(chain) == 3
    assert np.allclose(chain.ca_coords[0], [1.0, 0.0, 0.0])


def test_parse_pdb_residue_number_order():
    lines = [
        _atom_line(1, "CA", "ALA", "A", 3, 3.0, 0.0, 0.0),
        _atom_line(2, "CA", "ALA", "A", 1, 1.0, 0.0, 0.0),
        _atom_line(3, "CA", "ALA", "A", 2, 2.0, 0.0, 0.0),
    ]
    chain = parse_pdb_ca("\n".join(lines), "A")
    assert np.allclose(chain.ca_coords[:, 0], [1.0, 2.0, 3.0])


def test_parse_pdb_too_few_ca():
    lines = [
        _atom_line(1, "CA", "ALA", "A", 1, 0.0, 0.0, 0.0),
        _atom_line(2, "CA", "ALA", "A", 2, 1.0, 0.0, 0.0),
    ]
    with pytest.raises(ParseError, match="need >= 3"):
        parse_pdb_ca("\n".join(lines), "A")


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def _seq(i, s):
    return ResidueSeq(f"s{i}", s)


def test_identical_sequences_cluster_together():
    seqs = [_seq(0, "QVQLVESGGGLVQ"), _seq(1, "QVQLVESGGGLVQ")]
    clusters = dedup_cluster(seqs, 0.7)
    assert clusters == [["s0", "s1"]]


def test_disjoint_sequences_split():
    seqs = [_seq(0, "AAAAAAAAAA"), _seq(1, "WWWWWWWWWW")]
    assert dedup_cluster(seqs, 0.7) == [["s0"], ["s1"]]


def test_greedy_clustering_matches_pairwise_oracle():
    rng = np.random.default_rng(11)
    base = "".join(rng.choice(list(AA_LETTERS), size=30))
    seqs = []
    for i in range(10):
        s = list(base)
        for _ in range(rng.integers(0, 12)):
            s[rng.integers(len(s))] = rng.choice(list(AA_LETTERS))
        seqs.append(_seq(i, "".join(s)))

    clusters = dedup_cluster(seqs, 0.7)

    # brute-force oracle: replay the greedy rule with an independent
    # all-pairs identity table
    def oracle_identity(a, b):
        ka = {a[i : i + 5] for i in range(len(a) - 4)}
        kb = {b[i : i + 5] for i in range(len(b) - 4)}
        if len(a) < len(b):
            denom = len(ka)
        elif len(b) < len(a):
            denom = len(kb)
        else:
            denom = min(len(ka), len(kb))
        return len(ka & kb) / denom if denom else (1.0 if a == b else 0.0)

    reps, expected = [], []
    for s in seqs:
        for ci, rep in enumerate(reps):
            if oracle_identity(s.residues, rep) >= 0.7:
                expected[ci].append(s.id)
                break
        else:
            reps.append(s.residues)
            expected.append([s.id])
    assert clusters == expected


def test_clusters_partition_input():
    rng = np.random.default_rng(12)
    seqs = [
        _seq(i, "".join(rng.choice(list(AA_LETTERS), size=20))) for i in range(30)
    ]
    clusters = dedup_cluster(seqs, 0.5)
    flat = [i for c in clusters for i in c]
    assert sorted(flat) == sorted(s.id for s in seqs)


def test_kmer_identity_short_sequences():
    assert kmer_identity("ACD", "ACD") == 1.0
    assert kmer_identity("ACD", "WYE") == 0.0


def test_empty_input_rejected():
    with pytest.raises(ValueError):
        dedup_cluster([], 0.7)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------


def test_split_exact_fractions():
    split = split_dataset(list(range(10)), (0.8, 0.1, 0.1), seed=7)
    assert (len(split.train), len(split.val), len(split.test)) == (8, 1, 1)


def test_split_deterministic():
    a = split_dataset(list(range(50)), (0.7, 0.15, 0.15), seed=3)
    b = split_dataset(list(range(50)), (0.7, 0.15, 0.15), seed=3)
    assert a.train == b.train and a.val == b.val and a.test == b.test


def test_split_published_sizes():
    # 21,612 ids at 70/15/15 must produce the 15,128/3,242/3,242 partition
    split = split_dataset(list(range(21612)), (0.7, 0.15, 0.15), seed=0)
    assert (len(split.train), len(split.val), len(split.test)) == (15128, 3242, 3242)


def test_split_partitions_ids():
    ids = [f"x{i}" for i in range(37)]
    split = split_dataset(ids, (0.6, 0.2, 0.2), seed=5)
    assert sorted(split.train + split.val + split.test) == sorted(ids)
    assert not (set(split.train) & set(split.val))
    assert not (set(split.train) & set(split.test))
    assert not (set(split.val) & set(split.test))


def test_split_cluster_cohesion():
    rng = np.random.default_rng(13)
    ids = list(range(60))
    clusters, i = [], 0
    while i < 60:
        size = int(rng.integers(1, 6))
        clusters.append(ids[i : i + size])
        i += size
    split = split_dataset(ids, (0.7, 0.15, 0.15), seed=9, clusters=clusters)
    assert sorted(split.train + split.val + split.test) == ids
    membership = {}
    for part, name in ((split.train, 0), (split.val, 1), (split.test, 2)):
        for x in part:
            membership[x] = name
    for c in clusters:
        assert len({membership[x] for x in c}) == 1


def test_split_bad_fractions_rejected():
    with pytest.raises(ValueError):
        split_dataset(list(range(10)), (0.5, 0.2, 0.2), seed=0)


def test_records_roundtrip(tmp_path):
    from ablm.seqio import PairedRecord, read_records, write_records

    rng = np.random.default_rng(14)
    records = []
    for i in range(8):
        n = int(rng.integers(6, 20))
        res = "".join(rng.choice(list(AA_LETTERS), size=n))
        tdi = "".join(rng.choice(list("abcdefghijklmnopqrst"), size=n))
        records.append(PairedRecord(f"r{i}", ResidueSeq(f"r{i}", res), tdi))
    path = tmp_path / "records.tsv"
    write_records(records, path)
    back = read_records(path)
    assert [(r.id, r.residues.residues, r.struct3di) for r in back] == [
        (r.id, r.residues.residues, r.struct3di) for r in records
    ]


def test_paired_record_length_mismatch_rejected():
    from ablm.seqio import PairedRecord

    with pytest.raises(ParseError, match="length mismatch"):
        PairedRecord("x", ResidueSeq("x", "QVQL"), "abc")
