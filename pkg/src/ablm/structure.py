"""Geometric structure codec: C-alpha trace -> 20-letter structure string.

Each residue is described by four rigid-motion-invariant features built
around its nearest spatial neighbor (sequence-separation >= 3 enforced so
the neighbor reflects tertiary, not chain, contact):

    d_nn       distance to the nearest neighbor (Angstrom)
    sep        sign(j - i) * log1p(|j - i|), the signed log sequence gap
    cos_theta  cosine of the virtual backbone angle at residue i
    cos_phi    cosine of the angle at the neighbor j toward its chain
               successor (predecessor at the C-terminus)

Feature vectors are z-normalized over a corpus and quantized by a 20-
centroid k-means codebook; centroid index -> letter 'a'..'t'. The letter
string is aligned one-to-one with the residue sequence.
"""

from __future__ import annotations

from dataclasses import dataclass
from importlib import resources

import numpy as np

from .seqio import CoordChain
from .vocab import TDI_LETTERS

N_CODES = 20
N_FEATURES = 4
NEIGHBOR_EXCLUSION = 3  # minimum |j - i| for the tertiary neighbor
DEFAULT_CODEBOOK_RESOURCE = "default_codebook.txt"


class GeometryError(ValueError):
    """Degenerate geometry (coincident CA atoms or similar)."""


@dataclass
class Codebook:
    """20 centroids in z-normalized feature space plus the normalization."""

    centroids: np.ndarray  # [20, 4], normalized space
    norm_mean: np.ndarray  # [4]
    norm_scale: np.ndarray  # [4]

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.norm_mean = np.asarray(self.norm_mean, dtype=np.float64)
        self.norm_scale = np.asarray(self.norm_scale, dtype=np.float64)
        if self.centroids.shape != (N_CODES, N_FEATURES):
            raise ValueError(f"codebook must hold {N_CODES} centroids of dim {N_FEATURES}")
        if np.any(self.norm_scale <= 0):
            raise ValueError("normalization scales must be positive")
        for i in range(N_CODES):
            for j in range(i + 1, N_CODES):
                if np.allclose(self.centroids[i], self.centroids[j]):
                    raise ValueError(f"centroids {i} and {j} coincide")

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.norm_mean) / self.norm_scale

    def assign(self, feats: np.ndarray) -> np.ndarray:
        """Nearest-centroid index for each (unnormalized) feature row."""
        z = self.normalize(np.atleast_2d(feats))
        d2 = ((z[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


def nearest_neighbor(chain: CoordChain, i: int) -> int:
    """Index of the spatially nearest residue with |j - i| >= 3.

    Falls back to |j - i| >= 1 when the chain is too short for the
    exclusion window. Ties break toward the smaller index.
    """
    xyz = chain.ca_coords
    n = len(xyz)
    if not 0 <= i < n:
        raise IndexError(f"residue index {i} out of range for chain of length {n}")
    d = np.linalg.norm(xyz - xyz[i], axis=1)
    for exclusion in (NEIGHBOR_EXCLUSION, 1):
        mask = np.abs(np.arange(n) - i) >= exclusion
        if mask.any():
            masked = np.where(mask, d, np.inf)
            return int(np.argmin(masked))  # argmin takes the first = smallest index
    raise GeometryError(f"chain {chain.id!r}: no eligible neighbor for residue {i}")


def _cos_angle(a: np.ndarray, vertex: np.ndarray, b: np.ndarray, label: str) -> float:
    u = a - vertex
    v = b - vertex
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < 1e-9 or nv < 1e-9:
        raise GeometryError(f"coincident CA atoms around {label}")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def compute_features(chain: CoordChain, i: int) -> np.ndarray:
    """Four-component invariant feature vector for residue ``i``.

    Angle features that need a missing flanking residue (chain termini)
    are set to 0.0.
    """
    xyz = chain.ca_coords
    n = len(xyz)
    j = nearest_neighbor(chain, i)

    d_nn = float(np.linalg.norm(xyz[j] - xyz[i]))
    if d_nn < 1e-9:
        raise GeometryError(f"chain {chain.id!r}: residues {i} and {j} coincide")
    sep = float(np.sign(j - i) * np.log1p(abs(j - i)))

    if 0 < i < n - 1:
        cos_theta = _cos_angle(xyz[i - 1], xyz[i], xyz[i + 1], f"residue {i}")
    else:
        cos_theta = 0.0

    k = j + 1 if j + 1 < n else j - 1
    cos_phi = _cos_angle(xyz[i], xyz[j], xyz[k], f"residue {j}")

    return np.array([d_nn, sep, cos_theta, cos_phi], dtype=np.float64)


def chain_features(chain: CoordChain) -> np.ndarray:
    """Feature matrix [n, 4] for a whole chain."""
    return np.stack([compute_features(chain, i) for i in range(len(chain))])


# ---------------------------------------------------------------------------
# k-means quantizer
# ---------------------------------------------------------------------------


def kmeans_fit(
    points: np.ndarray,
    k: int,
    seed: int,
    max_iter: int = 100,
    tol: float = 1e-6,
) -> np.ndarray:
    """Seeded k-means++ followed by Lloyd iterations.

    Deterministic for a fixed seed; stops after ``max_iter`` rounds or when
    the largest centroid movement drops below ``tol``.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    if len(np.unique(points, axis=0)) < k:
        raise ValueError(f"need at least {k} distinct points, got fewer")
    rng = np.random.default_rng(seed)

    # k-means++ seeding
    centroids = np.empty((k, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        probs = d2 / d2.sum() if d2.sum() > 0 else np.full(n, 1.0 / n)
        centroids[c] = points[rng.choice(n, p=probs)]
        d2 = np.minimum(d2, ((points - centroids[c]) ** 2).sum(axis=1))

    for _ in range(max_iter):
        dist = ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = dist.argmin(axis=1)
        new = centroids.copy()
        for c in range(k):
            members = points[assign == c]
            if len(members):
                new[c] = members.mean(axis=0)
            else:  # re-seed an empty cluster at the farthest point
                new[c] = points[dist.min(axis=1).argmax()]
        move = np.abs(new - centroids).max()
        centroids = new
        if move < tol:
            break
    return centroids


def fit_codebook(chains: list[CoordChain], seed: int) -> Codebook:
    """Fit the 20-letter codebook on a corpus of chains.

    Features are z-normalized over the corpus before clustering; the
    fitted centroids are stored in normalized space, sorted
    lexicographically so letter assignment is canonical.
    """
    feats = np.concatenate([chain_features(c) for c in chains], axis=0)
    if len(feats) < N_CODES:
        raise ValueError(f"need at least {N_CODES} residues to fit a codebook, got {len(feats)}")
    mean = feats.mean(axis=0)
    scale = feats.std(axis=0)
    scale[scale < 1e-12] = 1.0
    z = (feats - mean) / scale
    if len(np.unique(z, axis=0)) < N_CODES:
        raise ValueError(f"need at least {N_CODES} distinct feature vectors")
    centroids = kmeans_fit(z, N_CODES, seed)
    order = np.lexsort(centroids.T[::-1])  # sort rows by first column, then second, ...
    return Codebook(centroids[order], mean, scale)


def encode_chain(chain: CoordChain, codebook: Codebook) -> str:
    """One letter per residue; output length equals chain length."""
    idx = codebook.assign(chain_features(chain))
    return "".join(TDI_LETTERS[c] for c in idx)


# ---------------------------------------------------------------------------
# Codebook file format
# ---------------------------------------------------------------------------
#
#   # comment lines allowed
#   columns d_nn sep cos_theta cos_phi
#   norm_mean <4 floats>
#   norm_scale <4 floats>
#   a <4 floats>          (20 centroid lines, letters 'a'..'t' in order)
#   ...


def write_codebook(cb: Codebook, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("columns d_nn sep cos_theta cos_phi\n")
        fh.write("norm_mean " + " ".join(repr(float(v)) for v in cb.norm_mean) + "\n")
        fh.write("norm_scale " + " ".join(repr(float(v)) for v in cb.norm_scale) + "\n")
        for i, letter in enumerate(TDI_LETTERS):
            fh.write(letter + " " + " ".join(repr(float(v)) for v in cb.centroids[i]) + "\n")


def _parse_codebook_text(text: str, origin: str) -> Codebook:
    mean = scale = None
    rows: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#") or line.startswith("columns"):
            continue
        parts = line.split()
        key, vals = parts[0], parts[1:]
        if len(vals) != N_FEATURES:
            raise ValueError(f"{origin}:{lineno}: expected {N_FEATURES} values")
        vec = np.array([float(v) for v in vals])
        if key == "norm_mean":
            mean = vec
        elif key == "norm_scale":
            scale = vec
        elif key in TDI_LETTERS:
            rows[key] = vec
        else:
            raise ValueError(f"{origin}:{lineno}: unexpected key {key!r}")
    if mean is None or scale is None or len(rows) != N_CODES:
        raise ValueError(f"{origin}: incomplete codebook")
    centroids = np.stack([rows[letter] for letter in TDI_LETTERS])
    return Codebook(centroids, mean, scale)


def read_codebook(path) -> Codebook:
    with open(path, "r", encoding="utf-8") as fh:
        return _parse_codebook_text(fh.read(), str(path))


def default_codebook() -> Codebook:
    """The codebook bundled with the package (fit on the toy corpus)."""
    text = resources.files("ablm.data").joinpath(DEFAULT_CODEBOOK_RESOURCE).read_text()
    return _parse_codebook_text(text, DEFAULT_CODEBOOK_RESOURCE)
