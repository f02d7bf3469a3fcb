"""Unified token inventory for residue (1D) and structure-token (3Di) inputs.

Both 20-letter alphabets live in one id space, namespaced by disjoint id
ranges so the same surface letter can mean different things at each level.
Specials come first; a single MASK id is shared by both levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

AA_LETTERS = "ACDEFGHIKLMNPQRSTVWY"
TDI_LETTERS = "abcdefghijklmnopqrst"

PAD_ID = 0
MASK_ID = 1
CLS_ID = 2
UNK_ID = 3

LEVEL_1D = "1d"
LEVEL_3DI = "3di"

# Token-type ids fed to the encoder: 0 marks residue tokens, 1 marks 3Di.
TYPE_1D = 0
TYPE_3DI = 1


@dataclass(frozen=True)
class Vocab:
    """Dense, stable token->id mapping over specials + V1 + V2."""

    v1_start: int = 4
    v2_start: int = 24
    size: int = 44
    _aa_to_id: dict = field(default_factory=dict, repr=False)
    _tdi_to_id: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for i, ch in enumerate(AA_LETTERS):
            self._aa_to_id[ch] = self.v1_start + i
        for i, ch in enumerate(TDI_LETTERS):
            self._tdi_to_id[ch] = self.v2_start + i

    # -- encoding -----------------------------------------------------------

    def encode_residues(self, seq: str) -> np.ndarray:
        try:
            return np.array([self._aa_to_id[c] for c in seq], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"unknown residue letter {e.args[0]!r}") from None

    def encode_struct(self, seq: str) -> np.ndarray:
        try:
            return np.array([self._tdi_to_id[c] for c in seq], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"unknown 3Di letter {e.args[0]!r}") from None

    def encode(self, seq: str, level: str) -> np.ndarray:
        if level == LEVEL_1D:
            return self.encode_residues(seq)
        if level == LEVEL_3DI:
            return self.encode_struct(seq)
        raise ValueError(f"unknown level {level!r}")

    # -- decoding -----------------------------------------------------------

    def decode_residues(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not self.is_v1(i):
                raise ValueError(f"id {i} is not a residue token")
            out.append(AA_LETTERS[i - self.v1_start])
        return "".join(out)

    def decode_struct(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not self.is_v2(i):
                raise ValueError(f"id {i} is not a 3Di token")
            out.append(TDI_LETTERS[i - self.v2_start])
        return "".join(out)

    # -- ranges -------------------------------------------------------------

    def is_v1(self, token_id: int) -> bool:
        return self.v1_start <= token_id < self.v1_start + 20

    def is_v2(self, token_id: int) -> bool:
        return self.v2_start <= token_id < self.v2_start + 20

    def level_range(self, level: str) -> tuple[int, int]:
        """Half-open id range of one level's alphabet."""
        if level == LEVEL_1D:
            return self.v1_start, self.v1_start + 20
        if level == LEVEL_3DI:
            return self.v2_start, self.v2_start + 20
        raise ValueError(f"unknown level {level!r}")

    def type_id(self, level: str) -> int:
        if level == LEVEL_1D:
            return TYPE_1D
        if level == LEVEL_3DI:
            return TYPE_3DI
        raise ValueError(f"unknown level {level!r}")


DEFAULT_VOCAB = Vocab()
