"""
Character vocabulary shared by the corpus and the CTC head.
"""

import string
from typing import Iterable, List, Sequence

from .errors import InvalidArgumentError

BLANK = "<blank>"
WORD_BOUNDARY = "|"
APOSTROPHE = "'"
UNKNOWN = "<unk>"

SPECIAL_SYMBOLS = (BLANK, WORD_BOUNDARY, APOSTROPHE, UNKNOWN)


class Vocab:
    """Ordered CTC symbol inventory: 4 specials followed by 26 letters."""

    def __init__(self, letters: str = string.ascii_lowercase):
        if len(set(letters)) != len(letters):
            raise InvalidArgumentError(f"Duplicate letters in vocabulary: {letters!r}")
        self.symbols: List[str] = list(SPECIAL_SYMBOLS) + list(letters)
        self.blank_id = 0
        self._index = {symbol: i for i, symbol in enumerate(self.symbols)}

    def __len__(self) -> int:
        return len(self.symbols)

    def index(self, symbol: str) -> int:
        """Id of a non-blank symbol."""
        if symbol not in self._index or symbol == BLANK:
            raise InvalidArgumentError(f"Symbol {symbol!r} is not in the vocabulary")
        return self._index[symbol]

    @property
    def word_boundary_id(self) -> int:
        return self._index[WORD_BOUNDARY]

    @property
    def unknown_id(self) -> int:
        return self._index[UNKNOWN]

    def is_valid_text(self, text: str) -> bool:
        """True if every character maps to a non-special symbol or the word boundary."""
        return all(ch == " " or (ch in self._index and ch not in (BLANK, UNKNOWN)) for ch in text)

    def encode(self, text: str) -> List[int]:
        """Map a transcript to symbol ids; spaces become word boundaries."""
        ids = []
        for ch in text:
            if ch == " ":
                ids.append(self.word_boundary_id)
            else:
                ids.append(self._index.get(ch, self.unknown_id))
        return ids

    def decode(self, ids: Iterable[int]) -> str:
        chars = []
        for i in ids:
            symbol = self.symbols[int(i)]
            if symbol == BLANK:
                continue
            if symbol == WORD_BOUNDARY:
                chars.append(" ")
            elif symbol == UNKNOWN:
                chars.append("?")
            else:
                chars.append(symbol)
        return "".join(chars)

    def validate(self, text: str) -> None:
        if not text:
            raise InvalidArgumentError("Transcript must be non-empty")
        if not self.is_valid_text(text):
            bad = sorted({ch for ch in text if ch != " " and ch not in self._index})
            raise InvalidArgumentError(f"Transcript has characters outside the vocabulary: {bad}")


def collapse(frame_ids: Sequence[int], blank_id: int = 0) -> List[int]:
    """CTC collapse: merge repeated ids, then drop blanks."""
    out: List[int] = []
    previous = None
    for i in frame_ids:
        i = int(i)
        if i != previous and i != blank_id:
            out.append(i)
        previous = i
    return out
