from __future__ import annotations

from dataclasses import dataclass

DEFAULT_SYMBOLS = "abcdefghijklmnopqrstuvwxyzABCDEF"


@dataclass(frozen=True)
class Vocabulary:
    """Output alphabet shared by the CTC branch and the attention decoder.

    Token ids ``0..n-1`` are the symbols. Index ``n`` is EOS in the decoder's
    output space and blank in the CTC output space; the two spaces never mix.
    BOS (``n + 1``) exists only as a decoder input.
    """

    symbols: str = DEFAULT_SYMBOLS

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols) or not self.symbols:
            raise ValueError("vocabulary symbols must be unique and non-empty")

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def eos(self) -> int:
        return len(self.symbols)

    @property
    def blank(self) -> int:
        return len(self.symbols)

    @property
    def bos(self) -> int:
        return len(self.symbols) + 1

    @property
    def num_classes(self) -> int:
        """Width of both the decoder output and the CTC output."""
        return len(self.symbols) + 1

    @property
    def embedding_size(self) -> int:
        return len(self.symbols) + 2

    def encode(self, text: str) -> list[int]:
        try:
            return [self.symbols.index(ch) for ch in text]
        except ValueError:
            bad = [ch for ch in text if ch not in self.symbols]
            raise ValueError(f"symbols outside vocabulary: {bad!r}") from None

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.symbols):
                raise ValueError(f"token id {i} outside vocabulary")
            out.append(self.symbols[i])
        return "".join(out)
