"""Tokenizers for greedy decoding.

The bundled tokenizer is byte-level. Its three special tokens occupy the top
of the vocabulary (SOT = n_vocab-3, EOT = n_vocab-2, PAD = n_vocab-1), so a
vocabulary of 259 holds every byte value plus the specials.
"""

from typing import Protocol, Sequence


class Tokenizer(Protocol):
    """What greedy decoding needs from a tokenizer"""

    @property
    def sot_sequence(self) -> tuple[int, ...]: ...

    @property
    def eot(self) -> int: ...

    def decode(self, token_ids: Sequence[int]) -> str: ...


class ByteTokenizer:
    """UTF-8 byte tokenizer with SOT / EOT / PAD specials"""

    def __init__(self, n_vocab: int):
        if n_vocab < 4:
            raise ValueError(f"byte tokenizer needs n_vocab >= 4, got {n_vocab}")
        self.n_vocab = n_vocab
        self.sot = n_vocab - 3
        self.eot_id = n_vocab - 2
        self.pad = n_vocab - 1
        # Byte ids that do not collide with the specials
        self.n_bytes = min(256, self.sot)

    @property
    def sot_sequence(self) -> tuple[int, ...]:
        return (self.sot,)

    @property
    def eot(self) -> int:
        return self.eot_id

    def encode(self, text: str) -> list[int]:
        ids = list(text.encode("utf-8"))
        too_large = [b for b in ids if b >= self.n_bytes]
        if too_large:
            raise ValueError(f"bytes {sorted(set(too_large))} not representable with n_vocab={self.n_vocab}")
        return ids

    def decode(self, token_ids: Sequence[int]) -> str:
        data = bytes(t for t in token_ids if 0 <= t < self.n_bytes)
        return data.decode("utf-8", errors="replace")
