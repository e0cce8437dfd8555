"""Character-level vocabulary shared by every model in a run."""

from __future__ import annotations

from typing import Iterable

import numpy as np

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
PAD, BOS, EOS, UNK = range(4)


class TokenizeError(ValueError):
    pass


class Vocab:
    def __init__(self, chars: Iterable[str]):
        chars = sorted(set(chars))
        for ch in chars:
            if len(ch) != 1:
                raise ValueError(f"vocabulary entries must be single characters, got {ch!r}")
        self.chars: list[str] = chars
        self.itos: list[str] = list(SPECIALS) + chars
        self.stoi: dict[str, int] = {ch: i + len(SPECIALS) for i, ch in enumerate(chars)}

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "Vocab":
        seen: set[str] = set()
        for t in texts:
            seen.update(t)
        return cls(seen)

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.chars == other.chars

    def encode(self, text: str, bos: bool = True, eos: bool = False, strict: bool = True) -> np.ndarray:
        ids = [BOS] if bos else []
        for i, ch in enumerate(text):
            idx = self.stoi.get(ch)
            if idx is None:
                if strict:
                    raise TokenizeError(f"character {ch!r} at offset {i} is not in the vocabulary")
                idx = UNK
            ids.append(idx)
        if eos:
            ids.append(EOS)
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(SPECIALS):
                continue
            out.append(self.itos[i])
        return "".join(out)

    def to_dict(self) -> dict:
        return {"chars": "".join(self.chars)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(list(d["chars"]))
