"""Closed vocabulary with fixed reserved tokens.

Reserved tokens occupy the lowest indices and never come from data:
padding, unknown, utterance terminator, span terminator, and the delimiter
separating the informable region of a span from the requestable region.
"""

from __future__ import annotations

import hashlib
from typing import Dict, Iterable, List

PAD = "<pad>"
UNK = "<unk>"
EOS_UTT = "</u>"
EOS_SPAN = "</b>"
SPAN_DELIM = "<sep>"

RESERVED = (PAD, UNK, EOS_UTT, EOS_SPAN, SPAN_DELIM)

PAD_ID = 0
UNK_ID = 1
EOS_UTT_ID = 2
EOS_SPAN_ID = 3
SPAN_DELIM_ID = 4


class Vocabulary:
    def __init__(self, tokens: Iterable[str]):
        self.tokens: List[str] = list(RESERVED)
        seen = set(self.tokens)
        for t in tokens:
            if t not in seen:
                seen.add(t)
                self.tokens.append(t)
        self.index: Dict[str, int] = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def encode(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def decode(self, idx: int) -> str:
        return self.tokens[idx]

    def encode_seq(self, tokens: Iterable[str]) -> List[int]:
        return [self.encode(t) for t in tokens]

    def decode_seq(self, ids: Iterable[int]) -> List[str]:
        return [self.tokens[i] for i in ids]

    def content_hash(self) -> str:
        h = hashlib.sha256("\n".join(self.tokens).encode("utf-8"))
        return h.hexdigest()[:16]
