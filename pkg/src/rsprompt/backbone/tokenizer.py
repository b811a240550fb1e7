"""Byte-level BPE tokenizer producing fixed-length 77-token sequences.

Reads the published merge table (``bpe_simple_vocab_16e6.txt.gz``) and
reproduces the reference CLIP tokenization: ftfy + html cleanup, whitespace
collapsing, lower-casing, regex pre-splitting, then greedy rank-ordered merges.
"""

from __future__ import annotations

import gzip
import html
import logging
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import ftfy
import numpy as np
import regex as re

logger = logging.getLogger(__name__)

CONTEXT_LENGTH = 77
SOS_TOKEN = "<start_of_text>"
EOS_TOKEN = "<end_of_text>"

_SPLIT_PATTERN = re.compile(
    r"""<start_of_text>|<end_of_text>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable unicode char table used by the merge file."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(2**8):
        if b not in bs:
            bs.append(b)
            cs.append(2**8 + n)
            n += 1
    return dict(zip(bs, (chr(c) for c in cs)))


def _pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return {(a, b) for a, b in zip(word[:-1], word[1:])}


def clean_text(text: str) -> str:
    text = ftfy.fix_text(text)
    text = html.unescape(html.unescape(text)).strip()
    text = " ".join(text.split())
    return text.lower()


@dataclass(frozen=True)
class TokenSequence:
    """Fixed-length id sequence with the positions the prompt machinery needs.

    ``class_span`` is a half-open ``(start, end)`` range; it is empty
    (``start == end``) for text that carries no class name.
    """

    ids: np.ndarray
    eos_position: int
    class_span: tuple[int, int]

    def __post_init__(self):
        if self.ids.shape != (CONTEXT_LENGTH,):
            raise ValueError(f"token sequence must have length {CONTEXT_LENGTH}, got {self.ids.shape}")


class BPETokenizer:
    """CLIP byte-pair-encoding tokenizer over the 49,408-entry reference vocabulary."""

    def __init__(self, merges_path=None):
        if merges_path is None:
            merges_path = resources.files("rsprompt.assets") / "bpe_simple_vocab_16e6.txt.gz"
        with gzip.open(merges_path, "rt", encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        # first line is a header; the vocabulary keeps 49152 - 256 - 2 merges
        merges = [tuple(line.split()) for line in lines[1 : 49152 - 256 - 2 + 1]]
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {v: k for k, v in self.byte_encoder.items()}
        vocab = list(self.byte_encoder.values())
        vocab = vocab + [v + "</w>" for v in vocab]
        vocab.extend("".join(m) for m in merges)
        vocab.extend([SOS_TOKEN, EOS_TOKEN])
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.decoder = {i: tok for tok, i in self.encoder.items()}
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self._cache = {SOS_TOKEN: SOS_TOKEN, EOS_TOKEN: EOS_TOKEN}
        self.vocab_size = len(self.encoder)
        self.sos_id = self.encoder[SOS_TOKEN]
        self.eos_id = self.encoder[EOS_TOKEN]
        self.pad_id = 0

    def _bpe(self, token: str) -> str:
        if token in self._cache:
            return self._cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            merged: list[str] = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    merged.extend(word[i:])
                    break
                merged.extend(word[i:j])
                i = j
                if word[i] == first and i < len(word) - 1 and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
            if len(word) == 1:
                break
            pairs = _pairs(word)
        out = " ".join(word)
        self._cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        """Body token ids for ``text`` (no start/end markers, no padding)."""
        ids: list[int] = []
        for token in _SPLIT_PATTERN.findall(clean_text(text)):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[piece] for piece in self._bpe(token).split(" "))
        return ids

    def decode(self, ids) -> str:
        text = "".join(self.decoder[int(i)] for i in ids)
        raw = bytearray(self.byte_decoder[c] for c in text)
        return raw.decode("utf-8", errors="replace").replace("</w>", " ").strip()


class FoldedTokenizer:
    """Reference BPE folded onto a tiny vocabulary, for the micro backbone.

    Id 0 is padding, the two highest ids are start/end markers, and every BPE
    id is folded into ``[1, vocab_size - 2)``.
    """

    def __init__(self, vocab_size: int = 64, base: BPETokenizer | None = None):
        if vocab_size < 4:
            raise ValueError("folded vocabulary needs at least 4 entries")
        self.base = base or default_bpe()
        self.vocab_size = vocab_size
        self.pad_id = 0
        self.sos_id = vocab_size - 2
        self.eos_id = vocab_size - 1

    def encode(self, text: str) -> list[int]:
        return [i % (self.vocab_size - 3) + 1 for i in self.base.encode(text)]


@lru_cache(maxsize=1)
def default_bpe() -> BPETokenizer:
    return BPETokenizer()


def pack(tokenizer, prefix: list[int], name: list[int], suffix: list[int]) -> TokenSequence:
    """Bracket ``prefix + name + suffix`` with start/end ids and pad to 77.

    Over-long bodies drop the suffix first, then leading prefix tokens, so
    the class-name tokens survive; only a class name longer than the whole
    body budget is itself cut.
    """
    budget = CONTEXT_LENGTH - 2
    if len(prefix) + len(name) + len(suffix) > budget:
        logger.warning("prompt body of %d tokens truncated to %d", len(prefix) + len(name) + len(suffix), budget)
        suffix = suffix[: max(0, budget - len(prefix) - len(name))]
        keep = max(0, budget - len(name) - len(suffix))
        prefix = prefix[len(prefix) - keep :] if keep else []
        name = name[:budget]
    body = prefix + name + suffix
    ids = np.full(CONTEXT_LENGTH, tokenizer.pad_id, dtype=np.int64)
    ids[0] = tokenizer.sos_id
    ids[1 : 1 + len(body)] = body
    eos = 1 + len(body)
    ids[eos] = tokenizer.eos_id
    start = 1 + len(prefix)
    return TokenSequence(ids=ids, eos_position=eos, class_span=(start, start + len(name)))


def tokenize(text: str, tokenizer=None) -> TokenSequence:
    tokenizer = tokenizer or default_bpe()
    ids = tokenizer.encode(text)
    if len(ids) > CONTEXT_LENGTH - 2:
        logger.warning("text of %d tokens truncated to %d", len(ids), CONTEXT_LENGTH - 2)
        ids = ids[: CONTEXT_LENGTH - 2]
    return pack(tokenizer, ids, [], [])


def tokenize_prompt(template: str, classname: str, tokenizer=None) -> TokenSequence:
    """Fill ``template`` ('{}' placeholder) and record where the class tokens land."""
    tokenizer = tokenizer or default_bpe()
    if "{}" not in template:
        raise ValueError(f"template {template!r} has no '{{}}' placeholder")
    head, tail = template.split("{}", 1)
    return pack(tokenizer, tokenizer.encode(head), tokenizer.encode(classname), tokenizer.encode(tail))
