"""WordPiece-style vocabulary, unigram statistics and vocabulary reduction."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable

import numpy as np

from .errors import ContractError, DataError, DimensionError, DomainError

if TYPE_CHECKING:
    from .model import Model

SPECIALS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"


class Vocabulary:
    """Token strings with contiguous ids; the five special tokens sit at ids 0-4."""

    def __init__(self, tokens: Iterable[str]):
        self.tokens: list[str] = list(tokens)
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise DataError(f"vocabulary must start with {SPECIALS}")
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary tokens are not unique")
        self._max_len = max(len(t) for t in self.tokens)
        self._cache: dict[str, tuple[int, ...]] = {}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> Vocabulary:
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"))

    def segment_word(self, word: str) -> tuple[int, ...]:
        """Greedy longest-match segmentation of one whitespace-free word.

        Non-initial pieces are looked up with the continuation prefix. A run of
        characters no vocabulary piece starts with collapses into one UNK.
        """
        hit = self._cache.get(word)
        if hit is not None:
            return hit
        if word in self.index:
            out: tuple[int, ...] = (self.index[word],)
        else:
            ids: list[int] = []
            i, n = 0, len(word)
            in_unk = False
            while i < n:
                prefix = CONTINUATION if i > 0 else ""
                found = None
                for j in range(min(n, i + self._max_len), i, -1):
                    tok = self.index.get(prefix + word[i:j])
                    if tok is not None:
                        found = (tok, j)
                        break
                if found is None:
                    if not in_unk:
                        ids.append(UNK_ID)
                        in_unk = True
                    i += 1
                else:
                    ids.append(found[0])
                    in_unk = False
                    i = found[1]
            out = tuple(ids)
        self._cache[word] = out
        return out


def build_vocabulary(lines: Iterable[str], max_words: int | None = None) -> Vocabulary:
    """Specials, then every character (plain and continuation), then words by frequency.

    Ties in frequency are broken alphabetically so the result is deterministic.
    """
    counts: Counter[str] = Counter()
    for line in lines:
        counts.update(line.split())
    chars = sorted({c for w in counts for c in w})
    tokens = list(SPECIALS)
    seen = set(tokens)
    for c in chars:
        for tok in (c, CONTINUATION + c):
            if tok not in seen:
                tokens.append(tok)
                seen.add(tok)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    if max_words is not None:
        ranked = ranked[:max_words]
    for word, _ in ranked:
        if word not in seen:
            tokens.append(word)
            seen.add(word)
    return Vocabulary(tokens)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    ids: list[int] = []
    for word in text.split():
        ids.extend(vocab.segment_word(word))
    return ids


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    words: list[str] = []
    for i in ids:
        tok = vocab.tokens[i]
        if tok.startswith(CONTINUATION) and words:
            words[-1] += tok[len(CONTINUATION):]
        else:
            words.append(tok)
    return " ".join(words)


def unigram_probs(lines: Iterable[str], vocab: Vocabulary) -> np.ndarray:
    """Relative token frequencies over the tokenised corpus, no smoothing."""
    counts = np.zeros(len(vocab), dtype=np.int64)
    for line in lines:
        for word in line.split():
            for i in vocab.segment_word(word):
                counts[i] += 1
    total = counts.sum()
    if total == 0:
        raise DomainError("corpus contains no tokens")
    return counts / total


def save_probs(path: str | Path, probs: np.ndarray, vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for tok, p in zip(vocab.tokens, probs):
            fh.write(f"{tok}\t{float(p)!r}\n")


def load_probs(path: str | Path, vocab: Vocabulary) -> np.ndarray:
    probs = np.zeros(len(vocab))
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            tok, _, value = line.rstrip("\n").rpartition("\t")
            if tok not in vocab:
                raise DataError(f"line {lineno}: unknown token {tok!r}")
            probs[vocab.index[tok]] = float(value)
    return probs


@dataclass(frozen=True)
class VocabMap:
    """Surviving token ids of a reduced vocabulary and the old/new id mappings."""

    kept: np.ndarray          # sorted old ids
    old_to_new: np.ndarray    # -1 for dropped ids
    new_to_old: np.ndarray

    @classmethod
    def from_kept(cls, kept: Iterable[int], old_size: int) -> VocabMap:
        kept_arr = np.unique(np.asarray(list(kept), dtype=np.int64))
        if kept_arr.size and (kept_arr[0] < 0 or kept_arr[-1] >= old_size):
            raise ContractError(f"kept id out of range for vocabulary of {old_size}")
        missing = [i for i in range(len(SPECIALS)) if i not in set(kept_arr.tolist())]
        if missing:
            raise ContractError(f"special token ids {missing} must be kept")
        old_to_new = np.full(old_size, -1, dtype=np.int64)
        old_to_new[kept_arr] = np.arange(kept_arr.size)
        return cls(kept_arr, old_to_new, kept_arr.copy())

    @classmethod
    def identity(cls, size: int) -> VocabMap:
        return cls.from_kept(range(size), size)

    @property
    def old_size(self) -> int:
        return int(self.old_to_new.size)

    def __len__(self) -> int:
        return int(self.kept.size)

    def map_ids(self, ids: np.ndarray) -> np.ndarray:
        """Old ids to new ids; dropped tokens become UNK."""
        new = self.old_to_new[np.asarray(ids)]
        return np.where(new < 0, UNK_ID, new)

    def apply(self, vocab: Vocabulary) -> Vocabulary:
        return Vocabulary(vocab.tokens[i] for i in self.kept)

    def save(self, path: str | Path) -> None:
        body = "".join(f"{i}\n" for i in self.kept.tolist())
        Path(path).write_text(f"# old_size\t{self.old_size}\n" + body, encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> VocabMap:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or not lines[0].startswith("# old_size\t"):
            raise DataError(f"{path}: missing old_size header")
        try:
            return cls.from_kept([int(x) for x in lines[1:] if x], int(lines[0].split("\t")[1]))
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None


def reduce_vocabulary(p_src: np.ndarray, p_tgt: np.ndarray, threshold: float = 1e-6) -> VocabMap:
    """Keep specials and every token whose probability in either corpus is >= threshold."""
    p_src, p_tgt = np.asarray(p_src), np.asarray(p_tgt)
    if p_src.shape != p_tgt.shape or p_src.ndim != 1:
        raise DimensionError(f"probability vectors differ: {p_src.shape} vs {p_tgt.shape}")
    keep = (p_src >= threshold) | (p_tgt >= threshold)
    keep[: len(SPECIALS)] = True
    return VocabMap.from_kept(np.flatnonzero(keep), p_src.size)


# Parameters whose rows are indexed by token id.
VOCAB_ROW_PARAMS = ("embeddings.token", "head.mlm.decoder.weight", "head.mlm.decoder.bias")


def slice_embeddings(model: Model, vmap: VocabMap) -> Model:
    """Copy of ``model`` whose token-indexed rows are restricted to ``vmap.kept``."""
    if vmap.old_size != model.config.vocab_size:
        raise ContractError(
            f"map covers {vmap.old_size} ids but model vocabulary is {model.config.vocab_size}"
        )
    params = {}
    for name, t in model.params.items():
        if name in VOCAB_ROW_PARAMS:
            params[name] = t.data[vmap.kept].copy()
        else:
            params[name] = t.data.copy()
    return model.rebuild(params, vocab_size=len(vmap))
