"""Corpora, task datasets, MLM masking, batching and the synthetic bilingual generator."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import ConfigError, DataError, ParseError
from .vocab import CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIALS, Vocabulary

TASK_KINDS = ("token_classification", "sequence_pair_classification", "span_extraction")
IGNORE = -100


# ---------------------------------------------------------------------------
# task datasets


@dataclass
class TaskDataset:
    kind: str
    examples: list[dict]
    labels: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def num_labels(self) -> int:
        return 2 if self.kind == "span_extraction" else len(self.labels)

    def validate(self) -> None:
        label_set = set(self.labels)
        for i, ex in enumerate(self.examples):
            if self.kind == "token_classification":
                if len(ex["tokens"]) != len(ex["tags"]):
                    raise DataError(f"example {i}: {len(ex['tokens'])} tokens but {len(ex['tags'])} tags")
                bad = [t for t in ex["tags"] if t not in label_set]
            elif self.kind == "sequence_pair_classification":
                bad = [ex["label"]] if ex["label"] not in label_set else []
            else:
                start, text = ex["answer_start"], ex["answer_text"]
                if ex["context"][start:start + len(text)] != text:
                    raise DataError(f"example {i}: answer_text does not match context at answer_start {start}")
                bad = []
            if bad:
                raise DataError(f"example {i}: label {bad[0]!r} not in label vocabulary")


def load_task_dataset(path: str | Path, kind: str, labels: list[str] | None = None) -> TaskDataset:
    """Read a task file; ``labels`` fixes the label vocabulary (else first-appearance order)."""
    if kind not in TASK_KINDS:
        raise ConfigError(f"unknown task kind {kind!r}")
    text = Path(path).read_text(encoding="utf-8")
    if kind == "token_classification":
        examples = _parse_conll(text)
        seen = [t for ex in examples for t in ex["tags"]]
    elif kind == "sequence_pair_classification":
        examples = _parse_pairs(text)
        seen = [ex["label"] for ex in examples]
    else:
        examples = _parse_spans(text)
        seen = []
    if labels is None:
        labels = list(dict.fromkeys(seen))
    ds = TaskDataset(kind, examples, list(labels))
    ds.validate()
    return ds


def _parse_conll(text: str) -> list[dict]:
    examples, tokens, tags = [], [], []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            if tokens:
                examples.append({"tokens": tokens, "tags": tags})
                tokens, tags = [], []
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise ParseError("expected 'token<TAB>label'", lineno)
        tokens.append(parts[0])
        tags.append(parts[1])
    if tokens:
        examples.append({"tokens": tokens, "tags": tags})
    return examples


def _parse_pairs(text: str) -> list[dict]:
    examples = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[2]:
            raise ParseError("expected 'premise<TAB>hypothesis<TAB>label'", lineno)
        examples.append({"premise": parts[0], "hypothesis": parts[1], "label": parts[2]})
    return examples


def _parse_spans(text: str) -> list[dict]:
    examples = []
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            ex = {
                "context": str(obj["context"]),
                "question": str(obj["question"]),
                "answer_start": int(obj["answer_start"]),
                "answer_text": str(obj["answer_text"]),
            }
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed span record ({exc})", lineno) from None
        examples.append(ex)
    return examples


def serialize_task_dataset(ds: TaskDataset) -> str:
    if ds.kind == "token_classification":
        blocks = ["".join(f"{w}\t{t}\n" for w, t in zip(ex["tokens"], ex["tags"])) for ex in ds.examples]
        return "\n".join(blocks)
    if ds.kind == "sequence_pair_classification":
        return "".join(f"{ex['premise']}\t{ex['hypothesis']}\t{ex['label']}\n" for ex in ds.examples)
    keys = ("context", "question", "answer_start", "answer_text")
    return "".join(json.dumps({k: ex[k] for k in keys}, ensure_ascii=False) + "\n" for ex in ds.examples)


def save_task_dataset(ds: TaskDataset, path: str | Path) -> None:
    Path(path).write_text(serialize_task_dataset(ds), encoding="utf-8")


# ---------------------------------------------------------------------------
# encoding and batching


@dataclass
class Batch:
    input_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray | None = None
    lang: str | None = None
    origin: list[int] = field(default_factory=list)   # source line/example indices


@dataclass
class MaskedBatch(Batch):
    mlm_labels: np.ndarray | None = None


def encode_line(text: str, vocab: Vocabulary, max_len: int) -> list[int]:
    from .vocab import tokenize
    return [CLS_ID] + tokenize(text, vocab)[: max_len - 2] + [SEP_ID]


def pad(seqs: list[list[int]], fill: int = PAD_ID) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), fill, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1
    return ids, mask


@dataclass
class EncodedTask:
    """Tokenised task examples: ids plus per-kind labels (int, per-token list, or (start, end))."""

    kind: str
    ids: list[list[int]]
    labels: list
    num_labels: int

    def __len__(self) -> int:
        return len(self.ids)

    def batch(self, indices: Iterable[int], lang: str | None = None) -> Batch:
        indices = list(indices)
        ids, mask = pad([self.ids[i] for i in indices])
        if self.kind == "sequence_pair_classification":
            labels = np.array([self.labels[i] for i in indices], dtype=np.int64)
        elif self.kind == "token_classification":
            labels = np.full(ids.shape, IGNORE, dtype=np.int64)
            for r, i in enumerate(indices):
                labels[r, : len(self.labels[i])] = self.labels[i]
        else:
            labels = np.array([self.labels[i] for i in indices], dtype=np.int64).reshape(len(indices), 2)
        return Batch(ids, mask, labels, lang, indices)

    def batches(self, batch_size: int, lang: str | None = None) -> Iterator[Batch]:
        for start in range(0, len(self), batch_size):
            yield self.batch(range(start, min(start + batch_size, len(self))), lang)


def encode_task(ds: TaskDataset, vocab: Vocabulary, max_len: int) -> EncodedTask:
    ids_out, labels_out = [], []
    label_index = {lab: i for i, lab in enumerate(ds.labels)}
    for ex in ds.examples:
        if ds.kind == "token_classification":
            ids, labs = [CLS_ID], [IGNORE]
            for word, tag in zip(ex["tokens"], ex["tags"]):
                pieces = vocab.segment_word(word)
                if len(ids) + len(pieces) > max_len - 1:
                    break
                ids.extend(pieces)
                labs.extend([label_index[tag]] + [IGNORE] * (len(pieces) - 1))
            ids.append(SEP_ID)
            labs.append(IGNORE)
            ids_out.append(ids)
            labels_out.append(labs)
        elif ds.kind == "sequence_pair_classification":
            ids = [CLS_ID] + [i for w in ex["premise"].split() for i in vocab.segment_word(w)] + [SEP_ID]
            if ex["hypothesis"]:
                ids += [i for w in ex["hypothesis"].split() for i in vocab.segment_word(w)] + [SEP_ID]
            ids = ids[: max_len - 1] + ([SEP_ID] if len(ids) > max_len else [])
            ids_out.append(ids)
            labels_out.append(label_index[ex["label"]])
        else:
            ids, span = _encode_span(ex, vocab, max_len)
            ids_out.append(ids)
            labels_out.append(span)
    return EncodedTask(ds.kind, ids_out, labels_out, ds.num_labels)


def _encode_span(ex: dict, vocab: Vocabulary, max_len: int) -> tuple[list[int], tuple[int, int]]:
    ids = [CLS_ID] + [i for w in ex["question"].split() for i in vocab.segment_word(w)] + [SEP_ID]
    a_start = ex["answer_start"]
    a_end = a_start + len(ex["answer_text"])
    context = ex["context"]
    covered = []   # (first piece, last piece) of context words overlapping the answer
    pos = 0
    for word in context.split():
        w_start = context.index(word, pos)
        pos = w_start + len(word)
        pieces = vocab.segment_word(word)
        if len(ids) + len(pieces) > max_len - 1:
            break
        if w_start < a_end and pos > a_start:
            covered.append((len(ids), len(ids) + len(pieces) - 1))
        ids.extend(pieces)
    ids.append(SEP_ID)
    if not covered:
        return ids, (0, 0)   # answer truncated away
    return ids, (covered[0][0], covered[-1][1])


class LanguageStream:
    """Endless batches from one language's sequences, reshuffled each epoch."""

    def __init__(self, lang: str, sequences: list[list[int]], batch_size: int, seed: int):
        if not sequences:
            raise DataError(f"no sequences for language {lang!r}")
        self.lang = lang
        self.sequences = sequences
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = self.rng.permutation(len(sequences))
        self.pos = 0
        self.epoch = 0

    def next_batch(self) -> Batch:
        picked = []
        while len(picked) < self.batch_size:
            if self.pos >= len(self.order):
                self.order = self.rng.permutation(len(self.sequences))
                self.pos = 0
                self.epoch += 1
            picked.append(int(self.order[self.pos]))
            self.pos += 1
        ids, mask = pad([self.sequences[i] for i in picked])
        return Batch(ids, mask, None, self.lang, picked)


class TaskStream:
    """Endless shuffled batches over an encoded task dataset."""

    def __init__(self, data: EncodedTask, batch_size: int, seed: int, lang: str | None = None):
        if len(data) == 0:
            raise DataError("task dataset is empty")
        self.data = data
        self.batch_size = batch_size
        self.lang = lang
        self.rng = np.random.default_rng(seed)

    def __iter__(self) -> Iterator[Batch]:
        while True:
            order = self.rng.permutation(len(self.data))
            for start in range(0, len(order) - self.batch_size + 1 if len(order) >= self.batch_size else 1, self.batch_size):
                yield self.data.batch(order[start:start + self.batch_size].tolist(), self.lang)


# ---------------------------------------------------------------------------
# masked language modelling


def mlm_mask(batch: Batch, rate: float = 0.15, rng: np.random.Generator | None = None, num_tokens: int | None = None) -> MaskedBatch:
    """Select non-special positions with probability ``rate``; 80% MASK, 10% random, 10% unchanged.

    Random replacements are drawn from the non-special ids below ``num_tokens``.
    """
    if not 0.0 < rate < 1.0:
        raise ConfigError(f"mask rate {rate} outside (0, 1)")
    rng = rng or np.random.default_rng(0)
    ids = batch.input_ids
    if num_tokens is None:
        num_tokens = int(ids.max()) + 1
    eligible = (ids >= len(SPECIALS)) & (batch.attention_mask > 0)
    selected = eligible & (rng.random(ids.shape) < rate)
    roll = rng.random(ids.shape)
    random_ids = rng.integers(len(SPECIALS), max(num_tokens, len(SPECIALS) + 1), ids.shape)
    new = ids.copy()
    to_mask = selected & (roll < 0.8)
    to_rand = selected & (roll >= 0.8) & (roll < 0.9)
    new[to_mask] = MASK_ID
    new[to_rand] = random_ids[to_rand]
    labels = np.where(selected, ids, IGNORE)
    return MaskedBatch(new, batch.attention_mask, batch.labels, batch.lang, batch.origin, labels)


# ---------------------------------------------------------------------------
# synthetic bilingual languages

_ONSETS = list("bdfgklmnprstvz")
_VOWELS = list("aeiou")


@dataclass
class SyntheticLanguages:
    """Several surface languages rendering one latent topic grammar.

    Concept ids below ``num_function`` are function words; the rest are content
    words split evenly across ``num_topics`` topics. ``forms[lang][c]`` is the
    surface word of concept ``c`` in ``lang``.
    """

    seed: int
    num_concepts: int
    num_topics: int
    num_function: int
    forms: dict[str, list[str]]
    src: list[str]
    tgt: list[str]
    extra: dict[str, list[str]]

    @property
    def lexicon(self) -> dict[str, str]:
        return dict(zip(self.forms["src"], self.forms["tgt"]))

    def topic_concepts(self, topic: int) -> np.ndarray:
        content = np.arange(self.num_function, self.num_concepts)
        return content[content % self.num_topics == topic]

    def sample_latent(self, rng: np.random.Generator) -> tuple[int, list[int]]:
        topic = int(rng.integers(self.num_topics))
        length = int(rng.integers(4, 8))
        words: list[int] = []
        for _ in range(length):
            if rng.random() < 0.7:
                pool = self.topic_concepts(topic)
            else:
                pool = self.topic_concepts(int(rng.integers(self.num_topics)))
            c = int(pool[_zipf_index(rng, pool.size)])
            if rng.random() < 0.6:
                words.append(c % self.num_function)   # the concept's marker word
            words.append(c)
            if rng.random() < 0.2:
                words.append(int(_zipf_index(rng, self.num_function)))
        return topic, words

    def render(self, latent: list[int], lang: str) -> str:
        forms = self.forms[lang]
        return " ".join(forms[c] for c in latent)

    def render_mixed(self, latent: list[int], langs: list[str], rng: np.random.Generator) -> str:
        return " ".join(self.forms[langs[int(rng.integers(len(langs)))]][c] for c in latent)

    def task(self, n: int, lang: str, seed: int) -> TaskDataset:
        """Topic classification in ``lang`` as a pair-classification dataset with empty hypotheses."""
        rng = np.random.default_rng(seed)
        examples = []
        for _ in range(n):
            topic, latent = self.sample_latent(rng)
            examples.append({"premise": self.render(latent, lang), "hypothesis": "", "label": f"topic{topic}"})
        return TaskDataset("sequence_pair_classification", examples, [f"topic{t}" for t in range(self.num_topics)])

    def code_switched(self, n: int, seed: int) -> list[str]:
        """Lines whose words are drawn independently from every language."""
        rng = np.random.default_rng(seed)
        langs = sorted(self.forms)
        return [self.render_mixed(self.sample_latent(rng)[1], langs, rng) for _ in range(n)]


def _zipf_index(rng: np.random.Generator, n: int) -> int:
    weights = 1.0 / np.arange(1, n + 1)
    return int(rng.choice(n, p=weights / weights.sum()))


def _make_words(rng: np.random.Generator, count: int, taken: set[str]) -> list[str]:
    words = []
    while len(words) < count:
        syllables = int(rng.integers(2, 4))
        w = "".join(_ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))] for _ in range(syllables))
        if w not in taken:
            taken.add(w)
            words.append(w)
    return words


def synth_bilingual_corpus(
    seed: int,
    vocab_size: int,
    lines: int,
    overlap: float = 0.1,
    num_topics: int = 4,
    extra_languages: int = 1,
) -> SyntheticLanguages:
    """Parallel source/target corpora from a shared latent grammar.

    ``vocab_size`` is the number of concepts per language. A fraction
    ``overlap`` of concepts share their surface form between source and target;
    ``overlap=1`` makes the two corpora identical. Extra languages (for a
    multilingual teacher) never share forms.
    """
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError(f"overlap {overlap} outside [0, 1]")
    if vocab_size < 2 * num_topics + 4:
        raise ConfigError("vocab_size too small for the requested number of topics")
    rng = np.random.default_rng(seed)
    num_function = max(2, vocab_size // 4)
    taken: set[str] = set()
    src_forms = _make_words(rng, vocab_size, taken)
    shared = set(rng.permutation(vocab_size)[: int(round(overlap * vocab_size))].tolist())
    fresh = iter(_make_words(rng, vocab_size - len(shared), taken))
    tgt_forms = [src_forms[c] if c in shared else next(fresh) for c in range(vocab_size)]
    forms = {"src": src_forms, "tgt": tgt_forms}
    for k in range(extra_languages):
        forms[f"aux{k}"] = _make_words(rng, vocab_size, taken)
    langs = SyntheticLanguages(seed, vocab_size, num_topics, num_function, forms, [], [], {})
    latents = [langs.sample_latent(rng)[1] for _ in range(lines)]
    langs.src = [langs.render(z, "src") for z in latents]
    langs.tgt = [langs.render(z, "tgt") for z in latents]
    extra_rng = np.random.default_rng([seed, 1])
    for k in range(extra_languages):
        lang = f"aux{k}"
        langs.extra[lang] = [langs.render(langs.sample_latent(extra_rng)[1], lang) for _ in range(lines)]
    return langs


def read_lines(path: str | Path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln.strip()]


def write_lines(path: str | Path, lines: Iterable[str]) -> None:
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")


def split_heldout(items: list, fraction: float, seed: int) -> tuple[list, list]:
    """Deterministic (train, heldout) split with at least one held-out item."""
    order = np.random.default_rng(seed).permutation(len(items))
    n_held = max(1, int(round(fraction * len(items)))) if len(items) > 1 else 0
    held = sorted(order[:n_held].tolist())
    held_set = set(held)
    return [items[i] for i in range(len(items)) if i not in held_set], [items[i] for i in held]
