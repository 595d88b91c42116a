"""Masked-language-model training: teacher pretraining, scratch students, language SFTs."""

from __future__ import annotations

from typing import Iterator, Mapping, Sequence

import numpy as np

from . import tensor as T
from .data import Batch, LanguageStream, MaskedBatch, mlm_mask, pad, split_heldout
from .errors import ContractError
from .model import Model, forward
from .sft import SftConfig, SftResult, lt_sft_train
from .train import FitResult, fit, load_arrays


def mlm_loss(model: Model, batch: MaskedBatch, rng=None, train: bool = True) -> T.Tensor:
    if model.head is None or model.head.kind != "mlm":
        raise ContractError("MLM training needs a model with an mlm head")
    trace = forward(model, batch.input_ids, batch.attention_mask, train=train, rng=rng)
    return T.cross_entropy(trace.logits, batch.mlm_labels)


def _mixed_batches(streams: Sequence[LanguageStream], rate: float, num_tokens: int, seed: int) -> Iterator[MaskedBatch]:
    """Each batch comes from one uniformly chosen stream."""
    rng = np.random.default_rng(seed)
    while True:
        stream = streams[int(rng.integers(len(streams)))]
        yield mlm_mask(stream.next_batch(), rate, rng, num_tokens)


def _heldout_batches(held: Mapping[str, list], batch_size: int, rate: float, num_tokens: int, seed: int) -> list[MaskedBatch]:
    rng = np.random.default_rng(seed)
    out = []
    for lang, seqs in held.items():
        for start in range(0, len(seqs), batch_size):
            ids, mask = pad([list(s) for s in seqs[start:start + batch_size]])
            out.append(mlm_mask(Batch(ids, mask, None, lang), rate, rng, num_tokens))
    return out


def _validator(batches: list[MaskedBatch]):
    def validate(model: Model) -> float:
        with T.no_grad():
            losses = [mlm_loss(model, b, train=False).item() for b in batches]
        return float(np.mean(losses))
    return validate


def pretrain_mlm(
    model: Model,
    corpora: Mapping[str, Sequence[Sequence[int]]],
    steps: int,
    batch_size: int = 16,
    lr: float = 1e-3,
    mask_rate: float = 0.15,
    heldout_fraction: float = 0.05,
    eval_interval: int = 500,
    seed: int = 0,
) -> FitResult:
    """Full MLM training of every parameter, one language per batch; updates ``model`` in place."""
    streams, held = [], {}
    for k, (lang, seqs) in enumerate(sorted(corpora.items())):
        train, val = split_heldout(list(seqs), heldout_fraction, seed + 10 + k)
        streams.append(LanguageStream(lang, train, batch_size, seed + 20 + k))
        held[lang] = val
    num_tokens = model.config.vocab_size
    val_batches = _heldout_batches(held, batch_size, mask_rate, num_tokens, seed + 1)
    result = fit(model, lambda m, b, r: (mlm_loss(m, b, r), {}),
                 _mixed_batches(streams, mask_rate, num_tokens, seed + 2), steps, lr,
                 model.params.keys(), validate=_validator(val_batches), eval_interval=eval_interval,
                 seed=seed + 3)
    load_arrays(model, result.arrays)
    return result


def train_language_sft(
    model: Model,
    sequences: Sequence[Sequence[int]],
    config: SftConfig,
    lang: str = "lang",
    mask_rate: float = 0.15,
    heldout_fraction: float = 0.05,
) -> SftResult:
    """LT-SFT of an MLM-headed model on one language's corpus."""
    train, val = split_heldout(list(sequences), heldout_fraction, config.seed)
    stream = LanguageStream(lang, train, config.batch_size, config.seed + 1)
    num_tokens = model.config.vocab_size
    val_batches = _heldout_batches({lang: val}, config.batch_size, mask_rate, num_tokens, config.seed + 2)
    return lt_sft_train(model, lambda m, b, r: (mlm_loss(m, b, r), {}),
                        _mixed_batches([stream], mask_rate, num_tokens, config.seed + 3), config,
                        validate=_validator(val_batches))
