"""Task metrics, efficiency measurement and comparison tables."""

from __future__ import annotations

import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE, EncodedTask
from .errors import ContractError, DomainError
from .model import Model, count_flops, count_params, forward
from .vocab import VocabMap

HEAD_FOR_TASK = {
    "token_classification": "token_classification",
    "sequence_pair_classification": "sequence_classification",
    "span_extraction": "span_extraction",
}
MAX_ANSWER_TOKENS = 30


@dataclass
class EvalReport:
    metric: str
    value: float
    per_class: dict[str, float] = field(default_factory=dict)
    count: int = 0
    extra: dict[str, float] = field(default_factory=dict)


@dataclass
class EfficiencyReport:
    param_count: int
    flops_per_example: float
    seconds_per_example: float
    param_ratio: float | None = None
    flops_ratio: float | None = None
    speed_ratio: float | None = None   # candidate throughput / reference throughput


# ---------------------------------------------------------------------------
# metrics


def bio_spans(tags: Sequence[str]) -> set[tuple[str, int, int]]:
    """Entity chunks (type, start, end-inclusive) from BIO tags.

    An I- tag that does not continue a chunk of the same type opens a new one.
    """
    spans = set()
    start, kind = None, None
    for i, tag in enumerate(list(tags) + ["O"]):
        prefix, _, label = tag.partition("-")
        continues = prefix == "I" and kind == label and start is not None
        if start is not None and not continues:
            spans.add((kind, start, i - 1))
            start, kind = None, None
        if prefix in ("B", "I") and not continues:
            start, kind = i, label
    return spans


def entity_f1(gold: Sequence[Sequence[str]], pred: Sequence[Sequence[str]]) -> tuple[float, dict[str, float]]:
    tp, n_gold, n_pred = 0, 0, 0
    per: dict[str, list[int]] = {}
    for g_tags, p_tags in zip(gold, pred):
        g, p = bio_spans(g_tags), bio_spans(p_tags)
        tp += len(g & p)
        n_gold += len(g)
        n_pred += len(p)
        for kind, *_ in g | p:
            per.setdefault(kind, [0, 0, 0])
        for kind, *_ in g & p:
            per[kind][0] += 1
        for kind, *_ in g:
            per[kind][1] += 1
        for kind, *_ in p:
            per[kind][2] += 1
    return _f1(tp, n_gold, n_pred), {k: _f1(*v) for k, v in sorted(per.items())}


def _f1(tp: int, n_gold: int, n_pred: int) -> float:
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_gold
    return 100.0 * 2 * precision * recall / (precision + recall)


def best_span(start_logits: np.ndarray, end_logits: np.ndarray, length: int, max_len: int = MAX_ANSWER_TOKENS) -> tuple[int, int]:
    """Span (i, j), i <= j, maximising start_logits[i] + end_logits[j] within ``length`` positions."""
    s, e = start_logits[:length], end_logits[:length]
    scores = s[:, None] + e[None, :]
    i, j = np.indices(scores.shape)
    scores = np.where((j >= i) & (j - i < max_len), scores, -np.inf)
    flat = int(np.argmax(scores))
    return divmod(flat, length)


def span_scores(gold: Sequence[tuple[int, int]], pred: Sequence[tuple[int, int]]) -> tuple[float, float]:
    """Exact match and token-overlap F1 over answer positions, both in percent."""
    em, f1 = 0.0, 0.0
    for (gs, ge), (ps, pe) in zip(gold, pred):
        em += float(gs == ps and ge == pe)
        overlap = max(0, min(ge, pe) - max(gs, ps) + 1)
        if overlap:
            precision, recall = overlap / (pe - ps + 1), overlap / (ge - gs + 1)
            f1 += 2 * precision * recall / (precision + recall)
    n = max(len(gold), 1)
    return 100.0 * em / n, 100.0 * f1 / n


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("BISTIL_THREADS", "1")))
    except ValueError:
        return 1


def predict_logits(model: Model, data: EncodedTask, vmap: VocabMap | None = None, batch_size: int = 32) -> list[np.ndarray]:
    """Per-example logits (unpadded), in dataset order regardless of thread count."""
    batches = list(data.batches(batch_size))

    def run(batch):
        ids = batch.input_ids if vmap is None else vmap.map_ids(batch.input_ids)
        with T.no_grad():
            logits = forward(model, ids, batch.attention_mask).logits.data
        lengths = batch.attention_mask.sum(axis=1)
        return [logits[r] if logits.ndim == 2 else logits[r, : lengths[r]] for r in range(len(lengths))]

    workers = min(_threads(), len(batches)) or 1
    if workers == 1:
        chunks = [run(b) for b in batches]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(run, batches))
    return [row for chunk in chunks for row in chunk]


def evaluate(model: Model, data: EncodedTask, labels: Sequence[str] | None = None,
             vmap: VocabMap | None = None, batch_size: int = 32) -> EvalReport:
    """Entity F1 (token classification), accuracy (pair classification) or EM/F1 (spans)."""
    if model.head is None or HEAD_FOR_TASK.get(data.kind) != model.head.kind:
        raise ContractError(f"model head {getattr(model.head, 'kind', None)} cannot score {data.kind} data")
    if model.head.num_labels != data.num_labels:
        raise ContractError(f"head predicts {model.head.num_labels} labels, data has {data.num_labels}")
    logits = predict_logits(model, data, vmap, batch_size)
    if data.kind == "sequence_pair_classification":
        pred = np.array([int(np.argmax(z)) for z in logits])
        gold = np.array(data.labels)
        names = list(labels) if labels else [str(i) for i in range(data.num_labels)]
        per = {names[c]: 100.0 * float(np.mean(pred[gold == c] == c)) for c in range(data.num_labels) if np.any(gold == c)}
        return EvalReport("accuracy", 100.0 * float(np.mean(pred == gold)) if len(gold) else 0.0, per, len(gold))
    if data.kind == "token_classification":
        names = list(labels) if labels else [str(i) for i in range(data.num_labels)]
        gold_tags, pred_tags = [], []
        for z, lab in zip(logits, data.labels):
            lab = np.asarray(lab)
            keep = lab != IGNORE
            gold_tags.append([names[i] for i in lab[keep]])
            pred_tags.append([names[i] for i in np.argmax(z[: len(lab)], axis=-1)[keep]])
        f1, per = entity_f1(gold_tags, pred_tags)
        return EvalReport("entity_f1", f1, per, len(gold_tags))
    pred = [best_span(z[:, 0], z[:, 1], len(z)) for z in logits]
    em, f1 = span_scores([tuple(s) for s in data.labels], pred)
    return EvalReport("exact_match", em, {}, len(pred), {"f1": f1})


# ---------------------------------------------------------------------------
# efficiency


def measure_efficiency(
    model: Model,
    sample: Sequence[Sequence[int]],
    reference: EfficiencyReport | None = None,
    repeats: int = 5,
    warmup: int = 1,
    vmap: VocabMap | None = None,
) -> EfficiencyReport:
    """Analytic FLOPs at the sample's lengths and median batch-size-1 CPU time per example."""
    if not sample:
        raise DomainError("efficiency sample is empty")
    seqs = [np.asarray(s, dtype=np.int64) for s in sample]
    if vmap is not None:
        seqs = [vmap.map_ids(s) for s in seqs]
    flops = float(np.mean([count_flops(model.config, model.head, len(s)) for s in seqs]))
    timings = []
    with T.no_grad():
        for rep in range(warmup + max(1, repeats)):
            t0 = time.perf_counter()
            for s in seqs:
                forward(model, s[None, :])
            elapsed = (time.perf_counter() - t0) / len(seqs)
            if rep >= warmup:
                timings.append(elapsed)
    report = EfficiencyReport(count_params(model), flops, statistics.median(timings))
    if reference is not None:
        report.param_ratio = report.param_count / reference.param_count
        report.flops_ratio = report.flops_per_example / reference.flops_per_example
        report.speed_ratio = reference.seconds_per_example / report.seconds_per_example
    return report


COMPARE_COLUMNS = ("name", "metric", "value", "delta", "params", "flops_ratio", "speed_ratio")


def compare_report(runs: Sequence[tuple[str, EvalReport, EfficiencyReport]]) -> str:
    """TSV table; delta and ratios are relative to the first run."""
    if not runs:
        raise DomainError("compare_report needs at least one run")
    _, ref_eval, ref_eff = runs[0]
    lines = ["\t".join(COMPARE_COLUMNS)]
    for name, ev, eff in runs:
        lines.append("\t".join([
            name,
            ev.metric,
            f"{ev.value:.4f}",
            f"{ev.value - ref_eval.value:.4f}",
            str(eff.param_count),
            f"{eff.flops_per_example / ref_eff.flops_per_example:.4f}",
            f"{ref_eff.seconds_per_example / eff.seconds_per_example:.4f}",
        ]))
    return "\n".join(lines) + "\n"
