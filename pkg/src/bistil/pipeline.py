"""Desk-scale end-to-end run: synthetic corpora, teacher, SFTs, students, scratch baseline."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import EncodedTask, SyntheticLanguages, encode_line, encode_task, save_task_dataset, synth_bilingual_corpus, write_lines
from .distill import DistillConfig, general_bistillation, task_lt_sft, task_specific_distillation
from .evaluation import EvalReport, evaluate
from .mlm import pretrain_mlm, train_language_sft
from .model import Model, ModelConfig, TaskHead, count_flops, count_params, init_model, save_checkpoint
from .sft import SftConfig, SftDelta, apply_deltas, save_head
from .vocab import VocabMap, Vocabulary, build_vocabulary, reduce_vocabulary, save_probs, unigram_probs

log = logging.getLogger(__name__)


@dataclass
class DeskConfig:
    seed: int = 0
    concepts: int = 48
    corpus_lines: int = 3000
    overlap: float = 0.05
    num_topics: int = 4
    code_switch_lines: int = 3000
    teacher: ModelConfig = field(default_factory=lambda: ModelConfig(num_layers=6, hidden_dim=64, num_heads=4, ffn_dim=128, max_seq_len=32))
    batch_size: int = 16
    pretrain_steps: int = 3000
    pretrain_lr: float = 1e-3
    lang_sft: SftConfig = field(default_factory=lambda: SftConfig(density=0.04, dense_steps=300, sparse_steps=300, lr=1e-3, eval_interval=100, batch_size=16))
    task_sft: SftConfig = field(default_factory=lambda: SftConfig(density=0.08, dense_steps=300, sparse_steps=300, lr=1e-3, eval_interval=100, batch_size=16))
    distill_steps: int = 1500
    distill_lr: float = 1e-3
    lrfs: tuple[int, ...] = (2, 3)
    scratch_lrf: int = 2
    task_train: int = 800
    task_val: int = 200
    task_test: int = 400


@dataclass
class DeskResult:
    scores: dict[str, EvalReport]
    params: dict[str, int]
    flops: dict[str, float]

    def metrics_tsv(self) -> str:
        lines = ["name\tmetric\tvalue\tparams\tflops_ratio"]
        ref = self.flops["teacher"]
        for name, rep in self.scores.items():
            lines.append(f"{name}\t{rep.metric}\t{rep.value:.4f}\t{self.params[name]}\t{self.flops[name] / ref:.4f}")
        return "\n".join(lines) + "\n"


def encode_corpus(lines: list[str], vocab: Vocabulary, max_len: int) -> list[list[int]]:
    return [encode_line(line, vocab, max_len) for line in lines]


def corpus_vocabulary(langs: SyntheticLanguages, code_switched: list[str]) -> Vocabulary:
    return build_vocabulary(langs.src + langs.tgt + [ln for v in langs.extra.values() for ln in v] + code_switched)


def _mean_length(data: EncodedTask) -> int:
    return int(round(np.mean([len(s) for s in data.ids])))


def _map_mlm_sequences(seqs: list[list[int]], vmap: VocabMap) -> list[list[int]]:
    return [vmap.map_ids(np.asarray(s)).tolist() for s in seqs]


def run_desk(cfg: DeskConfig, out: str | Path | None = None) -> DeskResult:
    """Every stage of the bilingual distillation recipe, plus a scratch baseline.

    Scores are on the target-language test split; all task training sees only
    source-language data. When ``out`` is given every artifact is written there.
    """
    out = Path(out) if out is not None else None
    seed = cfg.seed
    langs = synth_bilingual_corpus(seed, cfg.concepts, cfg.corpus_lines, cfg.overlap, cfg.num_topics)
    mixed = langs.code_switched(cfg.code_switch_lines, seed + 1)
    vocab = corpus_vocabulary(langs, mixed)
    tcfg = replace(cfg.teacher, vocab_size=len(vocab))
    L = tcfg.max_seq_len
    seqs = {"src": encode_corpus(langs.src, vocab, L), "tgt": encode_corpus(langs.tgt, vocab, L),
            "mix": encode_corpus(mixed, vocab, L)}
    for lang, lines in langs.extra.items():
        seqs[lang] = encode_corpus(lines, vocab, L)

    task_sets = {
        "train": langs.task(cfg.task_train, "src", seed + 2),
        "val": langs.task(cfg.task_val, "src", seed + 3),
        "test_tgt": langs.task(cfg.task_test, "tgt", seed + 4),
        "test_src": langs.task(cfg.task_test, "src", seed + 5),
    }
    enc = {k: encode_task(v, vocab, L) for k, v in task_sets.items()}
    labels = task_sets["train"].labels
    head = TaskHead("sequence_classification", len(labels))

    p_src, p_tgt = unigram_probs(langs.src, vocab), unigram_probs(langs.tgt, vocab)
    vmap = reduce_vocabulary(p_src, p_tgt)

    if out is not None:
        (out / "corpus").mkdir(parents=True, exist_ok=True)
        write_lines(out / "corpus" / "src.txt", langs.src)
        write_lines(out / "corpus" / "tgt.txt", langs.tgt)
        write_lines(out / "corpus" / "mix.txt", mixed)
        for lang, lines in langs.extra.items():
            write_lines(out / "corpus" / f"{lang}.txt", lines)
        vocab.save(out / "corpus" / "vocab.txt")
        save_probs(out / "corpus" / "p_src.tsv", p_src, vocab)
        save_probs(out / "corpus" / "p_tgt.tsv", p_tgt, vocab)
        for k, ds in task_sets.items():
            save_task_dataset(ds, out / "corpus" / f"task_{k}.tsv")

    log.info("pretraining teacher (%d layers, vocab %d)", tcfg.num_layers, tcfg.vocab_size)
    teacher = init_model(tcfg, seed + 10, TaskHead("mlm"))
    pretrain_mlm(teacher, seqs, cfg.pretrain_steps, cfg.batch_size, cfg.pretrain_lr, seed=seed + 11,
                 eval_interval=max(1, cfg.pretrain_steps // 5))
    lang_sft: dict[str, SftDelta] = {}
    for k, lang in enumerate(("src", "tgt")):
        log.info("language SFT %s", lang)
        res = train_language_sft(teacher, seqs[lang], replace(cfg.lang_sft, seed=seed + 20 + k), lang)
        lang_sft[lang] = res.delta

    log.info("teacher task SFT")
    teacher_task = task_lt_sft(teacher, head, enc["train"], enc["val"], replace(cfg.task_sft, seed=seed + 30),
                               lang_sfts=[lang_sft["src"]], seed=seed + 31)
    base = teacher.without_head()
    scored: dict[str, tuple[Model, VocabMap | None]] = {
        "teacher": (apply_deltas(base, [lang_sft["tgt"], teacher_task.delta]).with_head(head, teacher_task.head_arrays), None)
    }
    if out is not None:
        save_checkpoint(teacher, out / "teacher", vocab)
        for lang, d in lang_sft.items():
            d.save(out / "sft" / f"lang_{lang}")
        teacher_task.delta.save(out / "sft" / "task_teacher")
        save_head(out / "sft" / "task_teacher", head, teacher_task.head_arrays)

    for lrf in cfg.lrfs:
        log.info("general bistillation lrf=%d", lrf)
        dcfg = DistillConfig(lrf=lrf, steps=cfg.distill_steps, batch_size=cfg.batch_size, lr=cfg.distill_lr,
                             eval_interval=max(1, cfg.distill_steps // 5), seed=seed + 40 + lrf)
        general = general_bistillation(teacher, lang_sft["src"], lang_sft["tgt"], seqs["src"], seqs["tgt"], vmap, dcfg)
        log.info("task distillation lrf=%d", lrf)
        student_task = task_specific_distillation(
            teacher, teacher_task.delta, head, teacher_task.head_arrays, [lang_sft["src"]], general.student, vmap,
            enc["train"], enc["val"], replace(cfg.task_sft, seed=seed + 50 + lrf), seed=seed + 60 + lrf)
        student = apply_deltas(general.student, [student_task.delta]).with_head(head, student_task.head_arrays)
        scored[f"bistil_lrf{lrf}"] = (student, vmap)
        if out is not None:
            d = out / "students" / f"lrf{lrf}"
            save_checkpoint(general.student, d / "general", vmap.apply(vocab))
            student_task.delta.save(d / "task_sft")
            save_head(d / "task_sft", head, student_task.head_arrays)
            vmap.save(d / "general" / "vocab_map.txt")
            write_log(d / "general_log.tsv", [{"phase": "general", **r} for r in general.rows])
            write_log(d / "task_log.tsv", student_task.rows)

    log.info("scratch baseline")
    scfg = replace(tcfg, num_layers=tcfg.num_layers // cfg.scratch_lrf, vocab_size=len(vmap))
    scratch = init_model(scfg, seed + 70, TaskHead("mlm"))
    pretrain_mlm(scratch, {"src": _map_mlm_sequences(seqs["src"], vmap), "tgt": _map_mlm_sequences(seqs["tgt"], vmap)},
                 cfg.distill_steps, cfg.batch_size, cfg.pretrain_lr, seed=seed + 71,
                 eval_interval=max(1, cfg.distill_steps // 5))
    scratch_task = task_lt_sft(scratch, head, enc["train"], enc["val"], replace(cfg.task_sft, seed=seed + 72),
                               vmap=vmap, seed=seed + 73)
    scored["scratch"] = (apply_deltas(scratch.without_head(), [scratch_task.delta]).with_head(head, scratch_task.head_arrays), vmap)
    if out is not None:
        save_checkpoint(scratch, out / "students" / "scratch", vmap.apply(vocab))

    length = _mean_length(enc["test_tgt"])
    result = DeskResult({}, {}, {})
    for name, (model, vm) in scored.items():
        result.scores[name] = evaluate(model, enc["test_tgt"], labels, vm)
        result.params[name] = count_params(model)
        result.flops[name] = float(count_flops(model.config, model.head, length))
    if out is not None:
        (out / "metrics.tsv").write_text(result.metrics_tsv(), encoding="utf-8")
    return result


LOG_COLUMNS = ("phase", "step", "loss", "loss_attn", "loss_hidden", "loss_pred", "val_loss")


def write_log(path: Path, rows: list[dict]) -> None:
    """Training log as TSV; absent values are left empty."""
    lines = ["\t".join(LOG_COLUMNS)]
    for r in rows:
        cells = []
        for c in LOG_COLUMNS:
            v = r.get(c)
            cells.append("" if v is None else (str(v) if c in ("phase", "step") else repr(float(v))))
        lines.append("\t".join(cells))
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def desk_config_items(cfg: DeskConfig) -> dict[str, str]:
    """Flat key/value view of a desk config for run manifests."""
    flat: dict[str, str] = {}
    for k, v in asdict(cfg).items():
        if isinstance(v, dict):
            flat.update({f"{k}.{kk}": str(vv) for kk, vv in v.items()})
        else:
            flat[k] = str(v)
    return flat
