"""Command-line entry point: ``bistil <command> [flags]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error, 3 training error.
Every flag is also a config-file key (``key = value``, dashes become
underscores); flags given on the command line win over the config file.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import logging
import subprocess
import sys
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

from .data import (
    TASK_KINDS, encode_line, encode_task, load_task_dataset, read_lines, save_task_dataset,
    synth_bilingual_corpus, write_lines,
)
from .distill import DistillConfig, general_bistillation, task_lt_sft, task_specific_distillation
from .errors import BistilError, CompositionError, ConfigError, ContractError, DataError, InputError, TrainingError
from .evaluation import HEAD_FOR_TASK, evaluate, measure_efficiency
from .mlm import pretrain_mlm, train_language_sft
from .model import Model, ModelConfig, TaskHead, attach_head, init_model, load_checkpoint, read_kv, save_checkpoint
from .pipeline import DeskConfig, desk_config_items, run_desk, write_log
from .sft import SftConfig, SftDelta, apply_deltas, load_head, save_head
from .vocab import VocabMap, Vocabulary, build_vocabulary, reduce_vocabulary, save_probs, unigram_probs

log = logging.getLogger("bistil")

DEFAULT_SEED = 0


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Opt:
    key: str
    type: Callable = str
    default: object = None
    help: str = ""
    required: bool = False
    repeat: bool = False
    path: bool = False      # must exist at validation time


def _weights(text: str) -> tuple[float, float, float]:
    parts = [float(x) for x in str(text).split(",")]
    if len(parts) != 3:
        raise ValueError("expected three comma-separated weights")
    return tuple(parts)


COMMON = [
    Opt("seed", int, DEFAULT_SEED, "random seed"),
    Opt("out", str, None, "output directory", required=True),
]
TRAIN = [
    Opt("lr", float, 1e-3, "peak learning rate (linear decay to 0)"),
    Opt("batch_size", int, 16, "sequences per batch"),
    Opt("eval_interval", int, 100, "validation every N steps (plus the final step)"),
]
TASK = [
    Opt("train", str, None, "source-language task training file", required=True, path=True),
    Opt("val", str, None, "source-language validation file (checkpoint selection)", path=True),
    Opt("kind", str, "sequence_pair_classification", f"task kind: {', '.join(TASK_KINDS)}"),
]

COMMANDS: dict[str, tuple[str, list[Opt]]] = {
    "gen-corpus": ("Generate synthetic bilingual corpora, vocabulary and a topic task.", COMMON + [
        Opt("concepts", int, 48, "concepts (words) per language"),
        Opt("lines", int, 3000, "parallel corpus lines"),
        Opt("overlap", float, 0.05, "fraction of concepts sharing a surface form"),
        Opt("topics", int, 4, "number of task labels"),
        Opt("code_switch_lines", int, 3000, "code-switched lines for teacher pretraining"),
        Opt("task_train", int, 800, "task training examples"),
        Opt("task_val", int, 200, "task validation examples"),
        Opt("task_test", int, 400, "task test examples per language"),
    ]),
    "pretrain-teacher": ("MLM-pretrain a desk-scale multilingual teacher.", COMMON + TRAIN + [
        Opt("corpus", str, None, "corpus file, one sequence per line (repeatable)", required=True, repeat=True, path=True),
        Opt("vocab", str, None, "vocabulary file (built from the corpora if absent)", path=True),
        Opt("steps", int, 3000, "training steps"),
        Opt("num_layers", int, 6, "encoder layers"),
        Opt("hidden_dim", int, 64, "hidden size"),
        Opt("num_heads", int, 4, "attention heads"),
        Opt("ffn_dim", int, 128, "feed-forward size"),
        Opt("max_seq_len", int, 32, "maximum sequence length"),
    ]),
    "train-lang-sft": ("Train a language SFT (LT-SFT with MLM) for one language.", COMMON + TRAIN + [
        Opt("teacher", str, None, "teacher checkpoint", required=True, path=True),
        Opt("corpus", str, None, "language corpus file", required=True, path=True),
        Opt("density", float, 0.04, "fraction of encoder parameters in the delta"),
        Opt("steps", int, 300, "steps per phase (dense, then sparse)"),
    ]),
    "train-task-sft": ("Train a task SFT and head on a base model with source language SFTs applied.", COMMON + TRAIN + TASK + [
        Opt("teacher", str, None, "base checkpoint", required=True, path=True),
        Opt("lang_sft", str, None, "language SFT applied during training (repeatable)", repeat=True, path=True),
        Opt("density", float, 0.08, "fraction of encoder parameters in the delta"),
        Opt("steps", int, 300, "steps per phase (dense, then sparse)"),
    ]),
    "distil-general": ("Stage 1: distil a bilingual student with attention and hidden-state losses.", COMMON + TRAIN + [
        Opt("teacher", str, None, "teacher checkpoint", required=True, path=True),
        Opt("lang_sft", str, None, "source then target language SFT (give both or neither)", repeat=True, path=True),
        Opt("src", str, None, "source-language corpus", required=True, path=True),
        Opt("tgt", str, None, "target-language corpus", required=True, path=True),
        Opt("lrf", int, 2, "layer reduction factor"),
        Opt("steps", int, 1500, "training steps"),
        Opt("vocab_threshold", float, 1e-6, "keep tokens with unigram probability >= this in either corpus"),
    ]),
    "distil-task": ("Stage 2: task LT-SFT of the student against the task-adapted teacher.", COMMON + TRAIN + TASK + [
        Opt("teacher", str, None, "teacher checkpoint", required=True, path=True),
        Opt("task_sft", str, None, "teacher task SFT directory (with head)", required=True, path=True),
        Opt("lang_sft", str, None, "source language SFT applied to the teacher (repeatable)", repeat=True, path=True),
        Opt("student", str, None, "stage-1 student checkpoint", required=True, path=True),
        Opt("density", float, 0.08, "fraction of student encoder parameters in the delta"),
        Opt("steps", int, 300, "steps per phase (dense, then sparse)"),
        Opt("weights", _weights, "1,1,1", "loss weights attn,hidden,pred"),
    ]),
    "evaluate": ("Score a model (+ SFTs) on a task file. TSV columns: metric, value, count; then per-class rows.", [
        Opt("seed", int, DEFAULT_SEED, "unused; recorded in the manifest"),
        Opt("out", str, None, "output TSV path (stdout if absent)"),
        Opt("model", str, None, "checkpoint", required=True, path=True),
        Opt("lang_sft", str, None, "language SFT to apply (repeatable)", repeat=True, path=True),
        Opt("task_sft", str, None, "task SFT directory with head", path=True),
        Opt("data", str, None, "task file", required=True, path=True),
        Opt("kind", str, "sequence_pair_classification", f"task kind: {', '.join(TASK_KINDS)}"),
    ]),
    "bench": ("Parameters, FLOPs and CPU time per example. TSV columns: "
              "name, params, flops_per_example, seconds_per_example, param_ratio, flops_ratio, speed_ratio.", [
        Opt("seed", int, DEFAULT_SEED, "unused; recorded in the manifest"),
        Opt("out", str, None, "output TSV path (stdout if absent)"),
        Opt("model", str, None, "candidate checkpoint", required=True, path=True),
        Opt("task_sft", str, None, "task SFT directory whose head is attached", path=True),
        Opt("reference", str, None, "reference checkpoint for ratios", path=True),
        Opt("data", str, None, "task file sampled for lengths", required=True, path=True),
        Opt("kind", str, "sequence_pair_classification", f"task kind: {', '.join(TASK_KINDS)}"),
        Opt("sample", int, 64, "examples timed"),
        Opt("repeats", int, 5, "timed repetitions (median reported)"),
    ]),
    "desk": ("Run the whole desk-scale recipe and write metrics.tsv (columns: " "name, metric, value, params, flops_ratio).", COMMON + [
        Opt("pretrain_steps", int, 3000, "teacher MLM steps"),
        Opt("distill_steps", int, 1500, "stage-1 steps (and scratch MLM steps)"),
        Opt("sft_steps", int, 300, "steps per LT-SFT phase"),
    ]),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bistil", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for name, (help_text, opts) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value file; command-line flags override it")
        for o in opts:
            flag = "--" + o.key.replace("_", "-")
            text = f"{o.help} (default: {o.default})" if o.default is not None else o.help
            if o.repeat:
                p.add_argument(flag, dest=o.key, action="append", help=text)
            else:
                p.add_argument(flag, dest=o.key, help=text)
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags; convert types and check paths."""
    opts = {o.key: o for o in COMMANDS[command][1]}
    file_values: dict[str, str] = {}
    if ns.config:
        if not Path(ns.config).is_file():
            raise UsageError(f"--config: no such file {ns.config}")
        file_values = {k.replace("-", "_"): v for k, v in read_kv(ns.config).items()}
        unknown = sorted(set(file_values) - set(opts))
        if unknown:
            raise UsageError(f"{ns.config}: unknown keys for {command}: {', '.join(unknown)}")
    values = {}
    for key, o in opts.items():
        raw = getattr(ns, key, None)
        if raw is None and key in file_values:
            raw = [s.strip() for s in file_values[key].split(",") if s.strip()] if o.repeat else file_values[key]
        flag = "--" + key.replace("_", "-")
        if raw is None:
            if o.required:
                raise UsageError(f"{command}: missing required {flag}")
            values[key] = [] if o.repeat else (o.type(o.default) if o.default is not None else None)
            continue
        try:
            values[key] = [o.type(r) for r in raw] if o.repeat else o.type(raw)
        except ValueError as exc:
            raise UsageError(f"{flag}: {exc}") from None
        if o.path:
            for p in (values[key] if o.repeat else [values[key]]):
                if not Path(p).exists():
                    raise UsageError(f"{flag}: no such file or directory {p}")
    _check_values(command, values)
    return values


def _check_values(command: str, v: dict) -> None:
    if "kind" in v and v["kind"] not in TASK_KINDS:
        raise UsageError(f"--kind must be one of {', '.join(TASK_KINDS)}")
    if "density" in v and not 0.0 < v["density"] <= 1.0:
        raise UsageError(f"--density {v['density']} outside (0, 1]")
    for key in ("steps", "batch_size", "lrf", "sample", "repeats", "concepts", "lines", "topics"):
        if key in v and v[key] is not None and v[key] < (0 if key == "steps" else 1):
            raise UsageError(f"--{key.replace('_', '-')} must be {'>= 0' if key == 'steps' else 'positive'}")
    if "overlap" in v and not 0.0 <= v["overlap"] <= 1.0:
        raise UsageError("--overlap outside [0, 1]")
    if command == "distil-general" and len(v["lang_sft"]) not in (0, 2):
        raise UsageError("--lang-sft must be given twice (source, then target) or not at all")


def git_describe() -> str:
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty"], cwd=Path(__file__).resolve().parent,
                             capture_output=True, text=True, timeout=10)
        return res.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


def write_manifest(path: Path, command: str, values: dict) -> None:
    """Flat key/value record of the run; only the ``timestamp`` line varies between identical runs."""
    lines = [f"command = {command}", f"git_describe = {git_describe()}"]
    for k in sorted(values):
        v = values[k]
        lines.append(f"{k} = {','.join(map(str, v)) if isinstance(v, (list, tuple)) else v}")
    lines.append(f"timestamp = {_dt.datetime.now(_dt.timezone.utc).isoformat(timespec='seconds')}")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# commands


def _load(path: str) -> tuple[Model, object]:
    model, vocab = load_checkpoint(path)
    if vocab is None:
        raise DataError(f"{path} has no vocab.txt")
    return model, vocab


def _task_head(kind: str, num_labels: int) -> TaskHead:
    return TaskHead(HEAD_FOR_TASK[kind], num_labels)


def _load_task_sft(path: str) -> tuple[SftDelta, TaskHead, dict]:
    delta = SftDelta.load(path)
    head = load_head(path)
    if head is None:
        raise DataError(f"{path} has no task head")
    return delta, head[0], head[1]


def _label_names(path: str) -> list[str] | None:
    f = Path(path) / "head" / "labels.txt"
    return read_lines(f) if f.exists() else None


def _sequences(path: str, vocab, max_len: int) -> list[list[int]]:
    seqs = [encode_line(line, vocab, max_len) for line in read_lines(path)]
    if not seqs:
        raise DataError(f"{path} contains no sequences")
    return seqs


def cmd_gen_corpus(v: dict, out: Path) -> None:
    langs = synth_bilingual_corpus(v["seed"], v["concepts"], v["lines"], v["overlap"], v["topics"])
    mixed = langs.code_switched(v["code_switch_lines"], v["seed"] + 1)
    out.mkdir(parents=True, exist_ok=True)
    write_lines(out / "src.txt", langs.src)
    write_lines(out / "tgt.txt", langs.tgt)
    write_lines(out / "mix.txt", mixed)
    for lang, lines in langs.extra.items():
        write_lines(out / f"{lang}.txt", lines)
    vocab = build_vocabulary(langs.src + langs.tgt + [ln for x in langs.extra.values() for ln in x] + mixed)
    vocab.save(out / "vocab.txt")
    save_probs(out / "p_src.tsv", unigram_probs(langs.src, vocab), vocab)
    save_probs(out / "p_tgt.tsv", unigram_probs(langs.tgt, vocab), vocab)
    write_lines(out / "lexicon.tsv", [f"{a}\t{b}" for a, b in langs.lexicon.items()])
    s = v["seed"]
    save_task_dataset(langs.task(v["task_train"], "src", s + 2), out / "task_train.tsv")
    save_task_dataset(langs.task(v["task_val"], "src", s + 3), out / "task_val.tsv")
    save_task_dataset(langs.task(v["task_test"], "tgt", s + 4), out / "task_test_tgt.tsv")
    save_task_dataset(langs.task(v["task_test"], "src", s + 5), out / "task_test_src.tsv")


def cmd_pretrain_teacher(v: dict, out: Path) -> None:
    lines = {Path(p).stem: read_lines(p) for p in v["corpus"]}
    vocab = build_vocabulary([ln for x in lines.values() for ln in x]) if v["vocab"] is None else Vocabulary.load(v["vocab"])
    cfg = ModelConfig(num_layers=v["num_layers"], hidden_dim=v["hidden_dim"], num_heads=v["num_heads"],
                      ffn_dim=v["ffn_dim"], vocab_size=len(vocab), max_seq_len=v["max_seq_len"])
    cfg.validate()
    seqs = {lang: [encode_line(ln, vocab, cfg.max_seq_len) for ln in x] for lang, x in lines.items() if x}
    if not seqs:
        raise DataError("corpora contain no sequences")
    teacher = init_model(cfg, v["seed"] + 10, TaskHead("mlm"))
    res = pretrain_mlm(teacher, seqs, v["steps"], v["batch_size"], v["lr"], seed=v["seed"] + 11,
                       eval_interval=v["eval_interval"])
    save_checkpoint(teacher, out, vocab)
    write_log(out / "log.tsv", [{"phase": "mlm", **r} for r in res.rows])


def _sft_config(v: dict, offset: int) -> SftConfig:
    return SftConfig(density=v["density"], dense_steps=max(1, v["steps"]), sparse_steps=v["steps"], lr=v["lr"],
                     eval_interval=v["eval_interval"], batch_size=v["batch_size"], seed=v["seed"] + offset)


def cmd_train_lang_sft(v: dict, out: Path) -> None:
    teacher, vocab = _load(v["teacher"])
    if teacher.head is None or teacher.head.kind != "mlm":
        raise ContractError("language SFTs need a teacher with its MLM head")
    seqs = _sequences(v["corpus"], vocab, teacher.config.max_seq_len)
    res = train_language_sft(teacher, seqs, _sft_config(v, 20), Path(v["corpus"]).stem)
    res.delta.save(out)
    write_log(out / "log.tsv", res.rows)


def cmd_train_task_sft(v: dict, out: Path) -> None:
    base, vocab = _load(v["teacher"])
    train = load_task_dataset(v["train"], v["kind"])
    val = load_task_dataset(v["val"], v["kind"], train.labels) if v["val"] else None
    L = base.config.max_seq_len
    lang = [SftDelta.load(p) for p in v["lang_sft"]]
    head = _task_head(v["kind"], train.num_labels)
    res = task_lt_sft(base, head, encode_task(train, vocab, L), encode_task(val, vocab, L) if val else None,
                      _sft_config(v, 30), lang_sfts=lang, seed=v["seed"] + 31)
    res.delta.save(out)
    save_head(out, res.head, res.head_arrays)
    write_lines(out / "head" / "labels.txt", train.labels)
    write_log(out / "log.tsv", res.rows)


def cmd_distil_general(v: dict, out: Path) -> None:
    teacher, vocab = _load(v["teacher"])
    L = teacher.config.max_seq_len
    src_lines, tgt_lines = read_lines(v["src"]), read_lines(v["tgt"])
    sfts = [SftDelta.load(p) for p in v["lang_sft"]] or [None, None]
    vmap = reduce_vocabulary(unigram_probs(src_lines, vocab), unigram_probs(tgt_lines, vocab), v["vocab_threshold"])
    dcfg = DistillConfig(lrf=v["lrf"], steps=v["steps"], batch_size=v["batch_size"], lr=v["lr"],
                         eval_interval=v["eval_interval"], vocab_threshold=v["vocab_threshold"], seed=v["seed"] + 40 + v["lrf"])
    try:
        dcfg.validate(teacher.config.num_layers)
    except ConfigError as exc:
        raise UsageError(f"--lrf: {exc}") from None
    res = general_bistillation(teacher, sfts[0], sfts[1], [encode_line(x, vocab, L) for x in src_lines],
                               [encode_line(x, vocab, L) for x in tgt_lines], vmap, dcfg)
    save_checkpoint(res.student, out, vmap.apply(vocab))
    vmap.save(out / "vocab_map.txt")
    write_log(out / "log.tsv", [{"phase": "general", **r} for r in res.rows])


def cmd_distil_task(v: dict, out: Path) -> None:
    teacher, vocab = _load(v["teacher"])
    student, _ = _load(v["student"])
    map_path = Path(v["student"]) / "vocab_map.txt"
    vmap = VocabMap.load(map_path) if map_path.exists() else VocabMap.identity(teacher.config.vocab_size)
    if vmap.old_size != teacher.config.vocab_size:
        raise ContractError("student vocabulary map does not match the teacher vocabulary")
    task_delta, head, head_arrays = _load_task_sft(v["task_sft"])
    labels = _label_names(v["task_sft"])
    train = load_task_dataset(v["train"], v["kind"], labels)
    val = load_task_dataset(v["val"], v["kind"], train.labels) if v["val"] else None
    L = teacher.config.max_seq_len
    res = task_specific_distillation(
        teacher, task_delta, head, head_arrays, [SftDelta.load(p) for p in v["lang_sft"]], student, vmap,
        encode_task(train, vocab, L), encode_task(val, vocab, L) if val else None, _sft_config(v, 50),
        v["weights"], seed=v["seed"] + 60)
    res.delta.save(out)
    save_head(out, res.head, res.head_arrays)
    write_lines(out / "head" / "labels.txt", train.labels)
    write_log(out / "log.tsv", res.rows)


def _assemble(v: dict) -> tuple[Model, object, list[str] | None]:
    model, vocab = _load(v["model"])
    deltas = [SftDelta.load(p) for p in v.get("lang_sft", [])]
    labels = None
    if v.get("task_sft"):
        task_delta, head, head_arrays = _load_task_sft(v["task_sft"])
        deltas.append(task_delta)
        labels = _label_names(v["task_sft"])
        model = apply_deltas(model.without_head(), deltas).with_head(head, head_arrays)
    elif deltas:
        model = apply_deltas(model, deltas)
    return model, vocab, labels


def _emit(text: str, v: dict, command: str) -> None:
    if v["out"] is None:
        sys.stdout.write(text)
        return
    path = Path(v["out"])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    write_manifest(path.with_name(path.name + ".run.txt"), command, v)


def cmd_evaluate(v: dict) -> None:
    model, vocab, labels = _assemble(v)
    ds = load_task_dataset(v["data"], v["kind"], labels)
    report = evaluate(model, encode_task(ds, vocab, model.config.max_seq_len), ds.labels)
    rows = ["metric\tvalue\tcount", f"{report.metric}\t{report.value:.4f}\t{report.count}"]
    rows += [f"{k}\t{val:.4f}\t" for k, val in report.extra.items()]
    rows += [f"class:{k}\t{val:.4f}\t" for k, val in report.per_class.items()]
    _emit("\n".join(rows) + "\n", v, "evaluate")


BENCH_COLUMNS = ("name", "params", "flops_per_example", "seconds_per_example", "param_ratio", "flops_ratio", "speed_ratio")


def cmd_bench(v: dict) -> None:
    model, vocab, _ = _assemble(v)
    ds = load_task_dataset(v["data"], v["kind"])
    sample = encode_task(ds, vocab, model.config.max_seq_len).ids[: v["sample"]]
    if not sample:
        raise DataError(f"{v['data']} contains no examples")
    reports = []
    ref = None
    if v["reference"]:
        ref_model, ref_vocab = _load(v["reference"])
        if model.head is not None and (ref_model.head is None or ref_model.head.kind != model.head.kind):
            ref_model = attach_head(ref_model.without_head(), model.head, v["seed"])
        ref_sample = encode_task(ds, ref_vocab, ref_model.config.max_seq_len).ids[: v["sample"]]
        ref = measure_efficiency(ref_model, ref_sample, repeats=v["repeats"])
        reports.append(("reference", ref))
    reports.append(("candidate", measure_efficiency(model, sample, ref, repeats=v["repeats"])))
    rows = ["\t".join(BENCH_COLUMNS)]
    for name, r in reports:
        ratios = [r.param_ratio, r.flops_ratio, r.speed_ratio] if r is not ref else [1.0, 1.0, 1.0]
        rows.append("\t".join([name, str(r.param_count), f"{r.flops_per_example:.1f}", f"{r.seconds_per_example:.6g}"]
                              + ["" if x is None else f"{x:.4f}" for x in ratios]))
    _emit("\n".join(rows) + "\n", v, "bench")


def cmd_desk(v: dict, out: Path) -> None:
    cfg = DeskConfig(seed=v["seed"], pretrain_steps=v["pretrain_steps"], distill_steps=v["distill_steps"])
    sft = v["sft_steps"]
    cfg = replace(cfg, lang_sft=replace(cfg.lang_sft, dense_steps=max(1, sft), sparse_steps=sft),
                  task_sft=replace(cfg.task_sft, dense_steps=max(1, sft), sparse_steps=sft))
    run_desk(cfg, out)
    write_manifest(out / "desk_config.txt", "desk", desk_config_items(cfg))


DIR_COMMANDS = {
    "gen-corpus": cmd_gen_corpus,
    "pretrain-teacher": cmd_pretrain_teacher,
    "train-lang-sft": cmd_train_lang_sft,
    "train-task-sft": cmd_train_task_sft,
    "distil-general": cmd_distil_general,
    "distil-task": cmd_distil_task,
    "desk": cmd_desk,
}
FILE_COMMANDS = {"evaluate": cmd_evaluate, "bench": cmd_bench}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            raise UsageError(parser.format_usage() + "bistil: error: a command is required")
        values = resolve(ns.command, ns)
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(str(exc).rstrip(), file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        if ns.command in FILE_COMMANDS:
            FILE_COMMANDS[ns.command](values)
        else:
            out = Path(values["out"])
            DIR_COMMANDS[ns.command](values, out)
            write_manifest(out / "run.txt", ns.command, values)
    except UsageError as exc:
        print(f"bistil {ns.command}: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, InputError) as exc:
        print(f"bistil {ns.command}: configuration error: {exc}", file=sys.stderr)
        return 1
    except TrainingError as exc:
        print(f"bistil {ns.command}: training error: {exc}", file=sys.stderr)
        return 3
    except (DataError, ContractError, CompositionError, BistilError, OSError) as exc:
        print(f"bistil {ns.command}: data error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
