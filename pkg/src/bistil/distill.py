"""General bilingual distillation and task-specific distillation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .data import IGNORE, Batch, EncodedTask, LanguageStream, TaskStream, mlm_mask, pad, split_heldout
from .errors import ConfigError, ContractError
from .model import ActivationTrace, Model, TaskHead, attach_head, forward, init_student_from_teacher
from .sft import SftConfig, SftDelta, SftResult, apply_deltas, fingerprint, lt_sft_train
from .tensor import Tensor
from .train import FitResult, fit, load_arrays
from .vocab import VocabMap


@dataclass(frozen=True)
class LayerAlignment:
    """Student layer i is matched with teacher layer i * stride; H_0 with H_0."""

    student_layers: int
    stride: int

    @property
    def attn_pairs(self) -> list[tuple[int, int]]:
        return [(i, i * self.stride) for i in range(1, self.student_layers + 1)]

    @property
    def hidden_pairs(self) -> list[tuple[int, int]]:
        return [(i, i * self.stride) for i in range(0, self.student_layers + 1)]

    @classmethod
    def for_models(cls, student_layers: int, teacher_layers: int) -> LayerAlignment:
        if teacher_layers % student_layers:
            raise ConfigError(f"{student_layers} student layers do not evenly divide {teacher_layers}")
        return cls(student_layers, teacher_layers // student_layers)


def _as_array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t)


def _like(target, ref: Tensor) -> Tensor:
    """Constant tensor holding ``target`` in the dtype of ``ref``."""
    return Tensor(np.asarray(_as_array(target), dtype=ref.data.dtype))


def _check_traces(student: ActivationTrace, teacher: ActivationTrace, align: LayerAlignment) -> np.ndarray:
    s_shape, t_shape = _as_array(student.hidden[0]).shape, _as_array(teacher.hidden[0]).shape
    if s_shape[:2] != t_shape[:2]:
        raise ContractError(f"traces come from different inputs: {s_shape[:2]} vs {t_shape[:2]}")
    if len(student.attn) < align.student_layers or len(teacher.attn) < align.student_layers * align.stride:
        raise ContractError("trace has fewer layers than the alignment requires")
    mask = student.attention_mask
    if mask is None:
        mask = np.ones(s_shape[:2], dtype=np.float32)
    return np.asarray(mask, dtype=np.float32)


def loss_attn(student: ActivationTrace, teacher: ActivationTrace, align: LayerAlignment) -> Tensor:
    """Mean over aligned layers of the attention-map MSE; padded query/key positions excluded."""
    mask = _check_traces(student, teacher, align)
    weight = (mask[:, :, None] * mask[:, None, :])[:, None, :, :]
    total = None
    for i, j in align.attn_pairs:
        term = T.mse(student.attn[i - 1], _like(teacher.attn[j - 1], student.attn[i - 1]), weight)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / align.student_layers)


def loss_hidden(student: ActivationTrace, teacher: ActivationTrace, align: LayerAlignment) -> Tensor:
    """Mean over aligned layers (embedding output included) of the hidden-state MSE."""
    mask = _check_traces(student, teacher, align)
    s_d, t_d = _as_array(student.hidden[0]).shape[-1], _as_array(teacher.hidden[0]).shape[-1]
    if s_d != t_d:
        raise ContractError(f"hidden sizes differ: student {s_d}, teacher {t_d}")
    weight = mask[:, :, None]
    total = None
    for i, j in align.hidden_pairs:
        term = T.mse(student.hidden[i], _like(teacher.hidden[j], student.hidden[i]), weight)
        total = term if total is None else T.add(total, term)
    return T.mul(total, 1.0 / (align.student_layers + 1))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss_pred(student_logits: Tensor, teacher_logits, kind: str = "sequence_classification", attention_mask=None) -> Tensor:
    """Cross-entropy of student predictions against the teacher's label distribution.

    Token-level kinds average over non-pad positions. For span extraction the
    start and end distributions run over positions and the two losses are averaged.
    """
    z_s = T.as_tensor(student_logits)
    z_t = _as_array(teacher_logits)
    if z_s.shape != z_t.shape:
        raise ContractError(f"student logits {z_s.shape} and teacher logits {z_t.shape} differ")
    if kind == "span_extraction":
        mask = np.ones(z_t.shape[:2], dtype=np.float32) if attention_mask is None else np.asarray(attention_mask, dtype=np.float32)
        additive = ((1.0 - mask) * -1e9).astype(z_s.data.dtype)
        losses = []
        for end in (0, 1):
            s = T.add(T.getitem(z_s, (slice(None), slice(None), end)), additive)
            p = _softmax(z_t[:, :, end] + additive)
            losses.append(T.soft_cross_entropy(s, p))
        return T.mul(T.add(losses[0], losses[1]), 0.5)
    weight = None
    if kind in ("token_classification", "mlm") and attention_mask is not None:
        weight = np.asarray(attention_mask, dtype=np.float32)
    return T.soft_cross_entropy(z_s, _softmax(z_t), weight)


def sample_language_batch(src: LanguageStream, tgt: LanguageStream, rng: np.random.Generator) -> tuple[str, Batch]:
    """Fair coin picks a language; the whole batch comes from that language's stream."""
    stream = src if rng.random() < 0.5 else tgt
    return stream.lang, stream.next_batch()


@dataclass
class DistillConfig:
    lrf: int = 2
    steps: int = 2000
    batch_size: int = 8
    max_seq_len: int = 32
    lr: float = 1e-4
    eval_interval: int = 200
    heldout_fraction: float = 0.05
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0)
    mask_inputs: bool = True
    mask_rate: float = 0.15
    vocab_threshold: float = 1e-6
    weight_decay: float = 0.0
    seed: int = 0

    def validate(self, teacher_layers: int | None = None) -> None:
        if self.lrf < 1 or (teacher_layers is not None and teacher_layers % self.lrf):
            raise ConfigError(f"lrf {self.lrf} does not evenly divide {teacher_layers} teacher layers")
        if any(w < 0 for w in self.weights):
            raise ConfigError("loss weights must be non-negative")
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")


@dataclass
class GeneralResult:
    student: Model
    vmap: VocabMap
    fit: FitResult
    initial_val: float
    rows: list[dict] = field(default_factory=list)


def _trace(model: Model, batch: Batch, ids: np.ndarray | None = None, train: bool = False, rng=None) -> ActivationTrace:
    return forward(model, batch.input_ids if ids is None else ids, batch.attention_mask, train=train, rng=rng)


def general_bistillation(
    teacher: Model,
    sft_src: SftDelta | None,
    sft_tgt: SftDelta | None,
    src_sequences: Sequence[Sequence[int]],
    tgt_sequences: Sequence[Sequence[int]],
    vmap: VocabMap,
    config: DistillConfig,
) -> GeneralResult:
    """Stage 1: distil a bilingual student with attention + hidden-state losses.

    Sequences are token ids in the teacher's vocabulary; the student sees them
    through ``vmap``. Each step a fair coin picks the language, and that
    language's SFT is applied to the teacher.
    """
    config.validate(teacher.config.num_layers)
    base = teacher.without_head()
    teachers = {
        "src": apply_deltas(base, [sft_src]) if sft_src else base,
        "tgt": apply_deltas(base, [sft_tgt]) if sft_tgt else base,
    }
    student = init_student_from_teacher(base, config.lrf, vmap)
    align = LayerAlignment(student.config.num_layers, config.lrf)
    w_attn, w_hidden, _ = config.weights

    src_train, src_val = split_heldout(list(src_sequences), config.heldout_fraction, config.seed)
    tgt_train, tgt_val = split_heldout(list(tgt_sequences), config.heldout_fraction, config.seed + 1)
    src_stream = LanguageStream("src", src_train, config.batch_size, config.seed + 2)
    tgt_stream = LanguageStream("tgt", tgt_train, config.batch_size, config.seed + 3)
    num_tokens = teacher.config.vocab_size

    def batches() -> Iterator[Batch]:
        rng = np.random.default_rng(config.seed + 4)
        while True:
            _, batch = sample_language_batch(src_stream, tgt_stream, rng)
            if config.mask_inputs:
                batch = mlm_mask(batch, config.mask_rate, rng, num_tokens)
            yield batch

    def stage1_loss(model: Model, batch: Batch, teacher_trace: ActivationTrace, rng=None):
        s_trace = _trace(model, batch, vmap.map_ids(batch.input_ids))
        la = loss_attn(s_trace, teacher_trace, align)
        lh = loss_hidden(s_trace, teacher_trace, align)
        return T.add(T.mul(la, w_attn), T.mul(lh, w_hidden)), {"loss_attn": la.item(), "loss_hidden": lh.item()}

    def objective(model: Model, batch: Batch, rng):
        with T.no_grad():
            t_trace = _trace(teachers[batch.lang], batch)
        return stage1_loss(model, batch, t_trace)

    val_batches = []
    for lang, seqs in (("src", src_val), ("tgt", tgt_val)):
        for start in range(0, len(seqs), config.batch_size):
            ids, mask = pad([list(s) for s in seqs[start:start + config.batch_size]])
            b = Batch(ids, mask, None, lang)
            with T.no_grad():
                val_batches.append((b, _trace(teachers[lang], b)))

    def validate(model: Model) -> float:
        with T.no_grad():
            losses = [stage1_loss(model, b, t)[0].item() * b.input_ids.shape[0] for b, t in val_batches]
        return float(np.sum(losses) / sum(b.input_ids.shape[0] for b, _ in val_batches))

    initial_val = validate(student) if val_batches else float("nan")
    result = fit(student, objective, batches(), config.steps, config.lr, student.params.keys(),
                 validate=validate if val_batches else None, eval_interval=config.eval_interval,
                 seed=config.seed + 5, weight_decay=config.weight_decay)
    load_arrays(student, result.arrays)
    return GeneralResult(student, vmap, result, initial_val, result.rows)


def task_loss(model: Model, batch: Batch, rng=None, train: bool = True, ids: np.ndarray | None = None) -> Tensor:
    """Hard-label loss for the model's task head."""
    trace = _trace(model, batch, ids, train=train, rng=rng)
    kind = model.head.kind
    if kind == "span_extraction":
        mask = batch.attention_mask.astype(np.float32)
        additive = ((1.0 - mask) * -1e9).astype(trace.logits.data.dtype)
        parts = [T.cross_entropy(T.add(T.getitem(trace.logits, (slice(None), slice(None), e)), additive), batch.labels[:, e])
                 for e in (0, 1)]
        return T.mul(T.add(parts[0], parts[1]), 0.5)
    if kind == "mlm":
        return T.cross_entropy(trace.logits, batch.labels if batch.labels is not None else np.full(batch.input_ids.shape, IGNORE))
    return T.cross_entropy(trace.logits, batch.labels)


def mean_task_loss(model: Model, data: EncodedTask, batch_size: int, vmap: VocabMap | None = None) -> float:
    total, count = 0.0, 0
    with T.no_grad():
        for b in data.batches(batch_size):
            ids = None if vmap is None else vmap.map_ids(b.input_ids)
            total += task_loss(model, b, train=False, ids=ids).item() * b.input_ids.shape[0]
            count += b.input_ids.shape[0]
    return total / max(count, 1)


def _task_validator(val_data: EncodedTask | None, batch_size: int, vmap: VocabMap | None):
    if val_data is None or not len(val_data):
        return None
    return lambda model: mean_task_loss(model, val_data, batch_size, vmap)


def task_specific_distillation(
    teacher: Model,
    task_sft: SftDelta,
    task_head: TaskHead,
    task_head_arrays: dict[str, np.ndarray],
    lang_sfts: Sequence[SftDelta],
    student: Model,
    vmap: VocabMap,
    train_data: EncodedTask,
    val_data: EncodedTask | None,
    sft_config: SftConfig,
    weights: tuple[float, float, float] = (1.0, 1.0, 1.0),
    seed: int = 0,
) -> SftResult:
    """Stage 2: task LT-SFT of the student guided by the task-adapted teacher.

    The teacher is fixed at theta + sum(lang_sfts) + phi_task with its task head.
    ``lang_sfts`` is normally the source-language SFT alone; passing the target
    SFT as well gives the alternative teacher.
    The step loss is w_attn * L_attn + w_hidden * L_hidden + w_pred * L_pred.
    """
    if task_head.num_labels != train_data.num_labels:
        raise ContractError(
            f"teacher head has {task_head.num_labels} labels, task data has {train_data.num_labels}"
        )
    base = teacher.without_head()
    task_teacher = apply_deltas(base, [*lang_sfts, task_sft]).with_head(task_head, task_head_arrays)
    if student.config.hidden_dim != teacher.config.hidden_dim:
        raise ContractError("student and teacher hidden sizes differ")
    align = LayerAlignment.for_models(student.config.num_layers, teacher.config.num_layers)
    student = attach_head(student.without_head(), TaskHead(task_head.kind, task_head.num_labels), seed)
    w_attn, w_hidden, w_pred = weights

    def objective(model: Model, batch: Batch, rng):
        with T.no_grad():
            t_trace = _trace(task_teacher, batch)
        s_trace = _trace(model, batch, vmap.map_ids(batch.input_ids), train=True, rng=rng)
        la = loss_attn(s_trace, t_trace, align)
        lh = loss_hidden(s_trace, t_trace, align)
        lp = loss_pred(s_trace.logits, t_trace.logits, task_head.kind, batch.attention_mask)
        loss = T.add(T.add(T.mul(la, w_attn), T.mul(lh, w_hidden)), T.mul(lp, w_pred))
        return loss, {"loss_attn": la.item(), "loss_hidden": lh.item(), "loss_pred": lp.item()}

    stream = TaskStream(train_data, sft_config.batch_size, seed + 1, "src")
    return lt_sft_train(student, objective, iter(stream), sft_config, _task_validator(val_data, sft_config.batch_size, vmap))


def task_lt_sft(
    model: Model,
    head: TaskHead,
    train_data: EncodedTask,
    val_data: EncodedTask | None,
    config: SftConfig,
    lang_sfts: Sequence[SftDelta] = (),
    vmap: VocabMap | None = None,
    seed: int = 0,
) -> SftResult:
    """Plain task LT-SFT with hard labels, with source-language SFTs applied during training.

    The language SFTs are part of the training-time model but not of the returned
    delta, which is relative to ``model`` itself.
    """
    base = model.without_head()
    adapted = apply_deltas(base, lang_sfts) if lang_sfts else base.copy()
    adapted = attach_head(adapted, head, seed)

    def objective(m: Model, batch: Batch, rng):
        ids = None if vmap is None else vmap.map_ids(batch.input_ids)
        loss = task_loss(m, batch, rng, train=True, ids=ids)
        return loss, {}

    stream = TaskStream(train_data, config.batch_size, seed + 1, "src")
    result = lt_sft_train(adapted, objective, iter(stream), config, _task_validator(val_data, config.batch_size, vmap))
    # the delta is relative to theta + sum(lang_sfts); it composes with the bare base
    result.delta = SftDelta(fingerprint(base), result.delta.density, result.delta.entries)
    return result
