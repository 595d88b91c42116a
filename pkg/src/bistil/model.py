"""Post-layernorm transformer encoder, task heads, stride-based students and cost models."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, InputError
from .tensor import Tensor
from .vocab import VocabMap, Vocabulary, slice_embeddings

HEAD_KINDS = ("mlm", "token_classification", "sequence_classification", "span_extraction")
INIT_STD = 0.02
TRUNCATION = 2.0


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 6
    hidden_dim: int = 64
    num_heads: int = 4
    ffn_dim: int = 128
    vocab_size: int = 256
    max_seq_len: int = 32
    dropout: float = 0.0
    layernorm_eps: float = 1e-12

    def validate(self) -> None:
        for name in ("num_layers", "hidden_dim", "num_heads", "ffn_dim", "vocab_size", "max_seq_len"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be a positive integer")
        if self.hidden_dim % self.num_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout {self.dropout} outside [0, 1)")


@dataclass(frozen=True)
class TaskHead:
    """What sits on top of the encoder.

    ``cost_params`` adds an opaque per-token dense cost to FLOP accounting only;
    it stands in for heads this library does not implement (e.g. a biaffine parser).
    """

    kind: str
    num_labels: int = 0
    cost_params: int = 0

    def __post_init__(self):
        if self.kind not in HEAD_KINDS:
            raise ConfigError(f"unknown head kind {self.kind!r}")


def _layer_shapes(cfg: ModelConfig, i: int) -> list[tuple[str, tuple[int, ...], str]]:
    d, f = cfg.hidden_dim, cfg.ffn_dim
    p = f"layers.{i}."
    out = []
    for proj in ("query", "key", "value", "output"):
        out.append((p + f"attention.{proj}.weight", (d, d), "normal"))
        out.append((p + f"attention.{proj}.bias", (d,), "zeros"))
    out += [
        (p + "attention.norm.gain", (d,), "ones"),
        (p + "attention.norm.bias", (d,), "zeros"),
        (p + "ffn.in.weight", (d, f), "normal"),
        (p + "ffn.in.bias", (f,), "zeros"),
        (p + "ffn.out.weight", (f, d), "normal"),
        (p + "ffn.out.bias", (d,), "zeros"),
        (p + "ffn.norm.gain", (d,), "ones"),
        (p + "ffn.norm.bias", (d,), "zeros"),
    ]
    return out


def encoder_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    shapes = [
        ("embeddings.token", (cfg.vocab_size, cfg.hidden_dim), "normal"),
        ("embeddings.position", (cfg.max_seq_len, cfg.hidden_dim), "normal"),
    ]
    for i in range(1, cfg.num_layers + 1):
        shapes += _layer_shapes(cfg, i)
    return shapes


def head_shapes(cfg: ModelConfig, head: TaskHead) -> list[tuple[str, tuple[int, ...], str]]:
    d, n = cfg.hidden_dim, head.num_labels
    if head.kind == "mlm":
        return [
            ("head.mlm.transform.weight", (d, d), "normal"),
            ("head.mlm.transform.bias", (d,), "zeros"),
            ("head.mlm.norm.gain", (d,), "ones"),
            ("head.mlm.norm.bias", (d,), "zeros"),
            ("head.mlm.decoder.weight", (cfg.vocab_size, d), "normal"),
            ("head.mlm.decoder.bias", (cfg.vocab_size,), "zeros"),
        ]
    if head.kind == "token_classification":
        return [("head.token.weight", (d, n), "normal"), ("head.token.bias", (n,), "zeros")]
    if head.kind == "sequence_classification":
        return [
            ("head.seq.dense.weight", (d, d), "normal"),
            ("head.seq.dense.bias", (d,), "zeros"),
            ("head.seq.out.weight", (d, n), "normal"),
            ("head.seq.out.bias", (n,), "zeros"),
        ]
    return [("head.span.weight", (d, 2), "normal"), ("head.span.bias", (2,), "zeros")]


@lru_cache(maxsize=None)
def _truncated_std_factor() -> float:
    return float(truncnorm(-TRUNCATION, TRUNCATION).std())


def _sample(kind: str, shape: tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if kind == "zeros":
        return np.zeros(shape, dtype=np.float32)
    if kind == "ones":
        return np.ones(shape, dtype=np.float32)
    # truncated at +-2 scale units, rescaled so the realised std is INIT_STD
    x = rng.standard_normal(shape)
    bad = np.abs(x) > TRUNCATION
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > TRUNCATION
    return (x * (INIT_STD / _truncated_std_factor())).astype(np.float32)


@dataclass
class Model:
    config: ModelConfig
    params: dict[str, Tensor]
    head: TaskHead | None = None

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def rebuild(self, arrays: dict[str, np.ndarray], head: TaskHead | None | str = "keep", **config_changes) -> Model:
        cfg = replace(self.config, **config_changes) if config_changes else self.config
        new_head = self.head if head == "keep" else head
        if new_head is not None and new_head.kind == "mlm" and new_head.num_labels != cfg.vocab_size:
            new_head = replace(new_head, num_labels=cfg.vocab_size)
        return Model(cfg, {k: T.parameter(v) for k, v in arrays.items()}, new_head)

    def copy(self) -> Model:
        return self.rebuild({k: v.data.copy() for k, v in self.params.items()})

    def encoder_names(self) -> list[str]:
        return [k for k in self.params if not k.startswith("head.")]

    def head_names(self) -> list[str]:
        return [k for k in self.params if k.startswith("head.")]

    def without_head(self) -> Model:
        return self.rebuild({k: self.params[k].data.copy() for k in self.encoder_names()}, head=None)

    def with_head(self, head: TaskHead, head_params: dict[str, np.ndarray]) -> Model:
        arrays = {k: self.params[k].data.copy() for k in self.encoder_names()}
        arrays.update({k: np.array(v, dtype=np.float32) for k, v in head_params.items()})
        return self.rebuild(arrays, head=head)

    def head_arrays(self) -> dict[str, np.ndarray]:
        return {k: self.params[k].data.copy() for k in self.head_names()}


def init_model(config: ModelConfig, seed: int, head: TaskHead | None = None) -> Model:
    config.validate()
    rng = np.random.default_rng(seed)
    arrays = {name: _sample(kind, shape, rng) for name, shape, kind in encoder_shapes(config)}
    model = Model(config, {k: T.parameter(v) for k, v in arrays.items()}, None)
    if head is not None:
        model = attach_head(model, head, seed + 1)
    return model


def attach_head(model: Model, head: TaskHead, seed: int) -> Model:
    """Replace any existing head with a freshly initialised one."""
    if head.kind == "mlm":
        head = replace(head, num_labels=model.config.vocab_size)
    elif head.kind == "span_extraction":
        head = replace(head, num_labels=2)
    elif head.num_labels < 1:
        raise ConfigError(f"{head.kind} head needs num_labels >= 1")
    rng = np.random.default_rng(seed)
    arrays = {k: model.params[k].data.copy() for k in model.encoder_names()}
    for name, shape, kind in head_shapes(model.config, head):
        arrays[name] = _sample(kind, shape, rng)
    return model.rebuild(arrays, head=head)


@dataclass
class ActivationTrace:
    attn: list[Tensor]         # per layer, (batch, heads, seq, seq) post-softmax
    hidden: list[Tensor]       # H_0 (embedding output) .. H_L, each (batch, seq, d)
    logits: Tensor | None      # head-dependent
    attention_mask: np.ndarray = field(repr=False, default=None)


def _linear(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    return T.add(T.matmul(x, params[prefix + ".weight"]), params[prefix + ".bias"])


def forward(
    model: Model,
    input_ids,
    attention_mask=None,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> ActivationTrace:
    cfg, p = model.config, model.params
    ids = np.asarray(input_ids)
    if ids.ndim == 1:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise InputError(f"input_ids must be a non-empty (batch, seq) array, got {ids.shape}")
    if ids.dtype.kind not in "iu":
        raise InputError("input_ids must be integers")
    b, n = ids.shape
    if n > cfg.max_seq_len:
        raise InputError(f"sequence length {n} exceeds max_seq_len {cfg.max_seq_len}")
    if ids.min() < 0 or ids.max() >= cfg.vocab_size:
        raise InputError(f"token id outside [0, {cfg.vocab_size})")
    mask = np.ones((b, n), dtype=np.float32) if attention_mask is None else np.asarray(attention_mask, dtype=np.float32).reshape(b, n)

    drop = cfg.dropout if train else 0.0
    h, dh = cfg.num_heads, cfg.hidden_dim // cfg.num_heads
    scale = 1.0 / math.sqrt(dh)
    dtype = p["embeddings.token"].data.dtype
    additive = ((1.0 - mask) * -1e9).astype(dtype)[:, None, None, :]

    x = T.add(T.embed_lookup(p["embeddings.token"], ids), T.embed_lookup(p["embeddings.position"], np.arange(n)))
    hidden = [x]
    x = T.dropout(x, drop, rng)
    attn = []

    def heads(t: Tensor) -> Tensor:
        return T.transpose(T.reshape(t, (b, n, h, dh)), (0, 2, 1, 3))

    for i in range(1, cfg.num_layers + 1):
        pre = f"layers.{i}."
        q = heads(_linear(x, p, pre + "attention.query"))
        k = heads(_linear(x, p, pre + "attention.key"))
        v = heads(_linear(x, p, pre + "attention.value"))
        scores = T.add(T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), scale), additive)
        probs = T.softmax(scores)
        attn.append(probs)
        ctx = T.reshape(T.transpose(T.matmul(probs, v), (0, 2, 1, 3)), (b, n, cfg.hidden_dim))
        out = T.dropout(_linear(ctx, p, pre + "attention.output"), drop, rng)
        x = T.layernorm(T.add(x, out), p[pre + "attention.norm.gain"], p[pre + "attention.norm.bias"], cfg.layernorm_eps)
        ff = _linear(T.gelu(_linear(x, p, pre + "ffn.in")), p, pre + "ffn.out")
        ff = T.dropout(ff, drop, rng)
        x = T.layernorm(T.add(x, ff), p[pre + "ffn.norm.gain"], p[pre + "ffn.norm.bias"], cfg.layernorm_eps)
        hidden.append(x)

    logits = None if model.head is None else head_logits(model, x)
    return ActivationTrace(attn, hidden, logits, mask)


def head_logits(model: Model, x: Tensor) -> Tensor:
    p, kind = model.params, model.head.kind
    if kind == "mlm":
        t = T.gelu(_linear(x, p, "head.mlm.transform"))
        t = T.layernorm(t, p["head.mlm.norm.gain"], p["head.mlm.norm.bias"], model.config.layernorm_eps)
        return T.add(T.matmul(t, T.transpose(p["head.mlm.decoder.weight"], (1, 0))), p["head.mlm.decoder.bias"])
    if kind == "token_classification":
        return _linear(x, p, "head.token")
    if kind == "sequence_classification":
        cls = T.getitem(x, (slice(None), 0))
        return _linear(T.tanh(_linear(cls, p, "head.seq.dense")), p, "head.seq.out")
    return _linear(x, p, "head.span")


# ---------------------------------------------------------------------------
# students


def init_student_from_teacher(teacher: Model, lrf: int, vmap: VocabMap | None = None) -> Model:
    """Keep teacher layers whose 1-based index is a multiple of ``lrf``; slice the vocabulary."""
    lt = teacher.config.num_layers
    if lrf < 1 or lt % lrf:
        raise ConfigError(f"layer reduction factor {lrf} does not evenly divide {lt} teacher layers")
    ls = lt // lrf
    arrays: dict[str, np.ndarray] = {}
    for name, t in teacher.params.items():
        if not name.startswith("layers."):
            arrays[name] = t.data.copy()
    for j in range(1, ls + 1):
        src = f"layers.{j * lrf}."
        for name, t in teacher.params.items():
            if name.startswith(src):
                arrays[f"layers.{j}." + name[len(src):]] = t.data.copy()
    ordered = {name: arrays[name] for name, _, _ in encoder_shapes(replace(teacher.config, num_layers=ls))}
    ordered.update({k: arrays[k] for k in teacher.head_names()})
    student = teacher.rebuild(ordered, num_layers=ls)
    if vmap is not None:
        student = slice_embeddings(student, vmap)
    return student


def retained_layers(teacher_layers: int, lrf: int) -> list[int]:
    if lrf < 1 or teacher_layers % lrf:
        raise ConfigError(f"layer reduction factor {lrf} does not evenly divide {teacher_layers}")
    return [j * lrf for j in range(1, teacher_layers // lrf + 1)]


# ---------------------------------------------------------------------------
# cost models

# Per-element constants for non-matmul work (forward pass only).
SOFTMAX_FLOPS = 5
LAYERNORM_FLOPS = 5
GELU_FLOPS = 8


def count_params(model: Model) -> int:
    return int(sum(t.data.size for t in model.params.values()))


def layer_param_count(hidden_dim: int, ffn_dim: int) -> int:
    d, f = hidden_dim, ffn_dim
    return 4 * (d * d + d) + 2 * d * f + f + d + 2 * 2 * d


def config_param_count(config: ModelConfig, head: TaskHead | None = None) -> int:
    shapes = encoder_shapes(config) + (head_shapes(config, head) if head else [])
    return int(sum(math.prod(s) for _, s, _ in shapes))


def layer_flops(config: ModelConfig, seq_len: int) -> int:
    l, d, f, h = seq_len, config.hidden_dim, config.ffn_dim, config.num_heads
    matmuls = 2 * (4 * l * d * d + 2 * l * l * d + 2 * l * d * f)
    elementwise = SOFTMAX_FLOPS * h * l * l + 2 * LAYERNORM_FLOPS * l * d + GELU_FLOPS * l * f
    return matmuls + elementwise


def head_flops(config: ModelConfig, head: TaskHead | None, seq_len: int) -> int:
    if head is None:
        return 0
    l, d = seq_len, config.hidden_dim
    if head.kind == "mlm":
        base = 2 * l * d * d + GELU_FLOPS * l * d + LAYERNORM_FLOPS * l * d + 2 * l * d * config.vocab_size
    elif head.kind == "token_classification":
        base = 2 * l * d * head.num_labels
    elif head.kind == "sequence_classification":
        base = 2 * d * d + 2 * d * head.num_labels
    else:
        base = 2 * l * d * 2
    return base + 2 * l * head.cost_params


def count_flops(config: ModelConfig, head: TaskHead | None, seq_len: int) -> int:
    """Analytic forward-pass FLOPs (multiply-adds counted as 2) for one sequence."""
    if seq_len > config.max_seq_len:
        raise InputError(f"seq_len {seq_len} exceeds max_seq_len {config.max_seq_len}")
    embedding = seq_len * config.hidden_dim  # token + position add
    return embedding + config.num_layers * layer_flops(config, seq_len) + head_flops(config, head, seq_len)


# ---------------------------------------------------------------------------
# checkpoints


def _write_kv(path: Path, items: dict) -> None:
    path.write_text("".join(f"{k} = {v}\n" for k, v in items.items()), encoding="utf-8")


def read_kv(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = value.strip()
    return out


def write_tensors(directory: Path, arrays: dict[str, np.ndarray]) -> None:
    offset = 0
    rows = []
    with open(directory / "weights.bin", "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            rows.append(f"{name}\tfloat32\t{','.join(map(str, data.shape))}\t{offset}\n")
            fh.write(data.tobytes())
            offset += data.nbytes
    (directory / "manifest.tsv").write_text("".join(rows), encoding="utf-8")


def read_tensors(directory: Path) -> dict[str, np.ndarray]:
    blob = (directory / "weights.bin").read_bytes()
    arrays = {}
    for lineno, line in enumerate((directory / "manifest.tsv").read_text(encoding="utf-8").splitlines(), 1):
        parts = line.split("\t")
        if len(parts) != 4 or parts[1] != "float32":
            raise DataError(f"manifest.tsv:{lineno}: malformed entry")
        shape = tuple(int(s) for s in parts[2].split(",")) if parts[2] else ()
        start = int(parts[3])
        count = math.prod(shape)
        arrays[parts[0]] = np.frombuffer(blob, dtype="<f4", count=count, offset=start).reshape(shape).astype(np.float32)
    return arrays


def save_checkpoint(model: Model, directory: str | Path, vocab: Vocabulary | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensors(directory, model.arrays())
    cfg = asdict(model.config)
    if model.head is not None:
        cfg.update(head_kind=model.head.kind, head_num_labels=model.head.num_labels, head_cost_params=model.head.cost_params)
    _write_kv(directory / "config.txt", cfg)
    if vocab is not None:
        vocab.save(directory / "vocab.txt")


def load_checkpoint(directory: str | Path) -> tuple[Model, Vocabulary | None]:
    directory = Path(directory)
    if not (directory / "manifest.tsv").exists():
        raise DataError(f"{directory} is not a checkpoint (no manifest.tsv)")
    kv = read_kv(directory / "config.txt")
    fields = {f: kv[f] for f in ModelConfig.__dataclass_fields__ if f in kv}
    cfg = ModelConfig(**{k: (float(v) if k in ("dropout", "layernorm_eps") else int(v)) for k, v in fields.items()})
    head = None
    if "head_kind" in kv:
        head = TaskHead(kv["head_kind"], int(kv["head_num_labels"]), int(kv.get("head_cost_params", 0)))
    arrays = read_tensors(directory)
    expected = [n for n, _, _ in encoder_shapes(cfg) + (head_shapes(cfg, head) if head else [])]
    if list(arrays) != expected:
        raise DataError(f"{directory}: parameter names do not match config")
    vocab_path = directory / "vocab.txt"
    vocab = Vocabulary.load(vocab_path) if vocab_path.exists() else None
    return Model(cfg, {k: T.parameter(v) for k, v in arrays.items()}, head), vocab


def assert_same_shapes(a: Model, b: Model, names=None) -> None:
    for name in names or a.params:
        if name not in b.params or a.params[name].shape != b.params[name].shape:
            raise ContractError(f"parameter {name} differs between models")
