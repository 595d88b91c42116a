"""Lottery-ticket sparse fine-tuning and composable sparse difference vectors."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator, Mapping

import numpy as np

from .errors import CompositionError, ConfigError, ContractError, DataError
from .model import Model, TaskHead, read_kv, read_tensors, write_tensors
from .train import FitResult, Objective, fit, load_arrays


@dataclass(frozen=True)
class SftDelta:
    """Sparse difference vector: per tensor, ascending flat indices and their values."""

    base_fingerprint: str
    density: float
    entries: dict[str, tuple[np.ndarray, np.ndarray]]

    @property
    def nnz(self) -> int:
        return int(sum(idx.size for idx, _ in self.entries.values()))

    def dense(self, shapes: Mapping[str, tuple[int, ...]]) -> dict[str, np.ndarray]:
        out = {}
        for name, (idx, val) in self.entries.items():
            arr = np.zeros(math.prod(shapes[name]), dtype=np.float32)
            arr[idx] = val
            out[name] = arr.reshape(shapes[name])
        return out

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        rows = [f"# density\t{self.density!r}\n", f"# base_fingerprint\t{self.base_fingerprint}\n"]
        with open(directory / "delta.bin", "wb") as fh:
            for name, (idx, val) in self.entries.items():
                rows.append(f"{name}\t{idx.size}\n")
                fh.write(np.ascontiguousarray(idx, dtype="<u8").tobytes())
                fh.write(np.ascontiguousarray(val, dtype="<f4").tobytes())
        (directory / "delta.manifest.tsv").write_text("".join(rows), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> SftDelta:
        directory = Path(directory)
        try:
            text = (directory / "delta.manifest.tsv").read_text(encoding="utf-8")
            blob = (directory / "delta.bin").read_bytes()
        except FileNotFoundError as exc:
            raise DataError(f"{directory} is not a delta directory: {exc}") from None
        header, entries, offset = {}, {}, 0
        for lineno, line in enumerate(text.splitlines(), 1):
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"delta.manifest.tsv:{lineno}: malformed line")
            if line.startswith("#"):
                header[parts[0][1:].strip()] = parts[1]
                continue
            count = int(parts[1])
            idx = np.frombuffer(blob, dtype="<u8", count=count, offset=offset).astype(np.int64)
            offset += 8 * count
            val = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).astype(np.float32)
            offset += 4 * count
            entries[parts[0]] = (idx, val)
        if offset != len(blob):
            raise DataError(f"{directory}/delta.bin size does not match manifest")
        return cls(header["base_fingerprint"], float(header["density"]), entries)


def save_head(directory: str | Path, head: TaskHead, arrays: Mapping[str, np.ndarray]) -> None:
    """Store a task head next to its delta (``head/`` subdirectory)."""
    directory = Path(directory) / "head"
    directory.mkdir(parents=True, exist_ok=True)
    write_tensors(directory, dict(arrays))
    (directory / "head.txt").write_text(
        f"kind = {head.kind}\nnum_labels = {head.num_labels}\ncost_params = {head.cost_params}\n", encoding="utf-8")


def load_head(directory: str | Path) -> tuple[TaskHead, dict[str, np.ndarray]] | None:
    directory = Path(directory) / "head"
    if not (directory / "head.txt").exists():
        return None
    kv = read_kv(directory / "head.txt")
    return TaskHead(kv["kind"], int(kv["num_labels"]), int(kv.get("cost_params", 0))), read_tensors(directory)


@dataclass
class SftConfig:
    density: float = 0.08
    dense_steps: int = 1000
    sparse_steps: int = 1000
    lr: float = 5e-5
    eval_interval: int = 100
    batch_size: int = 8
    weight_decay: float = 0.0
    # layernorm gains/biases and linear biases take part in selection
    include_norm_and_bias: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.density <= 1.0:
            raise ConfigError(f"density {self.density} outside (0, 1]")
        if self.dense_steps < 1 or self.sparse_steps < 0:
            raise ConfigError("dense_steps must be >= 1 and sparse_steps >= 0")

    def eligible(self, name: str) -> bool:
        if name.startswith("head."):
            return False
        if not self.include_norm_and_bias and (name.endswith(".bias") or ".norm." in name):
            return False
        return True


def fingerprint(model: Model) -> str:
    """64-bit hash of encoder parameter names, shapes and a sample of values."""
    h = hashlib.blake2b(digest_size=8)
    for name in model.encoder_names():
        data = model.params[name].data
        h.update(name.encode())
        h.update(repr(data.shape).encode())
        flat = data.reshape(-1)
        picks = np.unique(np.linspace(0, flat.size - 1, num=min(64, flat.size)).astype(np.int64))
        h.update(np.ascontiguousarray(flat[picks], dtype="<f4").tobytes())
    return h.hexdigest()


def topk_count(density: float, n: int) -> int:
    # round first so that e.g. 0.07 * 100 counts as 7, not 8
    return min(n, math.ceil(round(density * n, 9)))


def select_topk_mask(
    theta0: Mapping[str, np.ndarray],
    theta_dense: Mapping[str, np.ndarray],
    k: float,
    eligible: Callable[[str], bool],
) -> dict[str, np.ndarray]:
    """Boolean masks marking the ceil(k*N) eligible entries with the largest |change|.

    Ties are broken by ascending (name, flat index).
    """
    names = sorted(n for n in theta0 if eligible(n))
    for n in theta0:
        if n not in theta_dense or np.shape(theta0[n]) != np.shape(theta_dense[n]):
            raise ContractError(f"parameter {n} missing or reshaped between snapshots")
    if not names:
        return {n: np.zeros(np.shape(theta0[n]), dtype=bool) for n in theta0}
    change = np.concatenate([
        np.abs(np.asarray(theta_dense[n], dtype=np.float64) - np.asarray(theta0[n], dtype=np.float64)).ravel()
        for n in names
    ])
    count = topk_count(k, change.size)
    order = np.argsort(-change, kind="stable")[:count]
    flat = np.zeros(change.size, dtype=bool)
    flat[order] = True
    masks, offset = {}, 0
    for n in names:
        size = np.size(theta0[n])
        masks[n] = flat[offset:offset + size].reshape(np.shape(theta0[n]))
        offset += size
    for n in theta0:
        masks.setdefault(n, np.zeros(np.shape(theta0[n]), dtype=bool))
    return {n: masks[n] for n in theta0}


def extract_delta(
    base: Mapping[str, np.ndarray],
    tuned: Mapping[str, np.ndarray],
    mask: Mapping[str, np.ndarray],
    density: float,
    base_fingerprint: str,
) -> SftDelta:
    entries = {}
    for name, m in mask.items():
        if not m.any():
            continue
        diff = (np.asarray(tuned[name], dtype=np.float32) - np.asarray(base[name], dtype=np.float32)).ravel()
        idx = np.flatnonzero(m.ravel() & (diff != 0))
        if idx.size:
            entries[name] = (idx.astype(np.int64), diff[idx].astype(np.float32))
    return SftDelta(base_fingerprint, density, entries)


def apply_deltas(base: Model, deltas: Iterable[SftDelta], override: bool = False) -> Model:
    """A new model with theta + sum(phi); the base is left untouched."""
    out = base.copy()
    fp = None
    for delta in deltas:
        if not override:
            fp = fp or fingerprint(base)
            if delta.base_fingerprint != fp:
                raise CompositionError(
                    f"delta was trained on base {delta.base_fingerprint}, model is {fp}"
                )
        for name, (idx, val) in delta.entries.items():
            if name not in out.params:
                raise ContractError(f"delta names unknown parameter {name}")
            flat = out.params[name].data.reshape(-1)
            if idx.size and (idx.min() < 0 or idx.max() >= flat.size):
                raise ContractError(f"delta index out of range for {name}")
            flat[idx] += val
    return out


@dataclass
class SftResult:
    delta: SftDelta
    head: TaskHead | None
    head_arrays: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]
    dense: FitResult
    sparse: FitResult | None
    rows: list[dict] = field(default_factory=list)


def lt_sft_train(
    base: Model,
    objective: Objective,
    batches: Iterator,
    config: SftConfig,
    validate: Callable[[Model], float] | None = None,
    on_phase: Callable[[str, Model], None] | None = None,
) -> SftResult:
    """Dense phase, top-k selection, rewind to the base, sparse phase over the mask.

    Head parameters are trained densely in both phases, carried over between
    them, and returned separately; they never count against the density.
    """
    config.validate()
    theta0 = {n: base.params[n].data.copy() for n in base.encoder_names()}
    fp = fingerprint(base)
    model = base.copy()
    eligible = [n for n in model.encoder_names() if config.eligible(n)]
    trainable = eligible + model.head_names()

    dense = fit(model, objective, batches, config.dense_steps, config.lr, trainable,
                seed=config.seed, weight_decay=config.weight_decay)
    load_arrays(model, dense.arrays)
    if on_phase:
        on_phase("dense_end", model)
    mask = select_topk_mask(theta0, model.arrays(), config.density, config.eligible)

    sparse = None
    if config.sparse_steps > 0:
        load_arrays(model, {n: theta0[n] for n in eligible})
        if on_phase:
            on_phase("sparse_start", model)
        full_mask = {n: mask[n] for n in eligible}
        sparse = fit(model, objective, batches, config.sparse_steps, config.lr, trainable,
                     mask=full_mask, validate=validate, eval_interval=config.eval_interval,
                     seed=config.seed + 1, weight_decay=config.weight_decay)
        load_arrays(model, sparse.arrays)
    if on_phase:
        on_phase("final", model)

    delta = extract_delta(theta0, model.arrays(), mask, config.density, fp)
    rows = [{"phase": "dense", **r} for r in dense.rows] + [{"phase": "sparse", **r} for r in (sparse.rows if sparse else [])]
    return SftResult(delta, model.head, model.head_arrays(), mask, dense, sparse, rows)
