"""Acceptance criteria 1-8, each at its stated tolerance.

Every test records one PASS/FAIL line; the lines are echoed in the pytest
terminal summary (see conftest.py) and printed when run with ``-s``.
"""

import math
import shutil
import time
import zlib
from pathlib import Path

import numpy as np
import pytest

from bistil import tensor as T
from bistil.cli import main as cli_main
from bistil.distill import DistillConfig, LayerAlignment, general_bistillation, loss_attn, loss_hidden, loss_pred
from bistil.errors import ConfigError
from bistil.mlm import train_language_sft
from bistil.model import (
    ModelConfig, TaskHead, attach_head, count_flops, forward, init_model, init_student_from_teacher,
    layer_param_count, retained_layers,
)
from bistil.sft import SftConfig, apply_deltas, lt_sft_train, select_topk_mask, topk_count
from bistil.vocab import VocabMap, reduce_vocabulary, slice_embeddings

from conftest import random_batch, small_config
from oracles import (
    attn_loss_oracle, autodiff, brute_force_kept, central_difference, dense_sum_oracle, hidden_loss_oracle,
    random_graph, relative_error, soft_ce_oracle, topk_sort_oracle,
)

RESULTS: dict[int, str] = {}


def report(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    RESULTS[n] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. gradients


def test_criterion_1_gradient_suite():
    t0 = time.perf_counter()
    kinds = sorted(T.OPS)
    per_kind = math.ceil(50 / len(kinds))
    worst, worst_kind, graphs = 0.0, "", 0
    for kind in kinds:
        rng = np.random.default_rng(zlib.crc32(b"acceptance:" + kind.encode()))
        for _ in range(per_kind):
            build, leaves = random_graph(kind, rng)
            err = relative_error(autodiff(build, leaves, np.float32), central_difference(build, leaves))
            graphs += 1
            if err > worst:
                worst, worst_kind = err, kind
    elapsed = time.perf_counter() - t0
    ok = graphs >= 50 and worst < 1e-3 and elapsed < 120
    report(1, ok, f"{graphs} graphs over {len(kinds)} op kinds, max rel err {worst:.2e} ({worst_kind}), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. student construction


def test_criterion_2_student_construction():
    failures = []
    for lt in (4, 6, 12):
        teacher = init_model(small_config(num_layers=lt), 100 + lt, TaskHead("mlm"))
        for lrf in (2, 3):
            if lt % lrf:
                try:
                    init_student_from_teacher(teacher, lrf)
                    failures.append(f"L={lt} lrf={lrf}: no config error")
                except ConfigError:
                    pass
                continue
            student = init_student_from_teacher(teacher, lrf)
            expected = [i * lrf for i in range(1, lt // lrf + 1)]
            if retained_layers(lt, lrf) != expected or student.config.num_layers != len(expected):
                failures.append(f"L={lt} lrf={lrf}: retained set")
            for j, i in enumerate(expected, start=1):
                for name, p in student.params.items():
                    if name.startswith(f"layers.{j}."):
                        src = f"layers.{i}." + name[len(f"layers.{j}."):]
                        if p.data.tobytes() != teacher.params[src].data.tobytes():
                            failures.append(f"L={lt} lrf={lrf}: {name} differs from {src}")
        same = slice_embeddings(init_student_from_teacher(teacher, 1), VocabMap.identity(40))
        for name, p in teacher.params.items():
            if same.params[name].data.tobytes() != p.data.tobytes():
                failures.append(f"L={lt} lrf=1: {name} not bitwise")
        ids, mask = random_batch(np.random.default_rng(lt), 40)
        with T.no_grad():
            tt, st = forward(teacher, ids, mask), forward(same, ids, mask)
        if st.logits.data.tobytes() != tt.logits.data.tobytes():
            failures.append(f"L={lt} lrf=1: logits not bitwise")
        al = LayerAlignment(lt, 1)
        direct = loss_attn(st, tt, al).item() + loss_hidden(st, tt, al).item()
        rng = np.random.default_rng(lt)
        corpus = [[2] + rng.integers(5, 40, size=6).tolist() + [3] for _ in range(20)]
        res = general_bistillation(teacher, None, None, corpus, corpus, VocabMap.identity(40),
                                   DistillConfig(lrf=1, steps=1, lr=1e-3, eval_interval=1, batch_size=4))
        if abs(direct) > 1e-10 or abs(res.initial_val) > 1e-10:
            failures.append(f"L={lt} lrf=1: stage-1 loss {direct:.3e} / {res.initial_val:.3e}")
    report(2, not failures, "all layer copies bitwise, identity student exact" if not failures else "; ".join(failures[:3]))


# ---------------------------------------------------------------------------
# 3. vocabulary reduction


def test_criterion_3_vocab_reduction():
    failures = []
    worst = 0.0
    for f in range(20):
        rng = np.random.default_rng(300 + f)
        n = int(rng.integers(8, 400))
        p_src = rng.choice([0.0, 5e-7, 1e-6, 2e-6, 1e-3], size=n) * rng.random(n).round(1)
        p_tgt = rng.choice([0.0, 9.99e-7, 1e-6, 1e-2], size=n)
        vm = reduce_vocabulary(p_src, p_tgt)
        if vm.kept.tolist() != brute_force_kept(p_src, p_tgt, 1e-6):
            failures.append(f"fixture {f}: kept set")
        if f < 5:
            model = init_model(small_config(vocab_size=n, num_layers=2), f, TaskHead("mlm"))
            vm = VocabMap.from_kept(sorted(set(range(5)) | set(rng.choice(np.arange(5, n), n // 3, replace=False).tolist())), n)
            reduced = slice_embeddings(model, vm)
            ids = rng.choice(vm.kept, size=(3, 10))
            with T.no_grad():
                full = forward(model, ids).logits.data[..., vm.kept]
                small = forward(reduced, vm.map_ids(ids)).logits.data
            worst = max(worst, float(np.abs(full - small).max()))
    ok = not failures and worst <= 1e-5
    report(3, ok, f"20 fixtures match brute force, max kept-logit diff {worst:.1e}" if ok else "; ".join(failures[:3]) + f" diff {worst:.1e}")


# ---------------------------------------------------------------------------
# 4. LT-SFT


def _toy_classifier(seed):
    model = attach_head(init_model(small_config(num_layers=2), seed), TaskHead("sequence_classification", 2), seed + 1)
    rng = np.random.default_rng(seed)
    batches = []
    for _ in range(4):
        ids, mask = random_batch(rng, 40, batch=4)
        batches.append((ids, mask, rng.integers(0, 2, size=4)))

    def stream():
        while True:
            yield from batches

    def objective(m, batch, r):
        ids, mask, labels = batch
        return T.cross_entropy(forward(m, ids, mask).logits, labels), {}

    return model, stream(), objective


def test_criterion_4_lt_sft():
    failures = []
    cfg = SftConfig()
    for inst in range(20):
        rng = np.random.default_rng(400 + inst)
        shapes = {"layers.1.a.weight": (int(rng.integers(1, 6)), 4), "layers.1.a.bias": (int(rng.integers(1, 9)),),
                  "embeddings.token": (3, 3), "head.x.weight": (2, 2)}
        theta0 = {k: rng.normal(size=s).astype(np.float32) for k, s in shapes.items()}
        step = rng.choice([-1.0, 0.0, 1.0], size=1)[0] if inst % 2 else None
        theta1 = {k: v + (np.full(v.shape, step, np.float32) if step is not None and inst % 4 == 1
                          else rng.normal(size=v.shape).astype(np.float32)) for k, v in theta0.items()}
        k = float(rng.uniform(0.05, 0.95))
        masks = select_topk_mask(theta0, theta1, k, cfg.eligible)
        got = {(n, int(i)) for n, m in masks.items() for i in np.flatnonzero(m.ravel())}
        if got != topk_sort_oracle(theta0, theta1, k, cfg.eligible):
            failures.append(f"top-k instance {inst}")

    model, batches, objective = _toy_classifier(0)
    n = sum(model.params[x].data.size for x in model.encoder_names())
    task = lt_sft_train(model, objective, batches, SftConfig(density=0.08, dense_steps=5, sparse_steps=5, lr=1e-2)).delta
    mlm = init_model(small_config(num_layers=2), 0, TaskHead("mlm"))
    rng = np.random.default_rng(1)
    corpus = [[2] + rng.integers(5, 40, size=6).tolist() + [3] for _ in range(30)]
    lang = train_language_sft(mlm, corpus, SftConfig(density=0.04, dense_steps=5, sparse_steps=5, lr=1e-2, batch_size=4)).delta
    if task.nnz > math.ceil(0.08 * n) or lang.nnz > math.ceil(0.04 * n):
        failures.append(f"budget: task {task.nnz}/{math.ceil(0.08 * n)}, lang {lang.nnz}/{math.ceil(0.04 * n)}")
    if topk_count(0.08, n) > math.ceil(0.08 * n):
        failures.append("topk_count above ceiling")

    base = model.without_head()
    a = apply_deltas(base, [lang, task]).arrays()
    b = apply_deltas(base, [task, lang]).arrays()
    oracle = dense_sum_oracle(base.arrays(), [lang, task])
    diff = max(max(float(np.abs(a[x] - b[x]).max()), float(np.abs(a[x] - oracle[x]).max())) for x in a)
    if diff > 1e-6:
        failures.append(f"composition diff {diff:.1e}")
    detail = (f"20 top-k instances match, nnz task {task.nnz}<={math.ceil(0.08 * n)} lang {lang.nnz}<={math.ceil(0.04 * n)}, "
              f"composition diff {diff:.1e}")
    report(4, not failures, detail if not failures else "; ".join(failures[:3]))


# ---------------------------------------------------------------------------
# 5. losses


def test_criterion_5_losses():
    failures = []
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(500 + seed)
        ls, s = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        B, H, L, D = 2, 2, int(rng.integers(3, 7)), 4
        mask = np.ones((B, L))
        mask[1, L - 1:] = 0

        def attn():
            a = rng.random((B, H, L, L))
            return a / a.sum(-1, keepdims=True)

        with T.default_dtype(np.float64):
            sa = [attn() for _ in range(ls)]
            ta = [attn() for _ in range(ls * s)]
            sh = [rng.normal(size=(B, L, D)) for _ in range(ls + 1)]
            th = [rng.normal(size=(B, L, D)) for _ in range(ls * s + 1)]
            from bistil.model import ActivationTrace
            st = ActivationTrace([T.Tensor(x) for x in sa], [T.Tensor(x) for x in sh], None, mask)
            tt = ActivationTrace([T.Tensor(x) for x in ta], [T.Tensor(x) for x in th], None, mask)
            al = LayerAlignment(ls, s)
            worst = max(worst, abs(loss_attn(st, tt, al).item() - attn_loss_oracle(sa, ta, mask, al.attn_pairs)))
            worst = max(worst, abs(loss_hidden(st, tt, al).item() - hidden_loss_oracle(sh, th, mask, al.hidden_pairs)))
            zs, zt = rng.normal(size=(B, 3)), rng.normal(size=(B, 3))
            worst = max(worst, abs(loss_pred(T.Tensor(zs), zt).item() - soft_ce_oracle(zs, zt)))
            # zero iff equal
            same = ActivationTrace(tt.attn[s - 1::s], [tt.hidden[i * s] for i in range(ls + 1)], None, mask)
            if loss_attn(same, tt, al).item() != 0.0 or loss_hidden(same, tt, al).item() != 0.0:
                failures.append(f"seed {seed}: nonzero loss for equal representations")
            if loss_attn(st, tt, al).item() <= 0.0 or loss_hidden(st, tt, al).item() <= 0.0:
                failures.append(f"seed {seed}: zero loss for different representations")
            p = np.exp(zt - zt.max(-1, keepdims=True))
            p /= p.sum(-1, keepdims=True)
            entropy = float(-(p * np.log(p)).sum(-1).mean())
            if abs(loss_pred(T.Tensor(zt), zt).item() - entropy) > 1e-9:
                failures.append(f"seed {seed}: matched-logit loss differs from teacher entropy")
    if worst > 1e-6:
        failures.append(f"oracle diff {worst:.1e}")
    report(5, not failures, f"max oracle diff {worst:.1e}, zero-iff-equal and KL=0 hold" if not failures else "; ".join(failures[:3]))


# ---------------------------------------------------------------------------
# 6. efficiency accounting


def test_criterion_6_efficiency():
    cfg = ModelConfig(num_layers=12, hidden_dim=768, num_heads=12, ffn_dim=3072, vocab_size=119547, max_seq_len=512)
    seq = 128
    small = TaskHead("sequence_classification", 3)
    ratios = {}
    for lrf in (2, 3):
        student = ModelConfig(**{**cfg.__dict__, "num_layers": 12 // lrf})
        ratios[lrf] = count_flops(student, small, seq) / count_flops(cfg, small, seq)
    big = TaskHead("token_classification", 50, cost_params=23_000_000)
    student = ModelConfig(**{**cfg.__dict__, "num_layers": 6})
    big_ratio = count_flops(student, big, seq) / count_flops(cfg, big, seq)
    six = 6 * layer_param_count(768, 3072)
    rel = abs(six - 43e6) / 43e6
    ok = abs(ratios[2] - 0.50) <= 0.02 and abs(ratios[3] - 0.33) <= 0.02 and 0.55 < big_ratio < 0.70 and rel < 0.02
    report(6, ok, f"lrf2 {ratios[2]:.4f}, lrf3 {ratios[3]:.4f}, lrf2 with 23M head {big_ratio:.4f}, "
                  f"6 layers {six / 1e6:.2f}M ({100 * rel:.1f}% from 43M)")


# ---------------------------------------------------------------------------
# 7 and 8. desk run


_DESK: dict[str, object] = {}


def _desk_run(root: Path, tag: str) -> tuple[Path, float]:
    """Run the desk recipe through the CLI into ``root/desk`` and move it to ``root/tag``."""
    out = root / "desk"
    t0 = time.perf_counter()
    code = cli_main(["desk", "--out", str(out), "--seed", "0"])
    elapsed = time.perf_counter() - t0
    assert code == 0, f"desk run exited {code}"
    shutil.move(str(out), str(root / tag))
    return root / tag, elapsed


def _metrics(path: Path) -> dict[str, float]:
    rows = (path / "metrics.tsv").read_text().splitlines()[1:]
    return {r.split("\t")[0]: float(r.split("\t")[2]) for r in rows}


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    if "first" not in _DESK:
        root = tmp_path_factory.mktemp("acceptance")
        _DESK["root"] = root
        _DESK["first"] = _desk_run(root, "run1")
    return _DESK


@pytest.mark.slow
def test_criterion_7_desk_end_to_end(desk):
    path, elapsed = desk["first"]
    m = _metrics(path)
    teacher, lrf2, lrf3, scratch = m["teacher"], m["bistil_lrf2"], m["bistil_lrf3"], m["scratch"]
    a = abs(lrf2 - teacher) <= 2
    b = scratch <= lrf2 - 5
    c = lrf3 <= lrf2 or abs(lrf3 - lrf2) <= 1
    ok = a and b and c and elapsed < 1800
    report(7, ok, f"teacher {teacher:.1f}, lrf2 {lrf2:.1f}, lrf3 {lrf3:.1f}, scratch {scratch:.1f} "
                  f"(a={a}, b={b}, c={c}), {elapsed:.0f}s")


def _artifact_bytes(path: Path) -> dict[str, bytes]:
    out = {}
    for f in sorted(path.rglob("*")):
        if f.is_file():
            data = f.read_bytes()
            if f.name in ("run.txt", "desk_config.txt"):
                data = b"".join(ln for ln in data.splitlines(keepends=True) if not ln.startswith(b"timestamp = "))
            out[str(f.relative_to(path))] = data
    return out


@pytest.mark.slow
def test_criterion_8_determinism(desk):
    first, _ = desk["first"]
    second, _ = _desk_run(desk["root"], "run2")
    a, b = _artifact_bytes(first), _artifact_bytes(second)
    differing = sorted(k for k in set(a) | set(b) if a.get(k) != b.get(k))
    same_metrics = (first / "metrics.tsv").read_bytes() == (second / "metrics.tsv").read_bytes()
    ok = not differing and same_metrics
    report(8, ok, f"{len(a)} artifacts byte-identical across reruns (timestamps excluded)" if ok
           else f"differing: {', '.join(differing[:5])}")

