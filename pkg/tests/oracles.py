"""Independent reference implementations used by the test-suite.

Nothing here calls the code under test except to build inputs: every oracle
recomputes its answer with plain loops or brute force.
"""

from __future__ import annotations

import math
from itertools import product

import numpy as np

from bistil import tensor as T

# ---------------------------------------------------------------------------
# gradients


def central_difference(build, leaves: dict[str, np.ndarray], h: float = 1e-6) -> dict[str, np.ndarray]:
    """d build(leaves) / d leaf by central differences, evaluated in float64."""
    base = {k: np.array(v, dtype=np.float64) for k, v in leaves.items()}
    out = {}
    with T.default_dtype(np.float64), T.no_grad():
        for name, arr in base.items():
            grad = np.zeros_like(arr)
            it = np.nditer(arr, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                orig = arr[idx]
                arr[idx] = orig + h
                plus = build({k: T.Tensor(v.copy()) for k, v in base.items()}).item()
                arr[idx] = orig - h
                minus = build({k: T.Tensor(v.copy()) for k, v in base.items()}).item()
                arr[idx] = orig
                grad[idx] = (plus - minus) / (2 * h)
            out[name] = grad
    return out


def autodiff(build, leaves: dict[str, np.ndarray], dtype=np.float32) -> dict[str, np.ndarray]:
    with T.default_dtype(dtype):
        params = {k: T.parameter(np.asarray(v, dtype=dtype)) for k, v in leaves.items()}
        loss = build(params)
        T.backward(loss)
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).astype(np.float64) for k, p in params.items()}


def relative_error(a: dict[str, np.ndarray], b: dict[str, np.ndarray]) -> float:
    num = math.sqrt(sum(float(((a[k] - b[k]) ** 2).sum()) for k in a))
    den = math.sqrt(sum(float((b[k] ** 2).sum()) for k in b))
    return num / max(den, 1e-8)


def _dtype_of(params) -> np.dtype:
    return next(iter(params.values())).data.dtype


def _const(arr, params):
    return T.Tensor(np.asarray(arr, dtype=_dtype_of(params)))


def _readout(y: T.Tensor, weights: np.ndarray, params) -> T.Tensor:
    """Scalar sum(y * W) with a fixed random W, so no gradient cancels by symmetry."""
    return T.sum(T.mul(y, _const(weights, params)))


def random_graph(kind: str, rng: np.random.Generator):
    """(build, leaves) for a small random graph whose central op is ``kind``.

    The op is sandwiched between a random unary prelude and a weighted
    readout so gradients flow through a composition, not a single op.
    """
    b, t, d = int(rng.integers(1, 3)), int(rng.integers(2, 4)), int(rng.integers(2, 5))
    shape = (b, t, d)
    leaves = {"x": rng.normal(size=shape)}
    prelude = rng.choice(["none", "tanh", "gelu", "scale"])
    W = rng.normal(size=shape)

    def pre(params):
        x = params["x"]
        if prelude == "tanh":
            return T.tanh(x)
        if prelude == "gelu":
            return T.gelu(x)
        if prelude == "scale":
            return T.mul(x, 0.7)
        return x

    if kind in ("add", "sub", "mul"):
        bshape = [(d,), (1, t, 1), shape, (t, d)][int(rng.integers(4))]
        leaves["y"] = rng.normal(size=bshape)
        op = T.OPS[kind]
        build = lambda p: _readout(op(pre(p), p["y"]), W, p)
    elif kind == "matmul":
        k = int(rng.integers(2, 4))
        leaves["y"] = rng.normal(size=(d, k)) if rng.random() < 0.5 else rng.normal(size=(b, d, k))
        Wm = rng.normal(size=(b, t, k))
        build = lambda p: _readout(T.matmul(pre(p), p["y"]), Wm, p)
    elif kind == "reshape":
        Wr = rng.normal(size=(b * t, d))
        build = lambda p: _readout(T.reshape(pre(p), (b * t, d)), Wr, p)
    elif kind == "transpose":
        axes = tuple(int(a) for a in rng.permutation(3))
        Wt = rng.normal(size=tuple(shape[a] for a in axes))
        build = lambda p: _readout(T.transpose(pre(p), axes), Wt, p)
    elif kind == "getitem":
        idx = (slice(None), rng.integers(0, t, size=t + 1))   # repeated rows accumulate
        Wg = rng.normal(size=(b, t + 1, d))
        build = lambda p: _readout(T.getitem(pre(p), idx), Wg, p)
    elif kind in ("sum", "mean"):
        axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(5))]
        keep = bool(rng.random() < 0.5)
        out_shape = np.zeros(shape).sum(axis=axis, keepdims=keep).shape
        Ws = rng.normal(size=out_shape)
        op = T.OPS[kind]
        build = lambda p: _readout(op(pre(p), axis=axis, keepdims=keep), Ws, p)
    elif kind in ("tanh", "gelu", "softmax"):
        op = T.OPS[kind]
        build = lambda p: _readout(op(pre(p)), W, p)
    elif kind == "layernorm":
        leaves["g"] = rng.normal(size=(d,)) + 1.0
        leaves["b"] = rng.normal(size=(d,))
        build = lambda p: _readout(T.layernorm(pre(p), p["g"], p["b"]), W, p)
    elif kind == "embed_lookup":
        v = int(rng.integers(3, 7))
        leaves = {"x": rng.normal(size=(v, d))}
        ids = rng.integers(0, v, size=(b, t + 2))   # repeats exercise accumulation
        We = rng.normal(size=(b, t + 2, d))
        build = lambda p: _readout(T.embed_lookup(pre(p), ids), We, p)
    elif kind == "dropout":
        seed = int(rng.integers(1 << 30))
        build = lambda p: _readout(T.dropout(pre(p), 0.3, np.random.default_rng(seed)), W, p)
    elif kind == "mse":
        leaves["y"] = rng.normal(size=shape)
        weight = (rng.random(size=(b, t, 1)) < 0.7).astype(float)
        weight[0, 0, 0] = 1.0
        build = lambda p: T.mse(pre(p), p["y"], weight)
    elif kind == "soft_cross_entropy":
        probs = rng.dirichlet(np.ones(d), size=(b, t))
        weight = rng.random(size=(b, t))
        build = lambda p: T.soft_cross_entropy(pre(p), _const(probs, p), weight)
    elif kind == "cross_entropy":
        labels = rng.integers(0, d, size=(b, t))
        labels[0, -1] = -100
        build = lambda p: T.cross_entropy(pre(p), labels)
    else:
        raise KeyError(kind)
    return build, leaves


# ---------------------------------------------------------------------------
# distillation losses


def attn_loss_oracle(s_attn, t_attn, mask, pairs) -> float:
    total = 0.0
    for i, j in pairs:
        s, t = s_attn[i - 1], t_attn[j - 1]
        B, H, L, _ = s.shape
        acc, count = 0.0, 0
        for b in range(B):
            for h in range(H):
                for q in range(L):
                    for k in range(L):
                        if mask[b][q] and mask[b][k]:
                            acc += (float(s[b, h, q, k]) - float(t[b, h, q, k])) ** 2
                            count += 1
        total += acc / count
    return total / len(pairs)


def hidden_loss_oracle(s_hidden, t_hidden, mask, pairs) -> float:
    total = 0.0
    for i, j in pairs:
        s, t = s_hidden[i], t_hidden[j]
        B, L, D = s.shape
        acc, count = 0.0, 0
        for b in range(B):
            for q in range(L):
                if not mask[b][q]:
                    continue
                for c in range(D):
                    acc += (float(s[b, q, c]) - float(t[b, q, c])) ** 2
                    count += 1
        total += acc / count
    return total / len(pairs)


def soft_ce_oracle(student_logits, teacher_logits, mask=None) -> float:
    """Mean over (non-pad) positions of -sum_c p_T(c) log p_S(c)."""
    zs = np.asarray(student_logits, dtype=np.float64)
    zt = np.asarray(teacher_logits, dtype=np.float64)
    rows_s = zs.reshape(-1, zs.shape[-1])
    rows_t = zt.reshape(-1, zt.shape[-1])
    keep = np.ones(len(rows_s), bool) if mask is None else np.asarray(mask).reshape(-1).astype(bool)
    acc, n = 0.0, 0
    for r in range(len(rows_s)):
        if not keep[r]:
            continue
        ps = [math.exp(v) for v in rows_t[r] - rows_t[r].max()]
        zsum = sum(ps)
        qs = [math.exp(v) for v in rows_s[r] - rows_s[r].max()]
        qsum = sum(qs)
        acc += -sum((ps[c] / zsum) * math.log(qs[c] / qsum) for c in range(len(ps)))
        n += 1
    return acc / n


# ---------------------------------------------------------------------------
# selection, vocabulary, composition


def topk_sort_oracle(theta0: dict, theta1: dict, k: float, eligible) -> set[tuple[str, int]]:
    """Rank every eligible (name, index) by |change| desc, then name, then index."""
    entries = []
    for name in theta0:
        if not eligible(name):
            continue
        diff = np.abs(np.asarray(theta1[name], dtype=np.float64) - np.asarray(theta0[name], dtype=np.float64)).ravel()
        entries.extend((-float(diff[i]), name, i) for i in range(diff.size))
    entries.sort()
    count = min(len(entries), math.ceil(round(k * len(entries), 9)))
    return {(name, i) for _, name, i in entries[:count]}


def brute_force_kept(p_src, p_tgt, threshold, n_specials=5) -> list[int]:
    return [i for i in range(len(p_src)) if i < n_specials or p_src[i] >= threshold or p_tgt[i] >= threshold]


def dense_sum_oracle(base: dict[str, np.ndarray], deltas) -> dict[str, np.ndarray]:
    out = {k: np.array(v, dtype=np.float64) for k, v in base.items()}
    for d in deltas:
        for name, (idx, val) in d.entries.items():
            flat = out[name].reshape(-1)
            for i, v in zip(idx.tolist(), val.tolist()):
                flat[i] += v
    return out


def longest_match_oracle(word: str, tokens: set[str]) -> list[str]:
    """Greedy longest-prefix segmentation by exhaustive prefix search; None-pieces mean UNK."""
    pieces, i, unk = [], 0, False
    while i < len(word):
        best = None
        for j in range(len(word), i, -1):
            cand = word[i:j] if i == 0 else "##" + word[i:j]
            if cand in tokens:
                best = (cand, j)
                break
        if best is None:
            if not unk:
                pieces.append(None)
            unk = True
            i += 1
        else:
            pieces.append(best[0])
            unk = False
            i = best[1]
    return pieces


# ---------------------------------------------------------------------------
# metrics


def bio_chunks_oracle(tags: list[str]) -> set[tuple[str, int, int]]:
    """conlleval-style chunking written as an explicit start/end state machine."""
    chunks = set()
    for i in range(len(tags)):
        pre, typ = (tags[i].split("-", 1) + [""])[:2] if tags[i] != "O" else ("O", "")
        prev_pre, prev_typ = ("O", "")
        if i > 0 and tags[i - 1] != "O":
            prev_pre, prev_typ = tags[i - 1].split("-", 1)
        starts = pre == "B" or (pre == "I" and (prev_pre == "O" or prev_typ != typ))
        if not starts:
            continue
        j = i
        while j + 1 < len(tags) and tags[j + 1] == f"I-{typ}":
            j += 1
        chunks.add((typ, i, j))
    return chunks


def f1_from_sets(gold: list[set], pred: list[set]) -> float:
    tp = sum(len(g & p) for g, p in zip(gold, pred))
    ng = sum(len(g) for g in gold)
    npred = sum(len(p) for p in pred)
    if tp == 0:
        return 0.0
    prec, rec = tp / npred, tp / ng
    return 100 * 2 * prec * rec / (prec + rec)


def best_span_oracle(start, end, max_len=30) -> tuple[int, int]:
    best, arg = -np.inf, (0, 0)
    n = len(start)
    for i, j in product(range(n), range(n)):
        if i <= j < i + max_len and start[i] + end[j] > best:
            best, arg = start[i] + end[j], (i, j)
    return arg
