"""Shared test oracles: independent straight-line reimplementations and
brute-force references. Everything here is loop-based numpy written separately
from the package code paths on purpose."""

import math

import numpy as np

from pointprompt.autodiff import OpKind


# ---------------------------------------------------------------------------
# random op instances for finite-difference sweeps

def _spread(rng, shape, min_gap, axis):
    """Values with pairwise gaps >= min_gap along `axis` (tie-free for max/topk)."""
    x = rng.standard_normal(shape)
    ranks = np.argsort(np.argsort(x, axis=axis, kind="stable"), axis=axis)
    return x + ranks * min_gap * 3.0


def op_instance(kind: OpKind, rng: np.random.Generator):
    """One random (values, attrs) pair for `kind`, away from kinks and ties."""
    if kind == OpKind.MATMUL:
        if rng.uniform() < 0.5:
            return [rng.standard_normal((4, 5)), rng.standard_normal((5, 3))], {}
        return [rng.standard_normal((2, 4, 5)), rng.standard_normal((5, 3))], {}
    if kind == OpKind.ADD or kind == OpKind.MUL:
        if rng.uniform() < 0.5:
            return [rng.standard_normal((3, 4)), rng.standard_normal((3, 4))], {}
        return [rng.standard_normal((2, 3, 4)), rng.standard_normal(4)], {}
    if kind == OpKind.SCALE:
        return [rng.standard_normal((3, 5))], {"factor": float(rng.standard_normal())}
    if kind == OpKind.CONCAT:
        return [rng.standard_normal((2, 3)), rng.standard_normal((2, 3)),
                rng.standard_normal((2, 3))], {"axis": int(rng.integers(0, 2))}
    if kind == OpKind.SLICE:
        return [rng.standard_normal((4, 6))], {"axis": 1, "start": 1, "stop": 4}
    if kind == OpKind.GATHER:
        return [rng.standard_normal((5, 3))], \
            {"indices": rng.integers(0, 5, size=(2, 4))}
    if kind == OpKind.TRANSPOSE:
        return [rng.standard_normal((2, 3, 4))], \
            {"perm": tuple(rng.permutation(3).tolist())}
    if kind == OpKind.RESHAPE:
        return [rng.standard_normal((3, 4))], {"shape": (2, 6)}
    if kind == OpKind.RELU:
        x = rng.standard_normal((4, 5))
        x = np.where(np.abs(x) < 0.1, x + np.sign(x) * 0.2 + 0.01, x)
        return [x], {}
    if kind == OpKind.GELU:
        return [rng.standard_normal((4, 5))], {}
    if kind == OpKind.SOFTMAX:
        return [rng.standard_normal((3, 8))], {"axis": 1}
    if kind == OpKind.LAYERNORM:
        return [rng.standard_normal((3, 6)) * 2.0], {"axis": -1, "eps": 1e-5}
    if kind == OpKind.MAX_REDUCE:
        return [_spread(rng, (4, 6), 1e-3, 1)], {"axis": 1}
    if kind == OpKind.TOPK_REDUCE:
        return [_spread(rng, (5, 6), 1e-3, 0)], {"axis": 0,
                                                 "k": int(rng.integers(1, 4))}
    if kind == OpKind.MEAN_REDUCE:
        return [rng.standard_normal((3, 5, 2))], {"axis": int(rng.integers(0, 3))}
    if kind == OpKind.CROSS_ENTROPY_WITH_LOGITS:
        b, c = 4, 6
        return [rng.standard_normal((b, c))], \
            {"labels": rng.integers(0, c, size=b)}
    if kind == OpKind.SQUARED_DISTANCE_MATRIX:
        return [rng.standard_normal((5, 3)), rng.standard_normal((4, 3))], {}
    raise AssertionError(f"no sampler for {kind}")


# ---------------------------------------------------------------------------
# straight-line references

def ref_layernorm(x, axis=-1, eps=1e-5):
    mu = x.mean(axis=axis, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=axis, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def ref_gelu(x):
    c = math.sqrt(2.0 / math.pi)
    return 0.5 * x * (1.0 + np.tanh(c * (x + 0.044715 * x ** 3)))


def ref_softmax(x, axis=-1):
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def ref_encoder_layer(x, p, prefix, heads):
    """One pre-norm transformer layer on a single (L, d) matrix, all loops."""
    L, d = x.shape
    e = d // heads
    h = ref_layernorm(x) * p[f"{prefix}.ln1.g"] + p[f"{prefix}.ln1.b"]
    qkv = h @ p[f"{prefix}.attn.qkv.w"] + p[f"{prefix}.attn.qkv.b"]
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    ctx = np.zeros((L, d))
    for hd in range(heads):
        qs = q[:, hd * e:(hd + 1) * e]
        ks = k[:, hd * e:(hd + 1) * e]
        vs = v[:, hd * e:(hd + 1) * e]
        att = ref_softmax(qs @ ks.T / math.sqrt(e), axis=-1)
        ctx[:, hd * e:(hd + 1) * e] = att @ vs
    x = x + ctx @ p[f"{prefix}.attn.proj.w"] + p[f"{prefix}.attn.proj.b"]
    h = ref_layernorm(x) * p[f"{prefix}.ln2.g"] + p[f"{prefix}.ln2.b"]
    h = ref_gelu(h @ p[f"{prefix}.ffn.fc1.w"] + p[f"{prefix}.ffn.fc1.b"])
    return x + h @ p[f"{prefix}.ffn.fc2.w"] + p[f"{prefix}.ffn.fc2.b"]


def ref_patch_feature(group, p):
    """Mini-pointnet feature of one (k, 3) group."""
    h1 = ref_gelu(group @ p["backbone.embed.mlp1.w"] + p["backbone.embed.mlp1.b"])
    pooled = h1.max(axis=0)
    cat = np.concatenate([h1, np.tile(pooled, (group.shape[0], 1))], axis=1)
    z = cat @ p["backbone.embed.mlp2.w"] + p["backbone.embed.mlp2.b"]
    return z.max(axis=0)


def ref_pos(center, p):
    h = ref_gelu(center @ p["backbone.pos.fc1.w"] + p["backbone.pos.fc1.b"])
    return h @ p["backbone.pos.fc2.w"] + p["backbone.pos.fc2.b"]


def ref_embed(centers, groups, p):
    rows = [ref_patch_feature(groups[i], p) + ref_pos(centers[i], p)
            for i in range(centers.shape[0])]
    return np.stack([p["backbone.cls"]] + rows, axis=0)


def ref_forward_plain(centers, groups, p, depth, heads):
    x = ref_embed(centers, groups, p)
    for i in range(1, depth + 1):
        x = ref_encoder_layer(x, p, f"backbone.layer{i}", heads)
    return x


def brute_fps(points, m, start=0):
    chosen = [start]
    for _ in range(m - 1):
        best, best_d = None, -1.0
        for i in range(points.shape[0]):
            if i in chosen:
                continue
            d = min(((points[i] - points[j]) ** 2).sum() for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def brute_knn(queries, reference, k):
    out = np.empty((queries.shape[0], k), dtype=np.int64)
    for qi in range(queries.shape[0]):
        d = [(((queries[qi] - reference[ri]) ** 2).sum(), ri)
             for ri in range(reference.shape[0])]
        d.sort()
        out[qi] = [ri for _, ri in d[:k]]
    return out


def brute_chamfer(a, b):
    total_ab = 0.0
    for pa in a:
        total_ab += min(((pa - pb) ** 2).sum() for pb in b)
    total_ba = 0.0
    for pb in b:
        total_ba += min(((pb - pa) ** 2).sum() for pa in a)
    return total_ab / len(a) + total_ba / len(b)


def ref_edgeconv(feats, kk, w, bias):
    """Double-loop EdgeConv on (m, d_in) features; graph by brute knn."""
    m, din = feats.shape
    out = np.zeros((m, w.shape[1]))
    nidx = brute_knn(feats, feats, kk)
    for i in range(m):
        best = None
        for j in nidx[i]:
            edge = np.concatenate([feats[i], feats[j] - feats[i]])
            h = ref_gelu(edge @ w + bias)
            best = h if best is None else np.maximum(best, h)
        out[i] = best
    return out


def ref_generate_prompt_edgeconv3(feats, kk, p, scope="gen.shared"):
    h = feats
    outs = []
    for j in (1, 2, 3):
        h = ref_edgeconv(h, kk, p[f"{scope}.edgeconv{j}.w"], p[f"{scope}.edgeconv{j}.b"])
        outs.append(h)
    fused = np.concatenate(outs, axis=1) @ p[f"{scope}.fuse.w"] + p[f"{scope}.fuse.b"]
    return fused.max(axis=0, keepdims=True)


def param_values(reg):
    return {n: t.value.astype(np.float64) for n, t in reg.items()}
