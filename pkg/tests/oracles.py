"""Naive reference implementations used as independent oracles.

Everything here is deliberately written as plain double/triple loops over
numpy float64 scalars, staying close to the defining formulas and away from
the vectorized production code paths.
"""

from __future__ import annotations

import math

import numpy as np


def kahan_dot(x, y) -> float:
    total = 0.0
    comp = 0.0
    for a, b in zip(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)):
        term = float(a) * float(b) - comp
        tmp = total + term
        comp = (tmp - total) - term
        total = tmp
    return total


def clip(s: float, c: float) -> float:
    return c * math.tanh(s / c)


def nce(scores: np.ndarray) -> float:
    """Direct evaluation of the noise-contrastive bound on an N x N matrix."""
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.shape[0]
    total = 0.0
    for i in range(n):
        neg = 0.0
        for j in range(n):
            if j != i:
                neg += math.exp(scores[i, j])
        total += math.log(math.exp(scores[i, i]) / (neg / n))
    return total / n


def local_global(locals_, globals_, dim: float, c: float) -> float:
    """Mean over locations of the NCE where location (i, s) scores against
    every sample's global."""
    locals_ = np.asarray(locals_, dtype=np.float64)
    globals_ = np.asarray(globals_, dtype=np.float64)
    b, s_count = locals_.shape[0], locals_.shape[1]
    total = 0.0
    for s in range(s_count):
        mat = np.zeros((b, b))
        for i in range(b):
            for j in range(b):
                raw = kahan_dot(locals_[i, s], globals_[j]) / math.sqrt(dim)
                mat[i, j] = clip(raw, c)
        total += nce(mat)
    return total / s_count


def rr(z_m, z_k, dim: float, c: float) -> float:
    z_m = np.asarray(z_m, dtype=np.float64)
    z_k = np.asarray(z_k, dtype=np.float64)
    b = z_m.shape[0]
    mat = np.zeros((b, b))
    for i in range(b):
        for j in range(b):
            mat[i, j] = clip(kahan_dot(z_m[i], z_k[j]) / math.sqrt(dim), c)
    return nce(mat)


def cc(locals_m, locals_k, fractions, dim: float, c: float) -> float:
    locals_k = np.asarray(locals_k, dtype=np.float64)
    b, s_k = locals_k.shape[0], locals_k.shape[1]
    anchors = np.stack(
        [
            locals_k[i, min(int(fractions[i] * s_k), s_k - 1)]
            for i in range(b)
        ]
    )
    return local_global(locals_m, anchors, dim, c)


def raw_scores_local_global(locals_, globals_, dim: float) -> list[float]:
    locals_ = np.asarray(locals_, dtype=np.float64)
    globals_ = np.asarray(globals_, dtype=np.float64)
    out = []
    for i in range(locals_.shape[0]):
        for s in range(locals_.shape[1]):
            for j in range(globals_.shape[0]):
                out.append(kahan_dot(locals_[i, s], globals_[j]) / math.sqrt(dim))
    return out


def raw_scores_rr(z_m, z_k, dim: float) -> list[float]:
    z_m = np.asarray(z_m, dtype=np.float64)
    z_k = np.asarray(z_k, dtype=np.float64)
    out = []
    for i in range(z_m.shape[0]):
        for j in range(z_k.shape[0]):
            out.append(kahan_dot(z_m[i], z_k[j]) / math.sqrt(dim))
    return out


def cca(z_m, z_k, eps: float = 1e-3) -> float:
    """Sum of squared canonical correlations via explicit inverse square
    roots (eigendecomposition path, independent of the solve-based one)."""
    z_m = np.asarray(z_m, dtype=np.float64)
    z_k = np.asarray(z_k, dtype=np.float64)
    b, d = z_m.shape
    zm = z_m - z_m.mean(0)
    zk = z_k - z_k.mean(0)
    c_mm = zm.T @ zm / (b - 1) + eps * np.eye(d)
    c_kk = zk.T @ zk / (b - 1) + eps * np.eye(d)
    c_mk = zm.T @ zk / (b - 1)

    def inv_sqrt(mat):
        w, v = np.linalg.eigh(mat)
        return v @ np.diag(1.0 / np.sqrt(w)) @ v.T

    t = inv_sqrt(c_mm) @ c_mk @ inv_sqrt(c_kk)
    return -float(np.sum(t * t))


def ae(x, x_hat) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    total = 0.0
    for i in range(x.shape[0]):
        total += float(((x[i] - x_hat[i]) ** 2).sum())
    return total / x.shape[0]


def cross_entropy(logits, labels) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for i, lab in enumerate(labels):
        row = logits[i]
        m = row.max()
        log_z = m + math.log(np.exp(row - m).sum())
        total += log_z - row[int(lab)]
    return total / len(labels)


def compose(
    terms,
    outputs,
    dim: float,
    c: float,
    lam: float,
    fractions=None,
    labels=None,
    symmetrize: bool = True,
) -> dict:
    """Assemble the minimized total exactly as the defining equations do.

    ``outputs`` maps modality -> dict with keys locals (B x S x d),
    z (B x d), x, recon, logits as needed.
    """
    mods = ["m1", "m2"]
    a, b = mods
    directions = [(a, b), (b, a)] if symmetrize else [(a, b)]
    values = {}
    raw = []
    if "CR" in terms:
        for m in mods:
            values[f"CR:{m}"] = local_global(
                outputs[m]["locals"], outputs[m]["z"], dim, c
            )
            raw += raw_scores_local_global(
                outputs[m]["locals"], outputs[m]["z"], dim
            )
    if "XX" in terms:
        for m, k in directions:
            values[f"XX:{m}>{k}"] = local_global(
                outputs[m]["locals"], outputs[k]["z"], dim, c
            )
            raw += raw_scores_local_global(
                outputs[m]["locals"], outputs[k]["z"], dim
            )
    if "RR" in terms:
        for m, k in directions:
            values[f"RR:{m}>{k}"] = rr(outputs[m]["z"], outputs[k]["z"], dim, c)
            raw += raw_scores_rr(outputs[m]["z"], outputs[k]["z"], dim)
    if "CC" in terms:
        for m, k in directions:
            values[f"CC:{m}>{k}"] = cc(
                outputs[m]["locals"], outputs[k]["locals"], fractions, dim, c
            )
            s_k = np.asarray(outputs[k]["locals"]).shape[1]
            anchors = np.stack(
                [
                    np.asarray(outputs[k]["locals"])[
                        i, min(int(fractions[i] * s_k), s_k - 1)
                    ]
                    for i in range(len(fractions))
                ]
            )
            raw += raw_scores_local_global(
                outputs[m]["locals"], anchors, dim
            )
    if "CCA" in terms:
        value = cca(outputs[a]["z"], outputs[b]["z"])
        for m, k in directions:
            values[f"CCA:{m}>{k}"] = value
    if "AE" in terms:
        for m in mods:
            values[f"AE:{m}"] = ae(outputs[m]["x"], outputs[m]["recon"])
    if "CE" in terms:
        for m in mods:
            values[f"CE:{m}"] = cross_entropy(outputs[m]["logits"], labels)

    penalty = lam * float(np.mean(np.square(raw))) if raw else 0.0
    total = penalty
    for key, value in values.items():
        if key.split(":")[0] in ("CR", "XX", "RR", "CC"):
            total -= value
        else:
            total += value
    values["penalty"] = penalty
    values["total"] = total
    return values


def roc_auc_pairs(scores, labels) -> float:
    """O(n^2) pair counting with half-credit for ties."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def mwu_pairs(a, b) -> float:
    """U statistic by direct pair counting (group-A wins plus half-ties)."""
    total = 0.0
    for x in np.asarray(a, dtype=np.float64):
        for y in np.asarray(b, dtype=np.float64):
            if x > y:
                total += 1.0
            elif x == y:
                total += 0.5
    return total


def exact_mwu_p(a, b) -> float:
    """Two-sided exact p by enumerating every group assignment."""
    from itertools import combinations

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    pooled = np.concatenate([a, b])
    n1 = len(a)
    u_obs = mwu_pairs(a, b)
    us = []
    for idx in combinations(range(len(pooled)), n1):
        mask = np.zeros(len(pooled), dtype=bool)
        mask[list(idx)] = True
        us.append(mwu_pairs(pooled[mask], pooled[~mask]))
    us = np.asarray(us)
    p_low = np.mean(us <= u_obs)
    p_high = np.mean(us >= u_obs)
    return min(1.0, 2.0 * min(p_low, p_high))


def flood_fill_components(mask: np.ndarray, connectivity: int) -> list[set]:
    """Connected components of a binary volume by explicit BFS."""
    if connectivity == 26:
        offsets = [
            (dx, dy, dz)
            for dx in (-1, 0, 1)
            for dy in (-1, 0, 1)
            for dz in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)
        ]
    else:
        offsets = [
            (1, 0, 0), (-1, 0, 0), (0, 1, 0),
            (0, -1, 0), (0, 0, 1), (0, 0, -1),
        ]
    mask = np.asarray(mask).astype(bool)
    seen = np.zeros_like(mask)
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        queue = [start]
        seen[start] = True
        comp = set()
        while queue:
            v = queue.pop()
            comp.add(v)
            for off in offsets:
                w = (v[0] + off[0], v[1] + off[1], v[2] + off[2])
                if all(0 <= w[i] < mask.shape[i] for i in range(3)):
                    if mask[w] and not seen[w]:
                        seen[w] = True
                        queue.append(w)
        components.append(comp)
    return components


def integrated_gradients_dense(encode_fn, x, baseline, dim, steps=4096):
    """Dense midpoint Riemann sum of the path integral, evaluated pointwise
    with finite-difference-free autograd via the provided encode_fn."""
    import torch

    x = torch.as_tensor(x, dtype=torch.float64)
    x0 = torch.as_tensor(baseline, dtype=torch.float64)
    grad_sum = torch.zeros_like(x)
    for t in range(steps):
        alpha = (t + 0.5) / steps
        pt = (x0 + alpha * (x - x0)).clone().requires_grad_(True)
        z = encode_fn(pt)
        z[dim].backward()
        grad_sum += pt.grad
    return ((x - x0) * grad_sum / steps).numpy()
