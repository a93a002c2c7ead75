"""Slow reference implementations used to cross-check the package.

Everything here is written as plain loops in float64, independent of the
library code paths under test. Nothing in this file imports from ccreid.
"""

import math

import numpy as np
import torch


def erase_pixels(image, parsing, clothes_ids):
    """Per-pixel clothing erasure."""
    out = np.array(image, dtype=np.float64, copy=True)
    h, w = parsing.shape
    for i in range(h):
        for j in range(w):
            if int(parsing[i, j]) in clothes_ids:
                out[i, j, 0] = 0.0
                out[i, j, 1] = 0.0
                out[i, j, 2] = 0.0
    return out


def cell_part_masks(parsing, label_to_part, num_parts, out_h, out_w):
    """Majority-vote part masks on a proportional grid.

    Each output cell covers rows [i*H//out_h, (i+1)*H//out_h) and the analogous
    column span. A cell is assigned to the part with the most pixels; ties go
    to the lower part index, and background only wins outright majorities
    (a tie with any part loses).
    """
    src_h, src_w = parsing.shape
    masks = np.zeros((num_parts, out_h, out_w), dtype=np.float64)
    for i in range(out_h):
        r0 = (i * src_h) // out_h
        r1 = ((i + 1) * src_h) // out_h
        for j in range(out_w):
            c0 = (j * src_w) // out_w
            c1 = ((j + 1) * src_w) // out_w
            part_count = [0] * num_parts
            bg_count = 0
            for r in range(r0, r1):
                for c in range(c0, c1):
                    part = label_to_part.get(int(parsing[r, c]), -1)
                    if part < 0:
                        bg_count += 1
                    else:
                        part_count[part] += 1
            best = 0
            for k in range(1, num_parts):
                if part_count[k] > part_count[best]:
                    best = k
            if part_count[best] > 0 and part_count[best] >= bg_count:
                masks[best, i, j] = 1.0
    return masks


def part_loss(attention, part_masks, eps):
    """-sum(P * log(M + eps)) / (N * h * w), all loops."""
    att = np.asarray(attention, dtype=np.float64)
    pm = np.asarray(part_masks, dtype=np.float64)
    n, k, h, w = att.shape
    total = 0.0
    for b in range(n):
        for c in range(k):
            for i in range(h):
                for j in range(w):
                    total += pm[b, c, i, j] * math.log(att[b, c, i, j] + eps)
    return -total / (n * h * w)


def saliency(features):
    """Channel-mean map."""
    f = np.asarray(features, dtype=np.float64)
    n, c, h, w = f.shape
    out = np.zeros((n, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                s = 0.0
                for ch in range(c):
                    s += f[b, ch, i, j]
                out[b, i, j] = s / c
    return out


def consistency_loss(target, maps, pixel_mean=False):
    """Batch mean of the three maps' summed squared residuals."""
    t = np.asarray(target, dtype=np.float64)
    n, h, w = t.shape
    per_image = []
    for b in range(n):
        acc = 0.0
        for m in maps:
            m = np.asarray(m, dtype=np.float64)
            for i in range(h):
                for j in range(w):
                    acc += (m[b, i, j] - t[b, i, j]) ** 2
        per_image.append(acc / (h * w) if pixel_mean else acc)
    return float(np.mean(per_image))


def cross_entropy(logits, labels):
    """Mean NLL with an explicit log-softmax."""
    z = np.asarray(logits, dtype=np.float64)
    total = 0.0
    for b in range(z.shape[0]):
        row = z[b]
        m = row.max()
        logsum = m + math.log(np.sum(np.exp(row - m)))
        total += logsum - row[int(labels[b])]
    return total / z.shape[0]


def batch_hard_triplet(features, labels, margin):
    """O(N^2) batch-hard triplet with unnormalized euclidean distances."""
    f = np.asarray(features, dtype=np.float64)
    n = f.shape[0]
    dist = np.zeros((n, n))
    for a in range(n):
        for b in range(n):
            dist[a, b] = math.sqrt(np.sum((f[a] - f[b]) ** 2))
    total = 0.0
    for a in range(n):
        hardest_pos = 0.0
        hardest_neg = math.inf
        for b in range(n):
            if labels[b] == labels[a]:
                hardest_pos = max(hardest_pos, dist[a, b])
            else:
                hardest_neg = min(hardest_neg, dist[a, b])
        total += max(0.0, hardest_pos - hardest_neg + margin)
    return total / n


def keep_gallery(setting, q_pid, q_cam, q_clothes, g_pid, g_cam, g_clothes):
    """Whether one gallery entry survives the per-query filter."""
    if q_pid == g_pid and q_cam == g_cam:
        return False
    if setting == "cloth_changing" and q_pid == g_pid and q_clothes == g_clothes:
        return False
    if setting == "same_clothes" and q_pid == g_pid and q_clothes != g_clothes:
        return False
    return True


def cmc_map(dist, q_pids, q_cams, q_clothes, g_pids, g_cams, g_clothes,
            setting, topk):
    """First-principles retrieval metrics; returns (rank dict, mAP, per-query AP).

    Excluded queries (none kept, or no kept positive) carry a NaN AP and do
    not contribute to either average. Equal distances rank by gallery index.
    """
    num_q = len(q_pids)
    num_g = len(g_pids)
    per_ap = np.full(num_q, np.nan)
    hits = {k: [] for k in topk}
    for qi in range(num_q):
        scored = []
        for gi in range(num_g):
            if keep_gallery(setting, q_pids[qi], q_cams[qi], q_clothes[qi],
                            g_pids[gi], g_cams[gi], g_clothes[gi]):
                scored.append((float(dist[qi, gi]), gi))
        scored.sort(key=lambda t: (t[0], t[1]))
        match_ranks = [r + 1 for r, (_, gi) in enumerate(scored)
                       if g_pids[gi] == q_pids[qi]]
        if not match_ranks:
            continue
        precisions = [(m + 1) / rank for m, rank in enumerate(match_ranks)]
        per_ap[qi] = np.mean(precisions)
        for k in topk:
            hits[k].append(1.0 if match_ranks[0] <= k else 0.0)
    valid = ~np.isnan(per_ap)
    if not valid.any():
        return None
    rank = {k: float(np.mean(hits[k])) for k in topk}
    return rank, float(np.mean(per_ap[valid])), per_ap


def numeric_grad(fn, x, eps=1e-5):
    """Central finite differences of a scalar torch function at x."""
    x = x.detach().clone().double()
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(fn(x))
            flat[i] = orig - eps
            lo = float(fn(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def relative_error(a, b):
    denom = max(float(torch.linalg.norm(a.reshape(-1))),
                float(torch.linalg.norm(b.reshape(-1))), 1e-12)
    return float(torch.linalg.norm((a - b).reshape(-1))) / denom
