"""Independent brute-force reference implementations used by the tests.

Nothing here imports the package's metric or loss code.
"""
import math

import numpy as np
import scipy.linalg
import torch


def psnr_loops(a, b, max_value=255.0):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    se = 0.0
    for x, y in zip(a, b):
        se += (x - y) ** 2
    mse = se / len(a)
    return math.inf if mse == 0 else 10 * math.log10(max_value**2 / mse)


def ssim_windows(a, b, window=11, sigma=1.5, k1=0.01, k2=0.03, data_range=255.0):
    """Explicit per-window weighted statistics over every valid window position."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    r = np.arange(window) - (window - 1) / 2
    g1 = np.array([math.exp(-(v * v) / (2 * sigma * sigma)) for v in r])
    w = np.outer(g1, g1)
    w /= w.sum()
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    vals = []
    for i in range(a.shape[0] - window + 1):
        for j in range(a.shape[1] - window + 1):
            pa, pb = a[i:i + window, j:j + window], b[i:i + window, j:j + window]
            ma, mb = (w * pa).sum(), (w * pb).sum()
            va = (w * (pa - ma) ** 2).sum()
            vb = (w * (pb - mb) ** 2).sum()
            cov = (w * (pa - ma) * (pb - mb)).sum()
            vals.append(((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def luma(x):
    x = np.asarray(x, dtype=np.float64)
    return 0.299 * x[0] + 0.587 * x[1] + 0.114 * x[2]


def cosine_loops(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    dot = na = nb = 0.0
    for x, y in zip(a, b):
        dot += (x - ma) * (y - mb)
        na += (x - ma) ** 2
        nb += (y - mb) ** 2
    return dot / math.sqrt(na * nb)


def mean_cov_loops(feats):
    feats = np.asarray(feats, dtype=np.float64)
    n, d = feats.shape
    mu = [sum(feats[k, i] for k in range(n)) / n for i in range(d)]
    cov = np.zeros((d, d))
    for i in range(d):
        for j in range(d):
            cov[i, j] = sum((feats[k, i] - mu[i]) * (feats[k, j] - mu[j]) for k in range(n)) / (n - 1)
    return np.array(mu), cov


def fid_sqrtm(mu1, cov1, mu2, cov2):
    """Textbook Frechet distance with scipy's general matrix square root."""
    covmean = scipy.linalg.sqrtm(cov1 @ cov2)
    covmean = np.real(covmean)
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(cov1) + np.trace(cov2) - 2 * np.trace(covmean))


def seg_metrics_loops(gt, pred, num_classes=2):
    gt = np.asarray(gt).ravel()
    pred = np.asarray(pred).ravel()
    cm = [[0] * num_classes for _ in range(num_classes)]
    for g, p in zip(gt, pred):
        cm[int(g)][int(p)] += 1
    return cm_scores(cm)


def cm_scores(cm):
    k = len(cm)
    total = sum(sum(r) for r in cm)
    acc, iou, fw = [], [], 0.0
    for c in range(k):
        row = sum(cm[c])
        col = sum(cm[r][c] for r in range(k))
        if row == 0:
            continue
        tp = cm[c][c]
        acc.append(tp / row)
        iou_c = tp / (row + col - tp)
        iou.append(iou_c)
        fw += row / total * iou_c
    return sum(acc) / len(acc), sum(iou) / len(iou), fw


def cross_entropy_loops(probs, labels):
    """probs [K, H, W], labels [H, W] -> mean -log p(label)."""
    probs = np.asarray(probs, dtype=np.float64)
    total, n = 0.0, 0
    for i in range(labels.shape[0]):
        for j in range(labels.shape[1]):
            total += -math.log(probs[labels[i, j], i, j])
            n += 1
    return total / n


def l1_loops(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    return sum(abs(x - y) for x, y in zip(a, b)) / len(a)


def tile_count_formula(dim, window=256, step=205):
    on_grid = len([k for k in range(dim + 1) if k * step <= dim - window])
    return on_grid + (0 if (dim - window) % step == 0 else 1)


def conv_out(size, kernel=4, stride=2, pad=1):
    return (size + 2 * pad - kernel) // stride + 1


def finite_difference_check(loss_fn, tensors, n_coords=12, h=1e-7, seed=0):
    """Relative error between autograd and central differences on random coordinates.

    ``tensors`` are float64 leaves with requires_grad; returns the worst
    relative error ||g_auto - g_fd|| / max(||g_auto||, ||g_fd||) over tensors.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    worst = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        flat = t.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(n_coords, flat.numel()), replace=False)
        auto, num = [], []
        for k in idx:
            orig = flat[k].item()
            with torch.no_grad():
                flat[k] = orig + h
                up = loss_fn().item()
                flat[k] = orig - h
                down = loss_fn().item()
                flat[k] = orig
            num.append((up - down) / (2 * h))
            auto.append(g.view(-1)[k].item())
        auto, num = np.array(auto), np.array(num)
        scale = max(np.linalg.norm(auto), np.linalg.norm(num))
        if scale == 0:
            continue
        worst = max(worst, float(np.linalg.norm(auto - num) / scale))
    return worst
