"""Detection metrics (accuracy, AP, ROC-AUC, EER) and model evaluation over a split."""

from __future__ import annotations

import numpy as np
from scipy.stats import rankdata

from .data import normalize, stack_images
from .errors import ConfigError, DataError


def _scored(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.size == 0:
        raise DataError("empty scored set")
    if s.shape != y.shape:
        raise DataError(f"{s.size} scores but {y.size} labels")
    if np.any((y != 0) & (y != 1)):
        raise DataError("labels must be 0 or 1")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    return s, y.astype(bool)


def _both_classes(y, what):
    if y.all() or not y.any():
        raise DataError(f"{what} needs both classes present")


def accuracy(scores, labels, threshold=0.5):
    """Fraction classified correctly; a score equal to the threshold counts as fake."""
    s, y = _scored(scores, labels)
    return float(np.mean((s >= threshold) == y))


def _roc_steps(s, y):
    """Cumulative (tp, fp) after each distinct score, taken in descending order."""
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(s[1:] != s[:-1]), s.size - 1]
    tp = np.cumsum(y)[last]
    fp = np.cumsum(~y)[last]
    return tp, fp


def average_precision(scores, labels):
    """Step-wise AP: sum over distinct thresholds of (R_n - R_{n-1}) * P_n."""
    s, y = _scored(scores, labels)
    n_pos = int(y.sum())
    if n_pos == 0:
        raise DataError("average precision needs at least one positive")
    tp, fp = _roc_steps(s, y)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def roc_auc(scores, labels):
    """Mann-Whitney AUC: P(score_pos > score_neg) + 0.5 P(equal)."""
    s, y = _scored(scores, labels)
    _both_classes(y, "ROC-AUC")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    ranks = rankdata(s)
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def eer(scores, labels):
    """Equal-error rate.

    Thresholds run over the distinct scores in descending order, preceded by
    one above the maximum (FPR 0, FNR 1). Where FPR - FNR changes sign the
    two rates are interpolated linearly between the neighbouring thresholds.
    """
    s, y = _scored(scores, labels)
    _both_classes(y, "EER")
    n_pos = y.sum()
    n_neg = y.size - n_pos
    tp, fp = _roc_steps(s, y)
    fpr = np.r_[0.0, fp / n_neg]
    fnr = np.r_[1.0, 1.0 - tp / n_pos]
    diff = fpr - fnr
    i = int(np.argmax(diff >= 0))  # diff ends at +1, so a crossing always exists
    if diff[i] == 0:
        return float(fpr[i])
    w = -diff[i - 1] / (diff[i] - diff[i - 1])
    a = fpr[i - 1] + w * (fpr[i] - fpr[i - 1])
    b = fnr[i - 1] + w * (fnr[i] - fnr[i - 1])
    return float((a + b) / 2)


def metric_set(scores, labels, threshold=0.5):
    return {"acc": accuracy(scores, labels, threshold),
            "ap": average_precision(scores, labels),
            "auc": roc_auc(scores, labels),
            "eer": eer(scores, labels)}


# ---------------------------------------------------------------- evaluation


def evaluate(model, samples, threshold=0.5, batch_size=100, names=None):
    """Score a split (normalization only, no augmentation) and build the report.

    ``per_generator`` is keyed by true generator id (0 = real). For fake
    groups it holds real-vs-group metrics, for the real group its accuracy.
    ``router_means`` holds the mean merge weights per generator and, for
    generators the model has a branch for, the argmax routing accuracy.
    ``names`` are the split's generator names (id g is ``names[g - 1]``);
    branches are matched to them by name. By default the split is assumed
    to follow the model's branch order.
    """
    from .model import predict

    if not samples:
        raise DataError("empty evaluation split")
    image_shape = samples[0].image.shape
    cfg = model.backbone.config
    if image_shape != (cfg.channels, cfg.image_size, cfg.image_size):
        raise ConfigError(f"split images {image_shape} do not match the model input "
                          f"({cfg.channels}, {cfg.image_size}, {cfg.image_size})")
    images = normalize(stack_images(samples))
    scores, pis = predict(model, images, batch_size)
    scores = scores.astype(np.float64)
    pis = pis.astype(np.float64)
    labels = np.array([s.y for s in samples])
    gens = np.array([s.g for s in samples])
    names = list(names) if names is not None else list(model.names)

    report = metric_set(scores, labels, threshold) if 0 < labels.sum() < labels.size else {
        "acc": accuracy(scores, labels, threshold), "ap": None, "auc": None, "eer": None}
    report["threshold"] = float(threshold)
    report["counts"] = {"real": int((labels == 0).sum()), "fake": int((labels == 1).sum())}
    report["branches"] = list(model.names)

    per_gen, router_means = {}, {}
    reals = gens == 0
    for g in sorted(set(gens.tolist())):
        sel = gens == g
        entry = {"name": "real" if g == 0 else (names[g - 1] if g <= len(names) else f"g{g}"),
                 "n": int(sel.sum()),
                 "acc": accuracy(scores[sel], labels[sel], threshold)}
        if g > 0 and reals.any():
            pair = reals | sel
            entry.update({k: v for k, v in metric_set(scores[pair], labels[pair], threshold).items()
                          if k != "acc"})
        per_gen[str(g)] = entry
        means = {"mean": [float(v) for v in pis[sel].mean(axis=0)]}
        if g > 0 and g <= len(names) and names[g - 1] in model.names:
            col = model.names.index(names[g - 1])
            means["argmax_acc"] = float(np.mean(pis[sel].argmax(axis=1) == col))
        router_means[str(g)] = means
    report["per_generator"] = per_gen
    report["router_means"] = router_means
    return report
