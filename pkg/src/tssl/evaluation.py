"""Frozen-feature probing, the corruption grid, K-I traces, and OOD scoring.

Everything here is a pure function of (checkpoint, inputs, seed). Feature
extraction batches freely; anything consuming randomness derives a stream
from the seed and fixed integer tags, so results never depend on batch
shape or thread count.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import corruptions
from . import data as data_mod
from . import fusion, models
from . import rng as rng_mod

# Sub-tags under PURPOSE_KI so the trajectory, the native detector, and
# pair selection never share a stream.
_KI_TRACE = 0
_KI_NATIVE = 1
_KI_SELECT = 2


# ---------------------------------------------------------------------------
# Linear probe


@dataclass
class ProbeResult:
    """Trained affine head on raw (unstandardized) features."""
    dataset_id: str
    accuracy: float               # test top-1, percent
    per_class_accuracy: list      # percent, indexed by class
    val_accuracy: float           # best validation top-1, percent
    best_epoch: int
    w: np.ndarray                 # (D, C)
    b: np.ndarray                 # (C,)

    def logits(self, features: np.ndarray) -> np.ndarray:
        return features @ self.w + self.b

    def predict(self, features: np.ndarray) -> np.ndarray:
        return np.argmax(self.logits(features), axis=1)

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id,
            "accuracy": self.accuracy,
            "per_class_accuracy": self.per_class_accuracy,
            "val_accuracy": self.val_accuracy,
            "best_epoch": self.best_epoch,
        }


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def linear_probe(train_features, train_labels, test_features, test_labels,
                 seed: int = 0, epochs: int = 50, lr: float = 0.2,
                 batch_size: int = 128, momentum: float = 0.9,
                 val_fraction: float = 0.1, weight_decay: float = 1e-4,
                 dataset_id: str = "default") -> ProbeResult:
    """Multinomial logistic regression on frozen features.

    Minibatch gradient descent with momentum and cosine decay; the head
    with the best validation cross-entropy is kept (a continuous selection
    signal; val accuracy on a small holdout is too quantized to pick a
    stable epoch). Features are whitened with probe-train statistics
    internally (ridge-regularized PCA whitening) and the transform is
    folded back into the returned (w, b), so the head applies to raw
    features. Whitening plus the small l2 term gives a well-conditioned
    problem with a unique optimum, which is what keeps two probe seeds on
    the same features within a fraction of a point.
    """
    x = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if x.ndim != 2 or y.shape != (x.shape[0],):
        raise ValueError("linear_probe: features must be (N, D) with matching labels")
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("linear_probe: need at least two classes in the labels")
    num_classes = int(classes.max()) + 1
    n, d = x.shape

    # The validation holdout is a protocol constant (a function of n only),
    # so the probe seed controls batch order but not which samples train.
    perm = rng_mod.derive(0, rng_mod.PURPOSE_PROBE, 0, n).permutation(n)
    n_val = max(1, int(round(val_fraction * n)))
    if n_val >= n:
        raise ValueError("linear_probe: validation split leaves no training data")
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    mu = x[tr_idx].mean(axis=0)
    centered = x[tr_idx] - mu
    cov = centered.T @ centered / tr_idx.size
    eigval, eigvec = np.linalg.eigh(cov)
    ridge = 1e-6 * max(np.trace(cov) / d, 1e-30)
    transform = eigvec / np.sqrt(eigval + ridge)       # (D, D) whitener
    xs = (x - mu) @ transform
    x_tr, y_tr = xs[tr_idx], y[tr_idx]
    x_val, y_val = xs[val_idx], y[val_idx]

    onehot = np.eye(num_classes)[y_tr]
    w = np.zeros((d, num_classes))
    b = np.zeros(num_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    best = (np.inf, 0, w.copy(), b.copy())

    n_tr = x_tr.shape[0]
    for epoch in range(epochs):
        step_lr = lr * 0.5 * (1.0 + np.cos(np.pi * epoch / epochs))
        order = rng_mod.derive(seed, rng_mod.PURPOSE_PROBE, 1, epoch).permutation(n_tr)
        for start in range(0, n_tr, batch_size):
            idx = order[start : start + batch_size]
            probs = _softmax(x_tr[idx] @ w + b)
            delta = (probs - onehot[idx]) / idx.size
            gw = x_tr[idx].T @ delta + weight_decay * w
            gb = delta.sum(axis=0)
            vw = momentum * vw + gw
            vb = momentum * vb + gb
            w = w - step_lr * vw
            b = b - step_lr * vb
        logits_val = x_val @ w + b
        shifted = logits_val - logits_val.max(axis=1, keepdims=True)
        val_loss = float(-np.mean(
            shifted[np.arange(y_val.size), y_val]
            - np.log(np.exp(shifted).sum(axis=1))))
        if val_loss < best[0]:
            best = (val_loss, epoch, w.copy(), b.copy())

    _, best_epoch, w, b = best
    val_acc = float(np.mean(np.argmax(x_val @ w + b, axis=1) == y_val)) * 100.0
    # Fold the whitener into the head: (x - mu) @ T @ w + b == x @ w' + b'.
    w_raw = transform @ w
    b_raw = b - mu @ w_raw

    xt = np.asarray(test_features, dtype=np.float64)
    yt = np.asarray(test_labels, dtype=np.int64)
    pred = np.argmax(xt @ w_raw + b_raw, axis=1)
    accuracy = float(np.mean(pred == yt)) * 100.0
    per_class = []
    for c in range(num_classes):
        mask = yt == c
        per_class.append(float(np.mean(pred[mask] == c)) * 100.0 if mask.any() else float("nan"))
    return ProbeResult(dataset_id, accuracy, per_class, val_acc, best_epoch, w_raw, b_raw)


# ---------------------------------------------------------------------------
# Corruption grid


def corruption_grid(model: models.Model, probe: ProbeResult,
                    test_images: np.ndarray, test_labels: np.ndarray,
                    seed: int = 0) -> dict:
    """Accuracy for every (family, severity) cell plus the clean column.

    Each cell gets its own stream derived from (seed, family, severity),
    consumed over images in index order, so a cell's numbers do not
    depend on which other cells are evaluated.
    """
    labels = np.asarray(test_labels, dtype=np.int64)

    def acc(images):
        feats = models.encode_features(model, images)
        return float(np.mean(probe.predict(feats) == labels)) * 100.0

    grid = {"clean": acc(test_images), "cells": {}}
    for family in corruptions.CORRUPTION_FAMILIES:
        fam_id = corruptions.FAMILY_IDS[family]
        row = {}
        for severity in corruptions.SEVERITIES:
            stream = rng_mod.derive(seed, rng_mod.PURPOSE_EVAL_CORRUPT, fam_id, severity)
            spec = corruptions.CorruptionSpec(family, severity)
            corrupted = np.stack([
                corruptions.apply_corruption(img, spec, stream) for img in test_images
            ])
            row[severity] = acc(corrupted)
        grid["cells"][family] = row
    return grid


def grid_to_csv(grid: dict, path: str) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["family", "clean"] + [f"s{s}" for s in corruptions.SEVERITIES])
        for family in corruptions.CORRUPTION_FAMILIES:
            row = grid["cells"][family]
            writer.writerow([family, f"{grid['clean']:.4f}"]
                            + [f"{row[s]:.4f}" for s in corruptions.SEVERITIES])


def grid_from_csv(path: str) -> dict:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    header = rows[0]
    expected = ["family", "clean"] + [f"s{s}" for s in corruptions.SEVERITIES]
    if header != expected:
        raise ValueError(f"unrecognized grid header {header!r} in {path}")
    grid = {"clean": None, "cells": {}}
    for row in rows[1:]:
        family = row[0]
        if family not in corruptions.FAMILY_IDS or family == "clean":
            raise ValueError(f"unknown corruption family {family!r} in {path}")
        grid["clean"] = float(row[1])
        grid["cells"][family] = {s: float(row[2 + j])
                                 for j, s in enumerate(corruptions.SEVERITIES)}
    return grid


def diff_grids(grid_a: dict, grid_b: dict) -> dict:
    """Per-cell difference a - b, same shape as a grid."""
    out = {"clean": grid_a["clean"] - grid_b["clean"], "cells": {}}
    for family in corruptions.CORRUPTION_FAMILIES:
        out["cells"][family] = {
            s: grid_a["cells"][family][s] - grid_b["cells"][family][s]
            for s in corruptions.SEVERITIES
        }
    return out


# ---------------------------------------------------------------------------
# K-I trajectories


def _require_evidential(model: models.Model):
    if "evid/0/w" not in model.params:
        raise ValueError("checkpoint has no evidential heads")


def require_evidential_variant(variant: str) -> None:
    """Reject checkpoints whose training never touched the evidential heads.

    Every checkpoint stores all heads (shared initialization across
    variants), so presence of the parameters is not enough: a cosine-gate
    or contrastive-only run leaves them at their initial values.
    """
    if variant not in ("trust_ssl_additive", "trust_ssl_multiplicative",
                       "scalar_uncertainty"):
        raise ValueError(
            f"checkpoint has no evidential heads (variant {variant!r})")


def _factor_ki(model: models.Model, feats1: np.ndarray, feats2: np.ndarray):
    """Mean-over-factors (K, I) per sample for two feature batches."""
    with ad.no_grad():
        z1s = models.factorize(model, ad.constant(feats1))
        z2s = models.factorize(model, ad.constant(feats2))
        ks, is_ = [], []
        for t in range(model.config.num_factors):
            s1 = models.evidence(model, z1s[t], t)
            s2 = models.evidence(model, z2s[t], t)
            k = fusion.conflict(s1.belief.data, s2.belief.data)
            i = fusion.fused_ignorance(s1.ignorance.data, s2.ignorance.data, k)
            ks.append(k)
            is_.append(i)
    return np.mean(ks, axis=0), np.mean(is_, axis=0)


def ki_trajectory(model: models.Model, test_images: np.ndarray, seed: int = 0,
                  n_pairs: int = 200) -> dict:
    """Mean (K, I) per (family, severity) over clean/corrupted pairs.

    Per-factor values are averaged over factors first, then over pairs.
    The clean/clean baseline row pairs each image with itself.
    """
    _require_evidential(model)
    n = test_images.shape[0]
    n_pairs = min(n_pairs, n)
    pick = rng_mod.derive(seed, rng_mod.PURPOSE_KI, _KI_SELECT).choice(
        n, size=n_pairs, replace=False)
    clean = test_images[pick]
    clean_feats = models.encode_features(model, clean)

    k0, i0 = _factor_ki(model, clean_feats, clean_feats)
    result = {
        "n_pairs": int(n_pairs),
        "baseline": {"family": "clean", "severity": 0,
                     "k_mean": float(np.mean(k0)), "i_mean": float(np.mean(i0))},
        "rows": [],
    }
    for family in corruptions.CORRUPTION_FAMILIES:
        fam_id = corruptions.FAMILY_IDS[family]
        for severity in corruptions.SEVERITIES:
            stream = rng_mod.derive(seed, rng_mod.PURPOSE_KI, _KI_TRACE, fam_id, severity)
            spec = corruptions.CorruptionSpec(family, severity)
            corrupted = np.stack([
                corruptions.apply_corruption(img, spec, stream) for img in clean
            ])
            feats = models.encode_features(model, corrupted)
            k, i = _factor_ki(model, clean_feats, feats)
            result["rows"].append({
                "family": family, "severity": severity,
                "k_mean": float(np.mean(k)), "i_mean": float(np.mean(i)),
            })
    return result


# ---------------------------------------------------------------------------
# OOD detectors

OOD_SHIFTS = ("haze_s4", "rain_s4", "darken", "hue_rotate")
DETECTORS = ("mahalanobis", "energy", "feature_norm", "native_ki")


def mahalanobis_score(id_features: np.ndarray, query_features: np.ndarray,
                      ridge_scale: float = 1e-3) -> np.ndarray:
    """Squared Mahalanobis distance to the ID fit; higher means more OOD."""
    xid = np.asarray(id_features, dtype=np.float64)
    q = np.asarray(query_features, dtype=np.float64)
    n, d = xid.shape
    if n < d + 1:
        raise ValueError(f"mahalanobis_score: need at least d+1={d + 1} ID samples, got {n}")
    mu = xid.mean(axis=0)
    centered = xid - mu
    cov = centered.T @ centered / n
    cov = cov + ridge_scale * (np.trace(cov) / d) * np.eye(d)
    prec = np.linalg.inv(cov)
    delta = q - mu
    return np.einsum("ij,jk,ik->i", delta, prec, delta)


def energy_score(features: np.ndarray, tau: float = 1.0) -> np.ndarray:
    """-tau * logsumexp(h / tau) over feature dims; higher means more OOD."""
    h = np.asarray(features, dtype=np.float64) / tau
    m = h.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.sum(np.exp(h - m), axis=1))
    return -tau * lse


def feature_norm_score(features: np.ndarray) -> np.ndarray:
    """Negated feature norm: low-norm inputs score as more OOD."""
    return -np.linalg.norm(np.asarray(features, dtype=np.float64), axis=1)


def native_ki_score(model: models.Model, images: np.ndarray, seed: int = 0,
                    draws: int = 4, tag: int = 0) -> np.ndarray:
    """Mean over factors of (K + I) between two standard stochastic views.

    Views use crop + flip only (no corruption); scores average r = draws
    view pairs per image. Always in (0, 2); 1 exactly at total ignorance.
    """
    _require_evidential(model)
    cfg = data_mod.AugmentConfig(out_size=model.config.image_size, corruption_prob=0.0)
    n = images.shape[0]
    totals = np.zeros(n)
    for draw in range(draws):
        v1 = np.stack([
            data_mod.augment_view(
                images[i], rng_mod.derive(seed, rng_mod.PURPOSE_KI, _KI_NATIVE,
                                          tag, draw, i, 0), cfg)[0]
            for i in range(n)
        ])
        v2 = np.stack([
            data_mod.augment_view(
                images[i], rng_mod.derive(seed, rng_mod.PURPOSE_KI, _KI_NATIVE,
                                          tag, draw, i, 1), cfg)[0]
            for i in range(n)
        ])
        f1 = models.encode_features(model, v1)
        f2 = models.encode_features(model, v2)
        k, i_ = _factor_ki(model, f1, f2)
        totals += k + i_
    return totals / draws


def auroc(id_scores: np.ndarray, ood_scores: np.ndarray) -> float:
    """Trapezoidal ROC area with OOD positive; ties earn half credit.

    Computed as the Mann-Whitney statistic over average ranks, which is
    exactly the trapezoidal integral of the empirical ROC curve.
    """
    id_s = np.asarray(id_scores, dtype=np.float64).ravel()
    ood_s = np.asarray(ood_scores, dtype=np.float64).ravel()
    if id_s.size == 0 or ood_s.size == 0:
        raise ValueError("auroc: both score sets must be nonempty")
    combined = np.concatenate([id_s, ood_s])
    order = np.argsort(combined, kind="stable")
    ranks = np.empty_like(combined)
    ranks[order] = np.arange(1, combined.size + 1, dtype=np.float64)
    # Average ranks within tie groups.
    sorted_vals = combined[order]
    start = 0
    for stop in range(1, combined.size + 1):
        if stop == combined.size or sorted_vals[stop] != sorted_vals[start]:
            if stop - start > 1:
                ranks[order[start:stop]] = 0.5 * (start + 1 + stop)
            start = stop
    n_i, n_o = id_s.size, ood_s.size
    rank_sum = float(np.sum(ranks[n_i:]))
    return (rank_sum - n_o * (n_o + 1) / 2.0) / (n_i * n_o)


def make_ood_shift(shift: str, images: np.ndarray, seed: int = 0) -> np.ndarray:
    """Apply one held-out distribution shift to a stack of images."""
    if shift == "haze_s4":
        spec = corruptions.CorruptionSpec("haze", 4)
        return np.stack([corruptions.apply_corruption(img, spec) for img in images])
    if shift == "rain_s4":
        stream = rng_mod.derive(seed, rng_mod.PURPOSE_OOD, OOD_SHIFTS.index("rain_s4"))
        spec = corruptions.CorruptionSpec("rain", 4)
        return np.stack([corruptions.apply_corruption(img, spec, stream) for img in images])
    if shift == "darken":
        return np.clip(images * 0.5, 0.0, 1.0)
    if shift == "hue_rotate":
        return np.roll(images, 1, axis=1)
    raise ValueError(f"unknown OOD shift {shift!r}; one of {OOD_SHIFTS}")


def ood_report(model: models.Model, train_images: np.ndarray,
               test_images: np.ndarray, seed: int = 0,
               detectors=DETECTORS, shifts=OOD_SHIFTS,
               energy_tau: float = 1.0, ki_draws: int = 4) -> dict:
    """AUROC of every requested detector on every held-out shift.

    ID is the clean test split; each shift produces the OOD split from
    the same images. Mahalanobis fits on clean training features.
    """
    for det in detectors:
        if det not in DETECTORS:
            raise ValueError(f"unknown detector {det!r}; one of {DETECTORS}")
    if "native_ki" in detectors:
        _require_evidential(model)

    train_feats = models.encode_features(model, train_images)
    id_feats = models.encode_features(model, test_images)
    id_scores = {}
    if "mahalanobis" in detectors:
        id_scores["mahalanobis"] = mahalanobis_score(train_feats, id_feats)
    if "energy" in detectors:
        id_scores["energy"] = energy_score(id_feats, energy_tau)
    if "feature_norm" in detectors:
        id_scores["feature_norm"] = feature_norm_score(id_feats)
    if "native_ki" in detectors:
        id_scores["native_ki"] = native_ki_score(model, test_images, seed,
                                                 draws=ki_draws, tag=0)

    report = {"shifts": {}, "num_id": int(test_images.shape[0]),
              "detectors": list(detectors)}
    for shift_idx, shift in enumerate(shifts):
        shifted = make_ood_shift(shift, test_images, seed)
        ood_feats = models.encode_features(model, shifted)
        row = {}
        if "mahalanobis" in detectors:
            row["mahalanobis"] = auroc(id_scores["mahalanobis"],
                                       mahalanobis_score(train_feats, ood_feats))
        if "energy" in detectors:
            row["energy"] = auroc(id_scores["energy"], energy_score(ood_feats, energy_tau))
        if "feature_norm" in detectors:
            row["feature_norm"] = auroc(id_scores["feature_norm"],
                                        feature_norm_score(ood_feats))
        if "native_ki" in detectors:
            row["native_ki"] = auroc(id_scores["native_ki"],
                                     native_ki_score(model, shifted, seed,
                                                     draws=ki_draws,
                                                     tag=1 + shift_idx))
        report["shifts"][shift] = row
    return report


def write_json(payload: dict, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")
