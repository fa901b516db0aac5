"""Frozen-encoder embeddings and linear probes.

Embeddings come from a full-image, noise-free encoder pass. Probes are
L2-regularized logistic regressions fit by L-BFGS on the explicit objective

    J(w, b) = (1/n) sum_i loss_i + ||w||^2 / (2 C n)

with the bias unpenalized and weights started at zero, so training is a
deterministic convex optimization. Multi-label tasks fit one binary probe per
class; single-label tasks fit one multinomial softmax probe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.optimize import minimize

from . import metrics
from .data import BandStats, Chip
from .model import ChipMAE, patchify, random_mask
from .train import chips_to_tensors

MODES = ("cls", "all", "avg")


@dataclass
class EmbeddingSet:
    features: np.ndarray  # (n, D) float64
    mode: str
    labels: np.ndarray | None = None  # (n,) ints or (n, C) multi-hot
    task: str | None = None           # "single" | "multi" | None

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("embeddings contain non-finite values")
        if self.labels is not None and len(self.labels) != len(self.features):
            raise ValueError("label count != embedding count")


def labels_to_targets(chips: list[Chip], class_count: int,
                      task: str) -> np.ndarray:
    if task == "single":
        return np.array([int(c.labels) for c in chips], dtype=np.int64)
    if task == "multi":
        y = np.zeros((len(chips), class_count), dtype=np.float64)
        for i, c in enumerate(chips):
            for j in c.labels or ():
                y[i, j] = 1.0
        return y
    raise ValueError(f"unknown task {task!r}")


@torch.no_grad()
def extract_embeddings(model: ChipMAE, chips: list[Chip], mode: str, *,
                       stats: BandStats | None = None,
                       batch_size: int = 64) -> np.ndarray:
    """Encoder features for whole chips: no masking, router noise off.

    cls: the class-token output (D = d). avg: mean over every output token
    (D = d). all: every token concatenated in sequence order (D = (5+N)d).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    model.eval()
    pixels, meta = chips_to_tensors(chips, stats)
    out: list[np.ndarray] = []
    cls_slot = 4  # [week, hour, lat, lon, cls, patches...]
    for start in range(0, len(chips), batch_size):
        px = pixels[start:start + batch_size]
        mt = meta[start:start + batch_size]
        patches = patchify(px, model.config.patch)
        plan = random_mask(px.shape[0], model.config.num_patches, 0.0)
        tokens, _ = model.encode(patches, mt, plan, noise=False)
        if mode == "cls":
            feats = tokens[:, cls_slot, :]
        elif mode == "avg":
            feats = tokens.mean(dim=1)
        else:
            feats = tokens.reshape(tokens.shape[0], -1)
        out.append(feats.double().cpu().numpy())
    if not out:
        return np.zeros((0, 0))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Probe training
# ---------------------------------------------------------------------------

@dataclass
class LinearProbe:
    weights: np.ndarray  # (C, D)
    bias: np.ndarray     # (C,)
    task: str            # "single" | "multi"

    def scores(self, features: np.ndarray) -> np.ndarray:
        """(n, C) probabilities: sigmoid per class (multi) or softmax (single)."""
        logits = features @ self.weights.T + self.bias
        if self.task == "multi":
            return _sigmoid(logits)
        z = logits - logits.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return ez / ez.sum(axis=1, keepdims=True)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _fit_binary(features: np.ndarray, y: np.ndarray, reg_c: float,
                max_iter: int, grad_tol: float) -> tuple[np.ndarray, float]:
    """One L2-regularized binary logistic regression, bias unpenalized."""
    n, d = features.shape
    lam = 1.0 / (reg_c * n)

    def objective(wb: np.ndarray) -> tuple[float, np.ndarray]:
        w, b = wb[:d], wb[d]
        z = features @ w + b
        # log(1 + exp(-yz)) computed stably via logaddexp
        signed = np.where(y > 0.5, -z, z)
        loss = np.logaddexp(0.0, signed).mean() + 0.5 * lam * (w @ w)
        p = _sigmoid(z)
        resid = (p - y) / n
        grad = np.concatenate([features.T @ resid + lam * w,
                               [resid.sum()]])
        return loss, grad

    res = minimize(objective, np.zeros(d + 1), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "maxfun": 10 * max_iter,
                            "gtol": grad_tol, "ftol": 1e-14})
    return res.x[:d], float(res.x[d])


def _fit_multinomial(features: np.ndarray, y: np.ndarray, class_count: int,
                     reg_c: float, max_iter: int,
                     grad_tol: float) -> tuple[np.ndarray, np.ndarray]:
    """Softmax regression over all classes jointly, bias unpenalized."""
    n, d = features.shape
    k = class_count
    lam = 1.0 / (reg_c * n)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    def objective(wb: np.ndarray) -> tuple[float, np.ndarray]:
        w = wb[:d * k].reshape(k, d)
        b = wb[d * k:]
        logits = features @ w.T + b
        z = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(z).sum(axis=1))
        ce = (logsumexp - z[np.arange(n), y]).mean()
        loss = ce + 0.5 * lam * np.sum(w * w)
        p = np.exp(z)
        p /= p.sum(axis=1, keepdims=True)
        resid = (p - onehot) / n
        grad_w = resid.T @ features + lam * w
        grad_b = resid.sum(axis=0)
        return loss, np.concatenate([grad_w.ravel(), grad_b])

    res = minimize(objective, np.zeros(d * k + k), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter, "maxfun": 10 * max_iter,
                            "gtol": grad_tol, "ftol": 1e-14})
    return res.x[:d * k].reshape(k, d), res.x[d * k:]


def train_probe(features: np.ndarray, targets: np.ndarray, task: str, *,
                reg_c: float = 1.0, max_iter: int = 1000,
                grad_tol: float = 1e-5) -> LinearProbe:
    """Fit a linear probe on frozen features.

    multi: ``targets`` is an (n, C) multi-hot matrix, one independent binary
    probe per class. single: ``targets`` is an (n,) class vector; classes are
    0..max and at least two must be present.
    """
    features = np.asarray(features, dtype=np.float64)
    if task == "multi":
        targets = np.asarray(targets, dtype=np.float64)
        if targets.ndim != 2:
            raise ValueError("multi-label targets must be (n, C)")
        rows = [
            _fit_binary(features, targets[:, c], reg_c, max_iter, grad_tol)
            for c in range(targets.shape[1])
        ]
        weights = np.stack([w for w, _ in rows])
        bias = np.array([b for _, b in rows])
        return LinearProbe(weights, bias, task)
    if task == "single":
        targets = np.asarray(targets, dtype=np.int64)
        class_count = int(targets.max()) + 1
        if len(np.unique(targets)) < 2:
            raise ValueError("single-label probe needs >= 2 classes present")
        weights, bias = _fit_multinomial(features, targets, class_count,
                                         reg_c, max_iter, grad_tol)
        return LinearProbe(weights, bias, task)
    raise ValueError(f"unknown task {task!r}")


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class ProbeReport:
    task: str
    mode: str
    per_class_ap: list[float]
    map_micro: float
    map_macro: float
    precision_micro: float
    recall_micro: float
    f1_micro: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    oa: float | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "task": self.task,
            "mode": self.mode,
            "per_class_ap": self.per_class_ap,
            "map_micro": self.map_micro,
            "map_macro": self.map_macro,
            "precision_micro": self.precision_micro,
            "recall_micro": self.recall_micro,
            "f1_micro": self.f1_micro,
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "f1_macro": self.f1_macro,
            "oa": self.oa,
        }
        out.update(self.extra)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        lines = ["metric,value"]
        for key, value in self.to_dict().items():
            if key == "per_class_ap":
                for c, ap in enumerate(value):
                    lines.append(f"ap_class_{c},{ap!r}")
            elif isinstance(value, (int, float)) and value is not None:
                lines.append(f"{key},{value!r}")
            elif value is None:
                lines.append(f"{key},")
            else:
                lines.append(f"{key},{value}")
        return "\n".join(lines) + "\n"


def evaluate_probe(probe: LinearProbe, features: np.ndarray,
                   targets: np.ndarray, *, mode: str = "cls",
                   threshold: float = 0.5) -> ProbeReport:
    """Score a trained probe; decisions at the probability threshold.

    Single-label decisions are argmax one-hot; multi-label decisions are
    independent per class. All metric conventions are inherited from
    :mod:`chipmae.metrics`.
    """
    features = np.asarray(features, dtype=np.float64)
    scores = probe.scores(features)
    if probe.task == "single":
        labels = np.asarray(targets, dtype=np.int64)
        truth = np.zeros_like(scores, dtype=bool)
        truth[np.arange(len(labels)), labels] = True
        predicted = scores.argmax(axis=1)
        decisions = np.zeros_like(scores, dtype=bool)
        decisions[np.arange(len(predicted)), predicted] = True
        oa = metrics.overall_accuracy(predicted, labels)
    else:
        truth = np.asarray(targets) > 0.5
        decisions = scores > threshold
        oa = None
    micro_map, macro_map, per_class = metrics.mean_average_precision(scores, truth)
    micro = metrics.micro_prf(decisions, truth)
    macro = metrics.macro_prf(decisions, truth)
    return ProbeReport(
        task=probe.task, mode=mode,
        per_class_ap=per_class, map_micro=micro_map, map_macro=macro_map,
        precision_micro=micro.precision, recall_micro=micro.recall,
        f1_micro=micro.f1,
        precision_macro=macro.precision, recall_macro=macro.recall,
        f1_macro=macro.f1,
        oa=oa,
    )
