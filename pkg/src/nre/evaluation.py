"""Downstream harnesses: linear probing of latents, gradient-sign attacks
with refinement defense, and reconstruction-error anomaly scoring with
EER/ROC-AUC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Adam, Network, mlp
from .training import NREModel

ATTACK_MODES = ("white-box", "black-box-substitute")


# ---------------------------------------------------------------------------
# linear probe

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 300
    lr: float = 0.05
    l2: float = 1e-4
    seed: int = 0


@dataclass
class LinearProbe:
    """One-vs-rest hinge-loss linear classifier over frozen latents."""

    weight: np.ndarray
    bias: np.ndarray
    classes: np.ndarray
    config: ProbeConfig

    def scores(self, latents: np.ndarray) -> np.ndarray:
        return latents @ self.weight.T + self.bias

    def predict(self, latents: np.ndarray) -> np.ndarray:
        return self.classes[np.argmax(self.scores(latents), axis=1)]


def train_probe(latents: np.ndarray, labels: np.ndarray, cfg: ProbeConfig = ProbeConfig()) -> LinearProbe:
    """Full-batch hinge + L2 training of a multiclass linear probe.

    Deterministic given cfg.seed; raises on single-class input.
    """
    latents = np.asarray(latents, dtype=np.float64)
    labels = np.asarray(labels)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("probe needs at least 2 classes")
    n, d = latents.shape
    c = classes.size
    target = np.where(labels[:, None] == classes[None, :], 1.0, -1.0)
    w = np.zeros((c, d))
    b = np.zeros(c)
    adam = Adam([w, b], lr=cfg.lr)
    for _ in range(cfg.epochs):
        margins = 1.0 - target * (latents @ w.T + b)
        active = (margins > 0) * (-target) / (n * c)
        dw = active.T @ latents + 2.0 * cfg.l2 * w
        db = active.sum(axis=0)
        adam.step([w, b], [dw, db])
    return LinearProbe(weight=w, bias=b, classes=classes, config=cfg)


def accuracy(predicted: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predicted) == np.asarray(labels)))


def encode_flat(net: Network, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    rows = [net.forward(x[s:s + batch_size]) for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(rows, axis=0)


# ---------------------------------------------------------------------------
# classifiers and the gradient-sign attack

@dataclass(frozen=True)
class ClassifierConfig:
    hidden: tuple[int, ...] = (256,)
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0


@dataclass(frozen=True)
class AttackConfig:
    """Perturbation budget and gradient source for the sign attack."""

    epsilon: float
    mode: str = "black-box-substitute"
    substitute_hidden: tuple[int, ...] = (64,)
    substitute_samples: int = 150

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.mode not in ATTACK_MODES:
            raise ValueError(f"mode must be one of {ATTACK_MODES}, got {self.mode!r}")


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def xent_grad(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    p = _softmax(logits.astype(np.float64))
    loss = float(-np.mean(np.log(np.maximum(p[np.arange(n), labels], 1e-300))))
    grad = p
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def train_classifier(x: np.ndarray, labels: np.ndarray, n_classes: int,
                     cfg: ClassifierConfig = ClassifierConfig()) -> Network:
    """Small fully-connected softmax classifier on flat inputs."""
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("classifier needs at least 2 classes")
    if x.shape[0] < n_classes:
        raise ValueError(f"need at least {n_classes} samples, got {x.shape[0]}")
    rng = np.random.default_rng(cfg.seed)
    net = mlp([x.shape[1], *cfg.hidden, n_classes], hidden="relu", final=None, rng=rng)
    params = net.parameters()
    adam = Adam(params, lr=cfg.lr)
    n = x.shape[0]
    for epoch in range(cfg.epochs):
        perm = np.random.default_rng([cfg.seed, 0xC1A5, epoch]).permutation(n)
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            logits = net.forward(x[idx])
            _, glogits = xent_grad(logits, labels[idx])
            grads, _ = net.backward(glogits)
            adam.step(params, grads)
    return net


def classify(net: Network, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    preds = []
    for s in range(0, x.shape[0], batch_size):
        preds.append(np.argmax(net.forward(x[s:s + batch_size]), axis=1))
    return np.concatenate(preds)


def classifier_accuracy(net: Network, x: np.ndarray, labels: np.ndarray) -> float:
    return accuracy(classify(net, x), labels)


def train_substitute(x: np.ndarray, labels: np.ndarray, n_classes: int,
                     cfg: ClassifierConfig = ClassifierConfig(hidden=(64,))) -> Network:
    """Classifier trained on the small labeled budget that emulates the
    target; used as the gradient source in black-box attacks."""
    return train_classifier(x, labels, n_classes, cfg)


def fgsm_attack(classifier: Network, x: np.ndarray, y_true: np.ndarray, epsilon: float) -> np.ndarray:
    """clip(x + epsilon * sign(d xent / d x), 0, 1).

    The gradient comes from the supplied classifier: pass the target for
    white-box attacks or a substitute for black-box ones.
    """
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    logits = classifier.forward(x)
    _, glogits = xent_grad(logits, np.asarray(y_true))
    _, gx = classifier.backward(glogits, need_param_grads=False)
    return np.clip(x + np.float32(epsilon) * np.sign(gx, dtype=x.dtype), 0.0, 1.0)


# ---------------------------------------------------------------------------
# refinement defense and anomaly scoring

def _codec(model) -> tuple[Network, Network]:
    if isinstance(model, NREModel):
        return model.encoder, model.decoder
    encoder, decoder = model
    return encoder, decoder


def defend_refine(model, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    """Pass inputs through the clean-data-trained encoder-decoder.

    `model` is an NREModel or a plain (encoder, decoder) pair; the plain
    pair is the reconstruct-then-classify baseline defense.
    """
    encoder, decoder = _codec(model)
    out = [decoder.forward(encoder.forward(x[s:s + batch_size]))
           for s in range(0, x.shape[0], batch_size)]
    return np.concatenate(out, axis=0)


def anomaly_score(model, x: np.ndarray) -> np.ndarray:
    """Squared pixel reconstruction error per sample, nonnegative."""
    x_rec = defend_refine(model, x)
    diff = (x_rec - x).astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


@dataclass(frozen=True)
class NoiseConfig:
    noise_sigma: float
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")


def add_noise(x: np.ndarray, cfg: NoiseConfig) -> np.ndarray:
    """Additive Gaussian pixel noise, clipped back to [0, 1]."""
    rng = np.random.default_rng(cfg.seed)
    noisy = x + rng.normal(0.0, cfg.noise_sigma, size=x.shape).astype(x.dtype)
    return np.clip(noisy, 0.0, 1.0)


# ---------------------------------------------------------------------------
# threshold metrics

def _pos_neg(scores: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("both classes must be present")
    return pos, neg


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank statistic (ties get average
    ranks), with label 1 marking the anomalous/positive class."""
    pos, neg = _pos_neg(scores, labels)
    s = np.concatenate([pos, neg])
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    csum = np.cumsum(counts)
    ranks = (csum - (counts - 1) / 2.0)[inverse]
    n_pos, n_neg = pos.size, neg.size
    rank_sum = ranks[:n_pos].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def eer(scores, labels) -> float:
    """Equal error rate: the operating point where the false-positive rate
    meets the false-negative rate.

    Sweeps thresholds over the sorted unique scores (predicting anomaly at
    score >= threshold) and linearly interpolates the two piecewise rates at
    the sign change.
    """
    pos, neg = _pos_neg(scores, labels)
    thresholds = np.unique(np.concatenate([pos, neg]))
    thresholds = np.append(thresholds, np.inf)
    neg_sorted = np.sort(neg)
    pos_sorted = np.sort(pos)
    fpr = (neg.size - np.searchsorted(neg_sorted, thresholds, side="left")) / neg.size
    fnr = np.searchsorted(pos_sorted, thresholds, side="left") / pos.size
    diff = fnr - fpr
    j = int(np.argmax(diff >= 0))
    if diff[j] == 0:
        return float(fpr[j])
    alpha = (fpr[j - 1] - fnr[j - 1]) / ((fnr[j] - fnr[j - 1]) - (fpr[j] - fpr[j - 1]))
    return float(fpr[j - 1] + alpha * (fpr[j] - fpr[j - 1]))


# ---------------------------------------------------------------------------
# reports

@dataclass
class EvalReport:
    """Named metrics for one evaluation task, serializable to JSON."""

    task: str
    metrics: dict[str, float]
    config: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        for name, value in self.metrics.items():
            if not (0.0 <= value <= 1.0):
                raise ValueError(f"metric {name}={value} outside [0, 1]")

    def to_json(self) -> str:
        doc = {"task": self.task, "metrics": self.metrics,
               "config": self.config, "seed": self.seed}
        return json.dumps(doc, sort_keys=True, separators=(",", ":"))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n", encoding="utf-8")


def write_defense_csv(path, rows: list[dict]) -> None:
    """Per-epsilon defense table: epsilon, no_defense, plain_ae_refine,
    nre_refine."""
    cols = ("epsilon", "no_defense", "plain_ae_refine", "nre_refine")
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(repr(float(row[c])) for c in cols) + "\n")


def defense_rows(target: Network, gradient_source: Network,
                 nre_model, ae_pair, x: np.ndarray, y: np.ndarray,
                 epsilons) -> list[dict]:
    """Accuracy of the target classifier on attacked inputs, raw and after
    each refinement defense, for every epsilon."""
    rows = []
    for eps in epsilons:
        x_adv = fgsm_attack(gradient_source, x, y, eps)
        rows.append({
            "epsilon": float(eps),
            "no_defense": classifier_accuracy(target, x_adv, y),
            "plain_ae_refine": classifier_accuracy(target, defend_refine(ae_pair, x_adv), y),
            "nre_refine": classifier_accuracy(target, defend_refine(nre_model, x_adv), y),
        })
    return rows
