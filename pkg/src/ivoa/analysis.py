"""Scoring the introspection model: per-class accuracy, uncertainty sweeps, failure clustering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np
import torch

from .introspection import ABSTAIN, Network, Prediction, _as_input, conv_features, fc_head
from .labelgen import CLASS_INDEX, CLASSES, OutcomeClass

FAILURE_CLASSES = (OutcomeClass.FP, OutcomeClass.FN)


@dataclass(frozen=True)
class EvalRecord:
    """One scored query: ground truth vs prediction (a class or ABSTAIN)."""

    truth: OutcomeClass
    predicted: OutcomeClass | str
    uncertainty: float
    confidence: float
    point: tuple[float, float]
    frame_id: int
    k: int = 0

    def __post_init__(self) -> None:
        if not 0.25 - 1e-9 <= self.confidence <= 1.0 + 1e-9:
            raise ValueError(f"confidence {self.confidence} outside [0.25, 1]")
        if self.uncertainty < 0:
            raise ValueError("uncertainty must be non-negative")

    @property
    def abstained(self) -> bool:
        return self.predicted == ABSTAIN

    @property
    def correct(self) -> bool:
        return self.predicted == self.truth


def record_from_prediction(truth: OutcomeClass, pred: Prediction, point, frame_id: int, k: int = 0,
                           u_max: float = math.inf) -> EvalRecord:
    predicted = pred.label if pred.uncertainty < u_max else ABSTAIN
    return EvalRecord(OutcomeClass(truth), predicted, float(pred.uncertainty), pred.confidence,
                      (float(point[0]), float(point[1])), int(frame_id), int(k))


# ---------------------------------------------------------------- evaluation

@dataclass(frozen=True)
class EvalReport:
    accuracy: dict[str, float | None]
    confusion: np.ndarray
    abstained: dict[str, int]
    n: int

    @property
    def abstention_rate(self) -> float:
        return sum(self.abstained.values()) / self.n

    @property
    def class_mean(self) -> float:
        vals = [a for a in self.accuracy.values() if a is not None]
        return float(np.mean(vals)) if vals else math.nan

    def to_dict(self) -> dict:
        return {"n": self.n,
                "accuracy": {c: ("n/a" if a is None else a) for c, a in self.accuracy.items()},
                "class_mean_accuracy": self.class_mean,
                "confusion": {"rows": "truth", "cols": "predicted", "order": [c.value for c in CLASSES],
                              "matrix": self.confusion.tolist()},
                "abstained": self.abstained, "abstention_rate": self.abstention_rate}


def evaluate(records) -> EvalReport:
    """Per-class accuracy over non-abstained records of each ground-truth class."""
    records = list(records)
    if not records:
        raise ValueError("no records to evaluate")
    cm = np.zeros((4, 4), dtype=np.int64)
    abstained = {c.value: 0 for c in CLASSES}
    for r in records:
        if r.abstained:
            abstained[r.truth.value] += 1
        else:
            cm[CLASS_INDEX[r.truth], CLASS_INDEX[OutcomeClass(r.predicted)]] += 1
    acc = {}
    for i, c in enumerate(CLASSES):
        total = int(cm[i].sum())
        acc[c.value] = float(cm[i, i] / total) if total else None
    return EvalReport(acc, cm, abstained, len(records))


@dataclass(frozen=True)
class SweepRow:
    threshold: float
    retained: float
    retained_per_class: dict[str, float]
    accuracy: float


def uncertainty_sweep(records, thresholds) -> list[SweepRow]:
    """Keep records with uncertainty < threshold; mean per-class accuracy of what is kept.

    Classes with nothing retained drop out of the mean; NaN when nothing at all is retained.
    """
    thresholds = [float(t) for t in thresholds]
    if any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be sorted ascending")
    records = list(records)
    unc = np.array([r.uncertainty for r in records])
    truth = np.array([CLASS_INDEX[r.truth] for r in records], dtype=np.int64)
    scored = np.array([not r.abstained for r in records], dtype=bool)
    correct = np.array([r.correct for r in records], dtype=bool)
    totals = np.bincount(truth, minlength=4)
    rows = []
    for t in thresholds:
        keep = unc < t
        kept = np.bincount(truth[keep], minlength=4)
        per_class = {c.value: (float(kept[i] / totals[i]) if totals[i] else math.nan)
                     for i, c in enumerate(CLASSES)}
        accs = []
        for i in range(4):
            sel = keep & scored & (truth == i)
            if sel.any():
                accs.append(correct[sel].mean())
        rows.append(SweepRow(t, float(keep.mean()) if len(records) else math.nan, per_class,
                             float(np.mean(accs)) if accs else math.nan))
    return rows


def retained_accuracy(rows: list[SweepRow], fraction: float) -> SweepRow:
    """The sweep row whose retained fraction is closest to `fraction` (earliest on ties)."""
    return min(rows, key=lambda r: abs(r.retained - fraction))


# ---------------------------------------------------------------- embeddings

@dataclass(frozen=True)
class Embedding:
    x: np.ndarray
    ref: tuple[int, int]
    predicted: OutcomeClass
    confidence: float


def embed(net: Network, patches) -> np.ndarray:
    """Unit-norm second-fc activations (dropout off) for a stack of patches."""
    patches = np.asarray(patches)
    if patches.ndim == 2:
        patches = patches[None]
    out = []
    for p in patches:
        x = _as_input(p, net.spec, net.dtype)
        with torch.no_grad():
            _, e = fc_head(net, conv_features(net, x), want_embedding=True)
        out.append(e.double().numpy())
    emb = np.concatenate(out) if out else np.zeros((0, net.spec.embedding_dim))
    norms = np.linalg.norm(emb, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate embedding: all second-layer activations are zero")
    return emb / norms[:, None]


def extract_embedding(net: Network, patch, ref=(0, 0), predicted=OutcomeClass.TN, confidence: float = 1.0) -> Embedding:
    return Embedding(embed(net, patch)[0], tuple(ref), OutcomeClass(predicted), float(confidence))


def select_failures(records, fraction: float = 0.5) -> list[int]:
    """Indices of records predicted FP or FN, most confident first, top `fraction` of them.

    Ties in confidence are broken by (frame_id, k) ascending.
    """
    if not 0.0 < fraction <= 1.0:
        raise ValueError("fraction must be in (0, 1]")
    records = list(records)
    idx = [i for i, r in enumerate(records) if not r.abstained and OutcomeClass(r.predicted) in FAILURE_CLASSES]
    if not idx:
        raise ValueError("nothing to cluster: no FP or FN predictions")
    idx.sort(key=lambda i: (-records[i].confidence, records[i].frame_id, records[i].k))
    return idx[:max(1, math.ceil(fraction * len(idx) - 1e-9))]


# ---------------------------------------------------------------- PCA and k-means

@dataclass(frozen=True)
class PCAResult:
    projected: np.ndarray
    components: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray


def pca_reduce(X, target_dim: int | None = None) -> PCAResult:
    """Projection of centred rows onto the top covariance eigenvectors (descending eigenvalue).

    Each component's sign is fixed so its largest-magnitude entry is positive.
    """
    X = np.asarray(X, dtype=np.float64)
    n, d = X.shape
    if n < 2:
        raise ValueError("PCA needs at least two rows")
    if target_dim is None:
        target_dim = min(d, max(2, d // 10))
    target_dim = int(target_dim)
    if not 1 <= target_dim <= d:
        raise ValueError(f"target_dim must be in [1, {d}]")
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (n - 1)
    w, V = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="stable")[:target_dim]
    comps = V[:, order].T
    flip = np.sign(comps[np.arange(target_dim), np.argmax(np.abs(comps), axis=1)])
    comps = comps * np.where(flip == 0, 1.0, flip)[:, None]
    return PCAResult(Xc @ comps.T, comps, mean, np.maximum(w[order], 0.0))


@dataclass(frozen=True)
class KMeansResult:
    assignments: np.ndarray
    centroids: np.ndarray
    objective: float
    history: tuple[float, ...]
    iterations: int


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def kmeans_pp_init(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    d2 = ((X - X[centers[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            rest = np.setdiff1d(np.arange(n), centers)
            nxt = int(rng.choice(rest))
        centers.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return X[centers].copy()


def kmeans(X, k: int = 2, seed: int = 0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from a seeded k-means++ start until the assignment stops changing.

    history holds the objective (sum of squared distances) after every
    centroid update; it never increases.
    """
    X = np.asarray(X, dtype=np.float64)
    n = len(X)
    if k < 1 or n < k:
        raise ValueError(f"k-means needs 1 <= k <= n (k={k}, n={n})")
    rng = np.random.default_rng([int(seed), 0x63A5])
    C = kmeans_pp_init(X, k, rng)
    assign = np.argmin(_sq_dists(X, C), axis=1)
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        for j in range(k):
            members = assign == j
            if members.any():
                C[j] = X[members].mean(axis=0)
        history.append(float(((X - C[assign]) ** 2).sum()))
        new = np.argmin(_sq_dists(X, C), axis=1)
        if np.array_equal(new, assign):
            break
        assign = new
    else:
        history.append(float(((X - C[assign]) ** 2).sum()))
    return KMeansResult(assign, C, history[-1], tuple(history), it)


def purity(assignments, kinds) -> float:
    """Fraction of points whose cluster's majority kind matches their own kind."""
    assignments = np.asarray(assignments)
    kinds = np.asarray(kinds)
    hit = 0
    for c in np.unique(assignments):
        _, counts = np.unique(kinds[assignments == c], return_counts=True)
        hit += int(counts.max())
    return hit / len(kinds)


# ---------------------------------------------------------------- exports

def sweep_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["threshold", "retained", *(f"retained_{c.value}" for c in CLASSES), "accuracy"])
    for r in rows:
        w.writerow([repr(r.threshold), f"{r.retained:.6f}",
                    *(f"{r.retained_per_class[c.value]:.6f}" for c in CLASSES), f"{r.accuracy:.6f}"])
    return buf.getvalue()


def clusters_csv(refs, assignments, viz) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patch", "cluster", "viz_x", "viz_y"])
    for ref, a, (x, y) in zip(refs, assignments, viz):
        w.writerow([ref, int(a), f"{x:.6f}", f"{y:.6f}"])
    return buf.getvalue()
