"""Sequence-level language router: TF-IDF features and a multinomial linear classifier."""
from __future__ import annotations

import csv
import io
import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .corpus import LANGS
from .numerics.rng import Rng

CLASSES = LANGS
COMMON = "common"
TRAINERS = ("logreg_batch", "logreg_sgd")
ROUTER_FORMAT = "modmoe-router-1"

_FEATURE_RE = re.compile(r"\w+|[^\w\s]")


class RouterError(ValueError):
    pass


def feature_tokens(text: str) -> list[str]:
    """Lowercased word tokens plus each punctuation/code symbol on its own."""
    return _FEATURE_RE.findall(text.lower())


# ---------------------------------------------------------------------------
# TF-IDF


@dataclass
class TfIdfModel:
    vocabulary: dict[str, int]
    idf: np.ndarray

    @property
    def n_features(self) -> int:
        return len(self.vocabulary)

    def transform(self, texts: Sequence[str]) -> sparse.csr_matrix:
        rows, cols, vals = [], [], []
        for r, text in enumerate(texts):
            tf = Counter(t for t in feature_tokens(text) if t in self.vocabulary)
            if not tf:
                continue
            idx = np.fromiter((self.vocabulary[t] for t in tf), dtype=np.int64, count=len(tf))
            v = np.fromiter(tf.values(), dtype=np.float64, count=len(tf)) * self.idf[idx]
            v /= np.sqrt(v @ v)
            order = np.argsort(idx)
            rows.extend([r] * len(idx))
            cols.extend(idx[order].tolist())
            vals.extend(v[order].tolist())
        return sparse.csr_matrix((vals, (rows, cols)), shape=(len(texts), self.n_features), dtype=np.float64)


def fit_tfidf(texts: Iterable[str], min_df: int = 2) -> TfIdfModel:
    texts = list(texts)
    if not texts:
        raise RouterError("cannot fit TF-IDF on an empty corpus")
    df: Counter[str] = Counter()
    for t in texts:
        df.update(set(feature_tokens(t)))
    terms = sorted(t for t, c in df.items() if c >= min_df)
    n = len(texts)
    idf = np.array([math.log((1 + n) / (1 + df[t])) + 1.0 for t in terms], dtype=np.float64)
    return TfIdfModel({t: i for i, t in enumerate(terms)}, idf)


def vectorize(model: TfIdfModel, text: str) -> sparse.csr_matrix:
    return model.transform([text])


# ---------------------------------------------------------------------------
# classifier


@dataclass
class LinearClassifier:
    weights: np.ndarray      # [n_classes, F]
    bias: np.ndarray         # [n_classes]
    trainer: str
    classes: tuple[str, ...] = CLASSES
    reg_lambda: float = 0.0

    def scores(self, X) -> np.ndarray:
        return np.asarray(X @ self.weights.T) + self.bias

    def proba(self, X) -> np.ndarray:
        return _softmax(self.scores(X))


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def objective(W: np.ndarray, b: np.ndarray, X, y: np.ndarray, reg_lambda: float
              ) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean cross-entropy plus ``reg_lambda/2 * ||W||^2``; returns ``(value, dW, db)``.

    The bias is not penalised.
    """
    n = X.shape[0]
    Z = np.asarray(X @ W.T) + b
    Z = Z - Z.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(Z).sum(axis=1))
    value = float((logsum - Z[np.arange(n), y]).mean() + 0.5 * reg_lambda * np.sum(W * W))
    P = np.exp(Z - logsum[:, None])
    P[np.arange(n), y] -= 1.0
    P /= n
    dW = np.asarray((X.T @ P).T) + reg_lambda * W
    db = P.sum(axis=0)
    return value, dW, db


def _labels(labels: Sequence, classes: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(classes)}
    try:
        return np.array([index[l] if isinstance(l, str) else int(l) for l in labels], dtype=np.int64)
    except KeyError as e:
        raise RouterError(f"unknown class label {e.args[0]!r}") from None


def train_classifier(X, labels: Sequence, trainer: str = "logreg_batch", reg_lambda: float = 1e-4,
                     epochs: int | None = None, seed: int = 0, tol: float = 1e-6,
                     classes: Sequence[str] = CLASSES, lr: float = 0.5) -> LinearClassifier:
    """Fit a multinomial logistic-regression router.

    ``logreg_batch`` runs full-batch gradient descent with backtracking line
    search until the gradient norm or the relative objective decrease drops
    below ``tol`` (default cap 1000 epochs). ``logreg_sgd`` makes one update
    per sample in a seed-shuffled order each epoch (default 5 epochs).
    """
    if trainer not in TRAINERS:
        raise RouterError(f"unknown trainer {trainer!r}; expected one of {TRAINERS}")
    X = sparse.csr_matrix(X, dtype=np.float64)
    y = _labels(labels, classes)
    if X.shape[0] != len(y):
        raise RouterError(f"{X.shape[0]} vectors but {len(y)} labels")
    if len(np.unique(y)) < 2:
        raise RouterError("training data must contain at least two classes")
    k, F = len(classes), X.shape[1]
    if trainer == "logreg_batch":
        W, b = _fit_batch(X, y, k, reg_lambda, epochs or 1000, tol, lr)
    else:
        W, b = _fit_sgd(X, y, k, reg_lambda, epochs or 5, seed, lr)
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise RouterError("classifier training produced non-finite parameters")
    return LinearClassifier(W, b, trainer, tuple(classes), reg_lambda)


def _fit_batch(X, y, k, lam, max_epochs, tol, lr):
    W = np.zeros((k, X.shape[1]))
    b = np.zeros(k)
    f, dW, db = objective(W, b, X, y, lam)
    step = lr
    for _ in range(max_epochs):
        gnorm2 = float(np.sum(dW * dW) + db @ db)
        if math.sqrt(gnorm2) < tol:
            break
        while True:
            W_new, b_new = W - step * dW, b - step * db
            f_new, dW_new, db_new = objective(W_new, b_new, X, y, lam)
            if f_new <= f - 0.5 * step * gnorm2 or step < 1e-12:
                break
            step *= 0.5
        converged = f - f_new < tol * max(1.0, abs(f))
        W, b, f, dW, db = W_new, b_new, f_new, dW_new, db_new
        if converged:
            break
        step *= 2.0
    return W, b


def _fit_sgd(X, y, k, lam, epochs, seed, lr0):
    n, F = X.shape
    V = np.zeros((k, F))     # W = scale * V, so the L2 shrink is O(1) per sample
    scale = 1.0
    b = np.zeros(k)
    rng = Rng(seed).substream("sgd")
    indptr, indices, data = X.indptr, X.indices, X.data
    t = 0
    for _ in range(epochs):
        for i in rng.permutation(n):
            lr = lr0 / (1.0 + lr0 * lam * t)
            lo, hi = indptr[i], indptr[i + 1]
            idx, vals = indices[lo:hi], data[lo:hi]
            z = scale * (V[:, idx] @ vals) + b
            z -= z.max()
            p = np.exp(z)
            p /= p.sum()
            p[y[i]] -= 1.0
            scale *= 1.0 - lr * lam
            if scale < 1e-9:
                V *= scale
                scale = 1.0
            V[:, idx] -= (lr / scale) * np.outer(p, vals)
            b -= lr * p
            t += 1
    return V * scale, b


# ---------------------------------------------------------------------------
# inference and metrics


@dataclass
class Router:
    tfidf: TfIdfModel
    classifier: LinearClassifier

    def predict(self, text: str) -> tuple[str, np.ndarray]:
        return predict(self.classifier, self.tfidf, text)

    def predict_many(self, texts: Sequence[str]) -> tuple[list[str], np.ndarray]:
        P = self.classifier.proba(self.tfidf.transform(texts))
        cls = self.classifier.classes
        return [cls[i] for i in P.argmax(axis=1)], P

    def route(self, text: str, available, common_present: bool = False) -> "RoutingDecision":
        return route(self.classifier, self.tfidf, text, available, common_present)

    def to_dict(self) -> dict:
        c = self.classifier
        return {
            "format": ROUTER_FORMAT,
            "classes": list(c.classes),
            "trainer": c.trainer,
            "reg_lambda": c.reg_lambda,
            "vocabulary": sorted(self.tfidf.vocabulary, key=self.tfidf.vocabulary.get),
            "idf": self.tfidf.idf.tolist(),
            "weights": c.weights.tolist(),
            "bias": c.bias.tolist(),
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n", encoding="utf-8")

    @classmethod
    def from_dict(cls, d: dict) -> "Router":
        if d.get("format") != ROUTER_FORMAT:
            raise RouterError(f"unrecognised router format {d.get('format')!r}")
        vocab = {t: i for i, t in enumerate(d["vocabulary"])}
        idf = np.asarray(d["idf"], dtype=np.float64)
        W = np.asarray(d["weights"], dtype=np.float64).reshape(len(d["classes"]), len(vocab))
        clf = LinearClassifier(W, np.asarray(d["bias"], dtype=np.float64), d["trainer"],
                               tuple(d["classes"]), d.get("reg_lambda", 0.0))
        return cls(TfIdfModel(vocab, idf), clf)

    @classmethod
    def load(cls, path) -> "Router":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def predict(classifier: LinearClassifier, tfidf: TfIdfModel, text: str) -> tuple[str, np.ndarray]:
    p = classifier.proba(vectorize(tfidf, text))[0]
    return classifier.classes[int(np.argmax(p))], p


@dataclass(frozen=True)
class RoutingDecision:
    expert: str              # a class name or "common"
    predicted: str
    probabilities: tuple[float, ...]


def route(classifier: LinearClassifier, tfidf: TfIdfModel, text: str, available,
          common_present: bool = False) -> RoutingDecision:
    pred, p = predict(classifier, tfidf, text)
    return decide(pred, p, available, common_present, classifier.classes)


def decide(pred: str, p: np.ndarray, available, common_present: bool,
           classes: Sequence[str] = CLASSES) -> RoutingDecision:
    """Apply the fallback rule to a prediction."""
    available = set(available)
    unknown = available - set(classes)
    if unknown:
        raise RouterError(f"unknown experts {sorted(unknown)}")
    if not available and not common_present:
        raise RouterError("no experts available for routing")
    probs = tuple(float(x) for x in p)
    if pred in available:
        return RoutingDecision(pred, pred, probs)
    if common_present:
        return RoutingDecision(COMMON, pred, probs)
    best = max((c for c in classes if c in available), key=lambda c: (p[classes.index(c)], -classes.index(c)))
    return RoutingDecision(best, pred, probs)


@dataclass
class RouterMetrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    confusion: np.ndarray    # rows = true class, columns = predicted
    classes: tuple[str, ...] = CLASSES

    @property
    def support(self) -> np.ndarray:
        return self.confusion.sum(axis=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for k in ("accuracy", "precision", "recall", "f1"):
            w.writerow([k, repr(getattr(self, k))])
        return buf.getvalue()

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.classes])
        for c, row in zip(self.classes, self.confusion):
            w.writerow([c, *(int(x) for x in row)])
        return buf.getvalue()


def metrics_from_labels(true: Sequence[str], pred: Sequence[str], classes: Sequence[str] = CLASSES) -> RouterMetrics:
    if not len(true):
        raise RouterError("evaluation set is empty")
    index = {c: i for i, c in enumerate(classes)}
    cm = np.zeros((len(classes), len(classes)), dtype=np.int64)
    for t, p in zip(true, pred):
        cm[index[t], index[p]] += 1
    tp = np.diag(cm).astype(np.float64)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    prec = np.divide(tp, col, out=np.zeros_like(tp), where=col > 0)
    rec = np.divide(tp, row, out=np.zeros_like(tp), where=row > 0)
    f1 = np.divide(2 * prec * rec, prec + rec, out=np.zeros_like(tp), where=(prec + rec) > 0)
    seen = (row > 0) | (col > 0)  # macro averages skip classes absent from both sides
    return RouterMetrics(float(tp.sum() / cm.sum()), float(prec[seen].mean()), float(rec[seen].mean()),
                         float(f1[seen].mean()), cm, tuple(classes))


def evaluate_router(classifier: LinearClassifier, tfidf: TfIdfModel, docs) -> RouterMetrics:
    """Macro-averaged metrics on ``docs`` (objects with ``text`` and ``lang``, or ``(text, lang)`` pairs)."""
    texts, true = _unpack(docs)
    if not texts:
        raise RouterError("evaluation set is empty")
    P = classifier.proba(tfidf.transform(texts))
    pred = [classifier.classes[i] for i in P.argmax(axis=1)]
    return metrics_from_labels(true, pred, classifier.classes)


def _unpack(docs) -> tuple[list[str], list[str]]:
    texts, langs = [], []
    for d in docs:
        t, l = (d.text, d.lang) if hasattr(d, "text") else d
        texts.append(t)
        langs.append(l)
    return texts, langs


def train_router(docs, trainer: str = "logreg_batch", reg_lambda: float = 1e-4, epochs: int | None = None,
                 seed: int = 0) -> Router:
    texts, langs = _unpack(docs)
    tfidf = fit_tfidf(texts)
    clf = train_classifier(tfidf.transform(texts), langs, trainer, reg_lambda, epochs, seed)
    return Router(tfidf, clf)


def router_split(docs, test_fraction: float = 0.3, seed: int = 0) -> tuple[list, list]:
    """Per-class seeded split of labelled documents into router train/test sets."""
    by: dict[str, list] = {c: [] for c in CLASSES}
    for d in docs:
        by[d.lang].append(d)
    train, test = [], []
    for c in CLASSES:
        g = by[c]
        order = Rng(seed).substream(f"router-split/{c}").permutation(len(g))
        n_test = int(round(len(g) * test_fraction))
        test.extend(g[i] for i in order[:n_test])
        train.extend(g[i] for i in order[n_test:])
    return train, test
