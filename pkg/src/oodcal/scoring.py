"""Per-class similarity-score statistics and the ID/OOD decision rule.

A sample is accepted as in-distribution when its best-scoring class c*
clears that class's threshold mu_c* - eta * sigma_c*, where mu/sigma are
the statistics of similarity scores over *correctly classified* training
points of c*. eta = 1 reproduces the fixed one-standard-deviation baseline
rule. In the scale-free coordinate Z'(x) = (mu - s(x)) / sigma the same
rule reads Z' < eta.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np

OOD_LABEL = -1


class InsufficientDataError(ValueError):
    """A class has fewer than 2 correctly classified rows."""


class DegenerateScaleError(ValueError):
    """sigma is zero where a Z-score is required."""


@dataclass
class ScoreTable:
    """Per-sample score records.

    true_labels uses OOD_LABEL (-1) for rows known to be out-of-distribution;
    argmax breaks ties toward the lowest class index; correct is always False
    for OOD rows.
    """

    true_labels: np.ndarray
    scores: np.ndarray
    argmax: np.ndarray
    correct: np.ndarray

    def __post_init__(self) -> None:
        self.true_labels = np.asarray(self.true_labels, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.argmax = np.asarray(self.argmax, dtype=np.int64)
        self.correct = np.asarray(self.correct, dtype=bool)
        n = len(self.true_labels)
        if self.scores.shape[0] != n or len(self.argmax) != n or len(self.correct) != n:
            raise ValueError("score table fields must share the sample dimension")
        if n and (self.scores.min() < -1.0 - 1e-9 or self.scores.max() > 1.0 + 1e-9):
            raise ValueError("similarity scores must lie in [-1, 1]")
        if n and (self.true_labels.max() >= self.n_classes or self.true_labels.min() < OOD_LABEL):
            raise ValueError(
                f"true labels must lie in [{OOD_LABEL}, {self.n_classes - 1}]"
            )

    def __len__(self) -> int:
        return len(self.true_labels)

    @property
    def n_classes(self) -> int:
        return self.scores.shape[1]

    @classmethod
    def from_scores(cls, scores: np.ndarray, true_labels=None, ood: bool = False) -> "ScoreTable":
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        n = len(scores)
        if ood or true_labels is None:
            true = np.full(n, OOD_LABEL, dtype=np.int64)
        else:
            true = np.asarray(true_labels, dtype=np.int64)
        arg = np.argmax(scores, axis=1) if n else np.empty(0, dtype=np.int64)
        correct = (true == arg) & (true != OOD_LABEL)
        return cls(true, scores, arg, correct)

    def to_csv(self, path: str | Path | None = None) -> str:
        """Serialize as CSV: true_label, argmax, correct, s_0..s_{C-1}."""
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["true_label", "argmax", "correct"] + [f"s_{c}" for c in range(self.n_classes)]
        )
        for i in range(len(self)):
            writer.writerow(
                [int(self.true_labels[i]), int(self.argmax[i]), int(self.correct[i])]
                + [repr(float(v)) for v in self.scores[i]]
            )
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_csv(cls, source: str | Path) -> "ScoreTable":
        # a Path or a newline-free string is a file location; anything else
        # is the CSV text itself
        if isinstance(source, Path) or "\n" not in str(source):
            text = Path(source).read_text()
        else:
            text = str(source)
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        n_classes = len(header) - 3
        true = np.array([int(r[0]) for r in body], dtype=np.int64)
        scores = np.array([[float(v) for v in r[3 : 3 + n_classes]] for r in body])
        if len(body) == 0:
            scores = np.empty((0, n_classes))
        return cls.from_scores(scores, true_labels=true)


def build_score_table(clf, X, y=None, ood: bool = False) -> ScoreTable:
    """Score every sample of X under a fitted cosine-head classifier.

    With ``ood=True`` the rows are marked with OOD_LABEL and can never count
    as correct.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return ScoreTable.from_scores(np.empty((0, clf.n_classes_)), ood=ood)
    scores = clf.decision_function(X)
    return ScoreTable.from_scores(scores, true_labels=None if ood else y, ood=ood)


@dataclass
class ClassStats:
    """Mean/std of similarity scores over correctly classified points, per class."""

    mu: np.ndarray
    sigma: np.ndarray
    n: np.ndarray

    def __post_init__(self) -> None:
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.n = np.asarray(self.n, dtype=np.int64)
        if not (len(self.mu) == len(self.sigma) == len(self.n)):
            raise ValueError("mu, sigma, n must have equal length")
        if len(self.sigma) and self.sigma.min() < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def n_classes(self) -> int:
        return len(self.mu)


def fit_class_stats(table: ScoreTable, n_classes: int | None = None) -> ClassStats:
    """Sample mean and (n-1)-denominator std of s_c(x) over rows with
    true_label == c and correct == True.

    Raises InsufficientDataError if any class has fewer than 2 such rows.
    """
    C = table.n_classes if n_classes is None else n_classes
    mu = np.zeros(C)
    sigma = np.zeros(C)
    counts = np.zeros(C, dtype=np.int64)
    lacking = []
    for c in range(C):
        mask = (table.true_labels == c) & table.correct
        vals = table.scores[mask, c]
        counts[c] = len(vals)
        if len(vals) < 2:
            lacking.append(c)
            continue
        mu[c] = vals.mean()
        sigma[c] = vals.std(ddof=1)
    if lacking:
        raise InsufficientDataError(
            f"classes {lacking} have fewer than 2 correctly classified rows"
        )
    return ClassStats(mu, sigma, counts)


def neg_z(stats: ClassStats, c: int, s) -> float | np.ndarray:
    """Negative Z-score (mu_c - s) / sigma_c of a class-c similarity score."""
    sigma = stats.sigma[c]
    if sigma == 0:
        raise DegenerateScaleError(f"sigma of class {c} is zero")
    return (stats.mu[c] - s) / sigma


@dataclass
class ThresholdPolicy:
    """Scalar eta plus class statistics; threshold(c) = mu_c - eta * sigma_c."""

    eta: float
    stats: ClassStats

    def threshold(self, c: int) -> float:
        return self.stats.mu[c] - self.eta * self.stats.sigma[c]

    def thresholds(self) -> np.ndarray:
        return self.stats.mu - self.eta * self.stats.sigma

    def decide(self, scores: np.ndarray) -> int:
        """ID class id if the argmax score strictly clears its threshold,
        else OOD_LABEL. Equality resolves to OOD."""
        scores = np.asarray(scores, dtype=np.float64)
        c = int(np.argmax(scores))
        return c if scores[c] > self.threshold(c) else OOD_LABEL

    def decide_batch(self, scores: np.ndarray) -> np.ndarray:
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if scores.shape[0] == 0:
            return np.empty(0, dtype=np.int64)
        c = np.argmax(scores, axis=1)
        th = self.thresholds()[c]
        best = scores[np.arange(len(scores)), c]
        return np.where(best > th, c, OOD_LABEL).astype(np.int64)
