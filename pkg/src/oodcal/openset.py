"""Open-set classifier: cosine-head model plus per-class threshold rule.

``predict`` returns the class id for samples accepted as in-distribution and
-1 for rejections, following the sklearn novelty-detection convention. The
estimator keeps the training data of every class it knows: recomputing score
statistics after the network changes (a new class was grafted on) requires
re-scoring old training points on the updated weights.
"""

from __future__ import annotations

import logging

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, clone
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .network import CosineMLPClassifier
from .scoring import (
    OOD_LABEL,
    ClassStats,
    InsufficientDataError,
    ScoreTable,
    ThresholdPolicy,
    build_score_table,
)

logger = logging.getLogger(__name__)


class OpenSetClassifier(BaseEstimator, ClassifierMixin):
    """Rejecting classifier with per-class thresholds mu_c - eta * sigma_c.

    Parameters
    ----------
    model : CosineMLPClassifier or None
        Template for the underlying network (cloned in fit). None means
        default construction.
    eta : float
        Threshold multiplier; eta = 1 is the fixed one-standard-deviation
        baseline rule. May be reassigned between predictions.
    """

    def __init__(self, model: CosineMLPClassifier | None = None, eta: float = 1.0):
        self.model = model
        self.eta = eta

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        template = self.model if self.model is not None else CosineMLPClassifier()
        self.model_ = clone(template).fit(X, y)
        self.n_classes_ = self.model_.n_classes_
        self.classes_ = np.arange(self.n_classes_)
        self.class_data_ = {c: X[y == c].copy() for c in range(self.n_classes_)}
        self.stats_ = None
        self.recompute_stats()
        return self

    @property
    def policy_(self) -> ThresholdPolicy:
        check_is_fitted(self, "stats_")
        return ThresholdPolicy(self.eta, self.stats_)

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.decision_function(X)

    def predict(self, X) -> np.ndarray:
        """Class id where the argmax score clears its threshold, else -1."""
        return self.policy_.decide_batch(self.decision_function(X))

    def accommodate(self, X_new) -> list[int]:
        """Add one new class (labeled with the next free id), fine-tune with
        the soft-freeze penalty, and recompute all score statistics on the
        updated network. Returns class ids whose statistics fell back to the
        previous values for lack of correctly classified points."""
        check_is_fitted(self, "model_")
        X_new = check_array(X_new, dtype=np.float64)
        label = self.n_classes_
        self.model_.add_class(X_new, label)
        self.n_classes_ = self.model_.n_classes_
        self.classes_ = np.arange(self.n_classes_)
        self.class_data_[label] = X_new.copy()
        return self.recompute_stats()

    def recompute_stats(self) -> list[int]:
        """Refresh mu_c/sigma_c from stored training data.

        Network weights and eta are untouched. A pre-existing class with
        fewer than 2 correctly classified stored points keeps its previous
        statistics (logged); a brand-new class in that situation is an error.
        """
        C = self.n_classes_
        mu, sigma = np.zeros(C), np.zeros(C)
        counts = np.zeros(C, dtype=np.int64)
        old: ClassStats | None = self.stats_
        fallback: list[int] = []
        for c in range(C):
            scores = self.model_.decision_function(self.class_data_[c])
            vals = scores[scores.argmax(axis=1) == c, c]
            if len(vals) >= 2:
                mu[c], sigma[c], counts[c] = vals.mean(), vals.std(ddof=1), len(vals)
            elif old is not None and c < old.n_classes:
                fallback.append(c)
                mu[c], sigma[c], counts[c] = old.mu[c], old.sigma[c], old.n[c]
            else:
                raise InsufficientDataError(
                    f"class {c} has {len(vals)} correctly classified training points"
                )
        if fallback:
            logger.warning(
                "statistics of classes %s kept previous values: fewer than 2 "
                "correctly classified stored points after accommodation",
                fallback,
            )
        self.stats_ = ClassStats(mu, sigma, counts)
        return fallback

    def id_score_table(self) -> ScoreTable:
        """Score table over all stored training data (true labels attached)."""
        check_is_fitted(self, "model_")
        X = np.concatenate([self.class_data_[c] for c in range(self.n_classes_)])
        y = np.concatenate(
            [np.full(len(self.class_data_[c]), c, dtype=np.int64) for c in range(self.n_classes_)]
        )
        return build_score_table(self.model_, X, y)

    def score_table(self, X, y=None, ood: bool = False) -> ScoreTable:
        return build_score_table(self.model_, X, y=y, ood=ood)
