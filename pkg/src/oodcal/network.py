"""Cosine-head MLP classifier with hand-written backprop.

The network is a plain ReLU MLP whose output layer computes cosine
similarity between the penultimate activation vector and one weight column
per class, so every class score lies in [-1, 1]. Cross-entropy is applied
to the scores multiplied by a fixed temperature (raw cosines would give a
near-uniform softmax). Two regularizers are supported:

* group sparsity: sum over hidden neurons of the L2 norm of the neuron's
  incoming weight vector (hidden layers only), which drives whole units to
  zero and keeps spare capacity for classes added later;
* soft freeze: a quadratic penalty tying every parameter that exists in a
  reference snapshot to its reference value, used when a new class is
  grafted on so that previously learned behavior survives.

All arithmetic is float64 and every random draw goes through one
`numpy.random.Generator` seeded from ``random_state``, so training is
bit-reproducible on a given machine.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _unit_rows(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-normalize, mapping zero rows to zero. Returns (normalized, norms)."""
    norms = np.linalg.norm(m, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    return m / safe[:, None], norms


def _forward_full(params: list[np.ndarray], X: np.ndarray, temperature: float):
    """Forward pass keeping intermediates for backprop.

    params = [W0, b0, W1, b1, ..., head]; hidden weights are (n_in, n_out)
    so a neuron's incoming weight vector is one column.
    """
    acts = [X]
    preacts = []
    a = X
    for i in range(0, len(params) - 1, 2):
        z = a @ params[i] + params[i + 1]
        preacts.append(z)
        a = _relu(z)
        acts.append(a)
    head = params[-1]
    fn, f_norms = _unit_rows(a)
    hn_t, h_norms = _unit_rows(head.T)
    hn = hn_t.T
    scores = fn @ hn
    logits = temperature * scores
    return acts, preacts, fn, f_norms, hn, h_norms, scores, logits


def _loss_and_grads(
    params: list[np.ndarray],
    X: np.ndarray,
    y: np.ndarray,
    temperature: float,
    group_sparsity: float,
    soft_freeze: float,
    ref_params: list[np.ndarray] | None,
) -> tuple[float, list[np.ndarray]]:
    """Total loss (mean CE + penalties) and its gradient w.r.t. every param."""
    n = len(X)
    acts, preacts, fn, f_norms, hn, h_norms, scores, logits = _forward_full(
        params, X, temperature
    )
    head = params[-1]

    # stable log-softmax cross-entropy
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    log_probs = shifted - log_z[:, None]
    loss = -log_probs[np.arange(n), y].mean()

    probs = np.exp(log_probs)
    d_logits = probs
    d_logits[np.arange(n), y] -= 1.0
    d_logits /= n
    d_scores = temperature * d_logits

    # head: scores = fn @ hn with hn_c = w_c / ||w_c||
    d_hn = fn.T @ d_scores
    proj = np.einsum("kc,kc->c", hn, d_hn)
    safe_h = np.where(h_norms > 0, h_norms, 1.0)
    d_head = (d_hn - hn * proj[None, :]) / safe_h[None, :]
    d_head[:, h_norms == 0] = 0.0

    # features: fn_i = f_i / ||f_i||, zero rows stay zero (gradient 0 there)
    d_fn = d_scores @ hn.T
    proj_f = np.einsum("nk,nk->n", fn, d_fn)
    safe_f = np.where(f_norms > 0, f_norms, 1.0)
    d_feat = (d_fn - fn * proj_f[:, None]) / safe_f[:, None]
    d_feat[f_norms == 0] = 0.0

    grads: list[np.ndarray] = [np.empty(0)] * len(params)
    grads[-1] = d_head
    g = d_feat
    for i in range(len(preacts) - 1, -1, -1):
        dz = g * (preacts[i] > 0)
        grads[2 * i] = acts[i].T @ dz
        grads[2 * i + 1] = dz.sum(axis=0)
        if i > 0:
            g = dz @ params[2 * i].T

    if group_sparsity > 0:
        for i in range(0, len(params) - 1, 2):
            w = params[i]
            col_norms = np.linalg.norm(w, axis=0)
            loss += group_sparsity * col_norms.sum()
            safe = np.where(col_norms > 0, col_norms, 1.0)
            grads[i] = grads[i] + group_sparsity * (w / safe[None, :]) * (col_norms > 0)

    if soft_freeze > 0 and ref_params is not None:
        for i, ref in enumerate(ref_params):
            cur = params[i]
            if cur.ndim == 2:
                sl = (slice(0, ref.shape[0]), slice(0, ref.shape[1]))
            else:
                sl = slice(0, ref.shape[0])
            diff = cur[sl] - ref
            loss += soft_freeze * float((diff * diff).sum())
            grads[i][sl] += 2.0 * soft_freeze * diff

    return float(loss), grads


class CosineMLPClassifier(BaseEstimator, ClassifierMixin):
    """ReLU MLP with a cosine-normalized output head.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int
        Widths of the hidden layers; the last entry is the feature dimension
        the head columns live in.
    epochs, batch_size, learning_rate, momentum : SGD schedule.
    group_sparsity : weight of the per-neuron L2-norm penalty on hidden layers.
    soft_freeze : weight of the quadratic pull toward a reference snapshot,
        active only during :meth:`add_class`.
    temperature : factor applied to cosine scores before the softmax. It
        divides out of argmax and of threshold comparisons because score
        statistics are computed on the same scaled scores.
    head_init_std : std of the seeded Gaussian used for (new) head columns.
    """

    def __init__(
        self,
        hidden_layer_sizes: tuple[int, ...] = (400, 128),
        epochs: int = 10,
        batch_size: int = 32,
        learning_rate: float = 1e-2,
        momentum: float = 0.9,
        group_sparsity: float = 1e-4,
        soft_freeze: float = 1e-2,
        temperature: float = 10.0,
        head_init_std: float = 1e-2,
        random_state: int = 0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.group_sparsity = group_sparsity
        self.soft_freeze = soft_freeze
        self.temperature = temperature
        self.head_init_std = head_init_std
        self.random_state = random_state

    def _validate_config(self) -> None:
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.group_sparsity < 0 or self.soft_freeze < 0:
            raise ValueError("regularizer weights must be non-negative")

    def fit(self, X, y):
        """Train from a fresh seeded init on labels 0..C-1."""
        self._validate_config()
        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(np.int64)
        classes = np.unique(y)
        if not np.array_equal(classes, np.arange(len(classes))):
            raise ValueError(f"labels must be contiguous 0..C-1, got {classes}")
        self.n_features_in_ = X.shape[1]
        self.n_classes_ = len(classes)
        self.classes_ = classes
        self._rng = np.random.default_rng(self.random_state)
        self.params_ = self._init_params(X.shape[1], self.n_classes_)
        self._sgd(X, y, ref_params=None)
        return self

    def _init_params(self, d: int, n_classes: int) -> list[np.ndarray]:
        params: list[np.ndarray] = []
        fan_in = d
        for width in self.hidden_layer_sizes:
            w = self._rng.standard_normal((fan_in, width)) * np.sqrt(2.0 / fan_in)
            params.append(w)
            params.append(np.zeros(width))
            fan_in = width
        head = self._rng.standard_normal((fan_in, n_classes)) * self.head_init_std
        params.append(head)
        return params

    def _sgd(self, X, y, ref_params, epochs=None):
        epochs = self.epochs if epochs is None else epochs
        velocity = [np.zeros_like(p) for p in self.params_]
        sf = self.soft_freeze if ref_params is not None else 0.0
        for _ in range(epochs):
            order = self._rng.permutation(len(X))
            for start in range(0, len(X), self.batch_size):
                idx = order[start : start + self.batch_size]
                loss, grads = _loss_and_grads(
                    self.params_,
                    X[idx],
                    y[idx],
                    self.temperature,
                    self.group_sparsity,
                    sf,
                    ref_params,
                )
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite loss {loss}")
                for p, v, g in zip(self.params_, velocity, grads):
                    v *= self.momentum
                    v -= self.learning_rate * g
                    p += v

    def add_class(self, X, label: int):
        """Graft one new class onto the head and fine-tune on its data only.

        ``label`` must equal the current class count. Previous behavior is
        preserved by soft-freezing every pre-existing parameter against a
        snapshot taken before this call; the new head column is free.
        """
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        self._check_dim(X)
        if label != self.n_classes_:
            raise ValueError(
                f"new class must be labeled {self.n_classes_} (current class count), got {label}"
            )
        ref_params = [p.copy() for p in self.params_]
        k = self.params_[-1].shape[0]
        new_col = self._rng.standard_normal((k, 1)) * self.head_init_std
        self.params_[-1] = np.hstack([self.params_[-1], new_col])
        self.n_classes_ += 1
        self.classes_ = np.arange(self.n_classes_)
        y = np.full(len(X), label, dtype=np.int64)
        self._sgd(X, y, ref_params=ref_params)
        return self

    def _check_dim(self, X: np.ndarray) -> None:
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, model expects {self.n_features_in_}"
            )

    def forward(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Penultimate features and per-class cosine scores.

        A zero feature vector yields all-zero scores by convention.
        """
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        self._check_dim(X)
        acts, _, _, _, _, _, scores, _ = _forward_full(self.params_, X, self.temperature)
        return acts[-1], scores

    def transform(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def decision_function(self, X) -> np.ndarray:
        return self.forward(X)[1]

    def predict(self, X) -> np.ndarray:
        return np.argmax(self.decision_function(X), axis=1)


def _param_names(params: list[np.ndarray]) -> list[str]:
    names = []
    for i in range((len(params) - 1) // 2):
        names += [f"W{i}", f"b{i}"]
    names.append("head")
    return names


def gradient_check_detailed(
    clf: CosineMLPClassifier,
    X: np.ndarray,
    y: np.ndarray,
    step: float = 1e-5,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter max relative error between analytic and central
    finite-difference gradients of the full training loss (CE + group
    sparsity + soft freeze).

    The soft-freeze reference is the current parameters plus a small seeded
    offset so that the quadratic term contributes a non-zero gradient.
    Coordinates whose +/-step perturbation flips a ReLU on or off are
    skipped: the loss is not differentiable across the kink, so a central
    difference there measures nothing about the analytic gradient.
    """
    check_is_fitted(clf, "params_")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    rng = np.random.default_rng(seed)
    ref = [p + 0.1 * rng.standard_normal(p.shape) for p in clf.params_]

    def loss_and_pattern(params):
        loss = _loss_and_grads(
            params, X, y, clf.temperature, clf.group_sparsity, clf.soft_freeze, ref
        )[0]
        preacts = _forward_full(params, X, clf.temperature)[1]
        return loss, [z > 0 for z in preacts]

    def same_pattern(a, b):
        return all(np.array_equal(pa, pb) for pa, pb in zip(a, b))

    _, grads = _loss_and_grads(
        clf.params_, X, y, clf.temperature, clf.group_sparsity, clf.soft_freeze, ref
    )
    params = [p.copy() for p in clf.params_]
    errors: dict[str, float] = {}
    for name, p, g in zip(_param_names(params), params, grads):
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        worst = 0.0
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            up, up_pat = loss_and_pattern(params)
            flat[j] = orig - step
            down, down_pat = loss_and_pattern(params)
            flat[j] = orig
            if not same_pattern(up_pat, down_pat):
                continue
            numeric = (up - down) / (2 * step)
            denom = max(abs(numeric), abs(gflat[j]), 1e-5)
            worst = max(worst, abs(numeric - gflat[j]) / denom)
        errors[name] = worst
    return errors


def gradient_check(
    clf: CosineMLPClassifier,
    X: np.ndarray,
    y: np.ndarray,
    step: float = 1e-5,
    seed: int = 0,
) -> float:
    """Max relative error over all parameters; see gradient_check_detailed."""
    return max(gradient_check_detailed(clf, X, y, step=step, seed=seed).values())


def save_checkpoint(clf: CosineMLPClassifier, path: str | Path) -> None:
    """Serialize a fitted model to an .npz checkpoint (lossless float64)."""
    check_is_fitted(clf, "params_")
    meta = {
        "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in clf.get_params().items()},
        "n_features_in": int(clf.n_features_in_),
        "n_classes": int(clf.n_classes_),
        "n_arrays": len(clf.params_),
    }
    arrays = {f"arr_{i}": p for i, p in enumerate(clf.params_)}
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path: str | Path) -> CosineMLPClassifier:
    """Rebuild a fitted model from :func:`save_checkpoint` output.

    The RNG restarts from ``random_state``; only subsequent add_class inits
    would notice.
    """
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        arrays = [data[f"arr_{i}"].astype(np.float64) for i in range(meta["n_arrays"])]
    init = dict(meta["params"])
    init["hidden_layer_sizes"] = tuple(init["hidden_layer_sizes"])
    clf = CosineMLPClassifier(**init)
    clf.params_ = arrays
    clf.n_features_in_ = meta["n_features_in"]
    clf.n_classes_ = meta["n_classes"]
    clf.classes_ = np.arange(clf.n_classes_)
    clf._rng = np.random.default_rng(clf.random_state)
    return clf
