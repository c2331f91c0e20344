"""Continual learning protocol: detect novel classes, pick eta, accommodate.

The driver consumes a stream of single-class batches. For each stream element
it first evaluates the current detector (ID accuracy on the test split of all
known classes, OOD accuracy on the novel data), then accommodates the class.
Three threshold policies share the identical trajectory for a given seed;
they differ only in the eta used at each stage:

- "fixed": eta pinned to a constant (default 1).
- "cheating": per-stage linear search against the actual novel data, an
  upper-bound reference that peeks at labels.
- "dynamic": leave-one-class-out estimate before deployment, then a running
  average folding in each stage's search result.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import clone

from .datasets import LabeledDataset
from .network import CosineMLPClassifier
from .openset import OpenSetClassifier
from .reporting import StageReport, evaluate_stage, make_stage_report
from .scoring import OOD_LABEL, InsufficientDataError
from .search import cheat_search

logger = logging.getLogger(__name__)

METHODS = ("fixed", "cheating", "dynamic")


def _derive_seed(*parts: int) -> int:
    # stable across runs / platforms: SeedSequence hashing is pinned by numpy
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


@dataclass
class ProtocolConfig:
    """Knobs shared by every method.

    rho is the flagged fraction at or above which a batch is declared to
    contain OOD data. eta_update selects how the running eta folds in each
    stage's estimate: "pairwise" averages the previous running value with the
    new one, "cumulative" averages all estimates seen so far.
    """

    metric: str = "gmean"
    batch_size: int = 32
    rho: float = 0.5
    model: CosineMLPClassifier | None = None
    seed: int = 0
    eta_update: str = "pairwise"

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must be in (0, 1], got {self.rho}")
        if self.eta_update not in ("pairwise", "cumulative"):
            raise ValueError(f"unknown eta_update {self.eta_update!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EtaRecord:
    stage: int
    eta_estimate: float
    eta_running: float


@dataclass
class BatchVerdict:
    contains_ood: bool
    flagged_fraction: float
    n: int


@dataclass
class ContinualState:
    """Mutable protocol state: the detector plus the eta bookkeeping.

    known_classes holds original class ids in accommodation order; the
    detector itself works in the contiguous internal label space given by
    list position.
    """

    detector: OpenSetClassifier
    known_classes: list[int]
    eta_running: float
    eta_history: list[EtaRecord] = field(default_factory=list)
    eta_estimates: list[float] = field(default_factory=list)

    def internal_label(self, original: int) -> int:
        return self.known_classes.index(original)


def loocv_eta(
    class_data: list[np.ndarray],
    cfg: ProtocolConfig,
) -> tuple[float, list[float]]:
    """Leave-one-class-out estimate of eta before any OOD data is seen.

    Each fold trains a fresh model on C - 1 classes (relabeled to stay
    contiguous) and runs the linear search with the held-out class playing
    the OOD role. Returns the mean over folds and the per-fold values.
    """
    C = len(class_data)
    if C < 3:
        raise ValueError(f"leave-one-class-out needs at least 3 classes, got {C}")
    template = cfg.model if cfg.model is not None else CosineMLPClassifier()
    etas: list[float] = []
    for i in range(C):
        keep = [c for c in range(C) if c != i]
        X = np.concatenate([class_data[c] for c in keep])
        y = np.concatenate(
            [np.full(len(class_data[c]), j, dtype=np.int64) for j, c in enumerate(keep)]
        )
        fold_model = clone(template)
        fold_model.set_params(random_state=_derive_seed(cfg.seed, 1, i))
        fold = OpenSetClassifier(model=fold_model)
        try:
            fold.fit(X, y)
        except InsufficientDataError as exc:
            raise InsufficientDataError(
                f"leave-one-class-out fold holding out class {i}: {exc}"
            ) from exc
        id_table = fold.id_score_table()
        ood_table = fold.score_table(class_data[i], ood=True)
        res = cheat_search(id_table, ood_table, fold.stats_, metric=cfg.metric)
        etas.append(res.eta_star)
        logger.debug("loocv fold %d: eta = %.6f (%s = %.4f)", i, res.eta_star, cfg.metric, res.metric_value)
    return float(np.mean(etas)), etas


def detect_batch(detector: OpenSetClassifier, X_batch, rho: float = 0.5) -> BatchVerdict:
    """Declare a batch OOD-bearing when the flagged fraction reaches rho."""
    preds = detector.predict(X_batch)
    frac = float(np.mean(preds == OOD_LABEL))
    return BatchVerdict(contains_ood=frac >= rho, flagged_fraction=frac, n=len(preds))


def on_detection(state: ContinualState, X_new, original_label: int, cfg: ProtocolConfig) -> float:
    """React to a detected novel class; returns the stage's eta estimate.

    Steps: search eta against the stored ID data and the novel batch, fold it
    into the running value, graft the class onto the network, recompute every
    class's score statistics on the new weights (eta itself is untouched by
    the recompute), and record the update.
    """
    id_table = state.detector.id_score_table()
    ood_table = state.detector.score_table(X_new, ood=True)
    res = cheat_search(id_table, ood_table, state.detector.stats_, metric=cfg.metric)
    eta_new = res.eta_star

    state.eta_estimates.append(eta_new)
    if cfg.eta_update == "pairwise":
        state.eta_running = (state.eta_running + eta_new) / 2.0
    else:
        state.eta_running = float(np.mean([state.eta_history[0].eta_estimate] + state.eta_estimates))

    state.detector.accommodate(X_new)
    state.detector.eta = state.eta_running
    state.known_classes.append(original_label)
    stage = len(state.eta_history)  # record 0 is the pre-deployment estimate
    state.eta_history.append(EtaRecord(stage, eta_new, state.eta_running))
    return eta_new


def _relabel(ds: LabeledDataset, known: list[int]) -> tuple[np.ndarray, np.ndarray]:
    """Map original labels onto contiguous internal ids, dropping the rest."""
    lookup = {c: i for i, c in enumerate(known)}
    mask = np.isin(ds.y, known)
    y = np.array([lookup[int(v)] for v in ds.y[mask]], dtype=np.int64)
    return ds.X[mask], y


def _single_class(ds: LabeledDataset) -> int:
    classes = ds.classes()
    if len(classes) != 1:
        raise ValueError(f"stream element must hold exactly one class, got {classes}")
    return int(classes[0])


def run_protocol(
    id_train: LabeledDataset,
    id_test: LabeledDataset,
    ood_stream: list[LabeledDataset],
    cfg: ProtocolConfig,
    method: str = "dynamic",
    fixed_eta: float = 1.0,
) -> tuple[list[StageReport], ContinualState]:
    """Run one seed of the continual protocol with the given threshold method.

    id_train/id_test carry original labels; the known-class order is the
    sorted unique labels of id_train. Stream elements are single-class
    batches of classes unseen so far. Per stage the detector is evaluated
    first (test split of known classes, novel batch as OOD), then the class
    is accommodated. An empty stream yields a single ID-only report with
    acc_ood left blank.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}, expected one of {METHODS}")
    known = [int(c) for c in id_train.classes()]
    stream_labels = [_single_class(ds) for ds in ood_stream]
    overlap = set(stream_labels) & set(known)
    if overlap:
        raise ValueError(f"stream classes {sorted(overlap)} already in the ID set")
    if len(set(stream_labels)) != len(stream_labels):
        raise ValueError("stream repeats a class")

    template = cfg.model if cfg.model is not None else CosineMLPClassifier()
    model = clone(template)
    model.set_params(random_state=_derive_seed(cfg.seed, 0))
    X0, y0 = _relabel(id_train, known)
    detector = OpenSetClassifier(model=model, eta=fixed_eta).fit(X0, y0)

    if method == "dynamic":
        eta0, fold_etas = loocv_eta([detector.class_data_[c] for c in range(len(known))], cfg)
        logger.info("loocv eta estimate %.6f (folds %s)", eta0, [f"{e:.4f}" for e in fold_etas])
    else:
        eta0 = fixed_eta
    state = ContinualState(
        detector=detector,
        known_classes=known,
        eta_running=eta0,
        eta_history=[EtaRecord(0, eta0, eta0)],
    )
    detector.eta = eta0

    reports: list[StageReport] = []
    if not ood_stream:
        Xte, yte = _relabel(id_test, state.known_classes)
        acc_id, _ = evaluate_stage(detector, Xte, yte, None)
        reports.append(
            make_stage_report(cfg.seed, 0, len(known), method, acc_id, None, eta0)
        )
        return reports, state

    for stage, novel in enumerate(ood_stream):
        label = stream_labels[stage]
        if method == "cheating":
            id_table = detector.id_score_table()
            ood_table = detector.score_table(novel.X, ood=True)
            res = cheat_search(id_table, ood_table, detector.stats_, metric=cfg.metric)
            eta_stage = res.eta_star
        elif method == "fixed":
            eta_stage = fixed_eta
        else:
            eta_stage = state.eta_running
        detector.eta = eta_stage

        Xte, yte = _relabel(id_test, state.known_classes)
        acc_id, acc_ood = evaluate_stage(detector, Xte, yte, novel.X)
        reports.append(
            make_stage_report(
                cfg.seed, stage, len(state.known_classes), method, acc_id, acc_ood, eta_stage
            )
        )

        rng = np.random.default_rng(_derive_seed(cfg.seed, 2, stage))
        take = min(cfg.batch_size, len(novel.X))
        batch = novel.X[rng.permutation(len(novel.X))[:take]]
        verdict = detect_batch(detector, batch, cfg.rho)
        logger.info(
            "stage %d class %d: flagged %.2f of %d (contains_ood=%s)",
            stage, label, verdict.flagged_fraction, verdict.n, verdict.contains_ood,
        )

        # accommodation happens regardless of the verdict so that every
        # method sees the identical model trajectory for a given seed
        if method == "dynamic":
            on_detection(state, novel.X, label, cfg)
        else:
            if method == "cheating":
                state.eta_estimates.append(eta_stage)
            detector.accommodate(novel.X)
            detector.eta = eta_stage
            state.known_classes.append(label)
            state.eta_history.append(EtaRecord(len(state.eta_history), eta_stage, eta_stage))

    return reports, state


def fixed_eta_baseline(
    id_train: LabeledDataset,
    id_test: LabeledDataset,
    ood_stream: list[LabeledDataset],
    cfg: ProtocolConfig,
    eta: float = 1.0,
) -> tuple[list[StageReport], ContinualState]:
    """The one-standard-deviation baseline: run_protocol with eta pinned."""
    return run_protocol(id_train, id_test, ood_stream, cfg, method="fixed", fixed_eta=eta)
