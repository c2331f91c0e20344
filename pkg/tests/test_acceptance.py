"""Acceptance gate: one test per shipped claim, one printed verdict line each.

Run `pytest -s tests/test_acceptance.py` to see the verdict lines; plain
pytest shows them only for failing criteria. Criterion 5 needs the MNIST IDX
files (see README) and reports SKIP when they are absent.
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import stats as scipy_stats
from statsmodels.stats.multitest import multipletests

from oodcal import (
    OOD_LABEL,
    ClassStats,
    CosineMLPClassifier,
    DataConsistencyError,
    DataFormatError,
    DataLengthError,
    LabeledDataset,
    ProtocolConfig,
    SyntheticSpec,
    ThresholdPolicy,
    accuracies_at,
    candidate_etas,
    choose_id_classes,
    fixed_eta_baseline,
    holm_bonferroni,
    id_neg_z_values,
    load_cifar10,
    load_idx_pair,
    make_synthetic,
    neg_z,
    ood_neg_z_values,
    orthogonal_cluster_means,
    run_protocol,
    students_t,
    subset_classes,
    write_cifar10,
    write_idx_pair,
)
from oodcal.cli import IDX_FILES, _find_file, _random_tables, main


def _verdict(n: int, ok: bool, detail: str) -> bool:
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
    return ok


def test_criterion_1_search_matches_dense_grid(capsys):
    # 100 random tables (<= 200 rows, 2-6 classes), both metrics, gap <= 1e-12,
    # via the searchcheck command whose oracle is an independent dense grid
    t0 = time.perf_counter()
    rc = main(["searchcheck", "--n-tables", "100", "--grid-points", "100000"])
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        ok = _verdict(
            1, rc == 0 and elapsed < 10.0,
            f"searchcheck exit {rc}, 100 tables x 2 metrics in {elapsed:.1f}s (< 10s)",
        )
    assert ok


def test_criterion_2_gradient_check(capsys):
    # analytic vs central finite differences, 10 random nets, rel err < 1e-4
    t0 = time.perf_counter()
    rc = main(["gradcheck", "--n-nets", "10", "--threshold", "1e-4"])
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        ok = _verdict(
            2, rc == 0 and elapsed < 30.0,
            f"gradcheck exit {rc}, 10 nets in {elapsed:.1f}s (< 30s)",
        )
    assert ok


def test_criterion_3_synthetic_end_to_end(capsys):
    # 3 ID + 2 streamed OOD Gaussian classes at >= 20 sigma separation.
    # Configuration frozen after calibration: a linear cosine head at high
    # temperature keeps per-class score scales stable enough that the
    # leave-one-class-out estimate lands next to the look-ahead optimum.
    t0 = time.perf_counter()
    n_total, dim, spc, sep, seed = 5, 784, 400, 20.0, 9
    means = orthogonal_cluster_means(n_total, dim, sep / np.sqrt(2), seed=0)
    train, test = make_synthetic(SyntheticSpec(n_total, dim, means, 1.0, spc, seed=0))
    id_classes, ood_order = choose_id_classes(n_total, 3, seed)
    id_train = subset_classes(train, id_classes)
    id_test = subset_classes(test, id_classes + ood_order)
    stream = [subset_classes(train, [c]) for c in ood_order]
    template = CosineMLPClassifier(
        hidden_layer_sizes=(), epochs=100, learning_rate=0.03, temperature=30.0
    )
    cfg = ProtocolConfig(metric="gmean", model=template, seed=seed)
    reports, state = run_protocol(id_train, id_test, stream, cfg, method="dynamic")
    elapsed = time.perf_counter() - t0

    gmeans = [r.gmean for r in reports]
    eta_loocv = state.eta_history[0].eta_estimate
    eta_cheat_first = state.eta_history[1].eta_estimate
    gap = abs(eta_loocv - eta_cheat_first)
    ok_g = len(gmeans) == 2 and all(g >= 0.95 for g in gmeans)
    ok_eta = gap <= 0.5
    with capsys.disabled():
        ok = _verdict(
            3, ok_g and ok_eta and elapsed < 120.0,
            f"stage G-means {[f'{g:.3f}' for g in gmeans]} (>= 0.95), "
            f"|eta_loocv - eta_cheat| = {gap:.3f} (<= 0.5), {elapsed:.1f}s (< 2min)",
        )
    assert ok


def test_criterion_4_baseline_equivalence(capsys):
    # fixed eta = 1 through the full protocol must equal the direct
    # mu_c - sigma_c threshold rule, decision for decision
    t0 = time.perf_counter()
    dim = 16
    means = orthogonal_cluster_means(4, dim, 8 / np.sqrt(2), seed=0)
    train, test = make_synthetic(SyntheticSpec(4, dim, means, 1.0, 50, seed=0))
    template = CosineMLPClassifier(hidden_layer_sizes=(), epochs=30, learning_rate=0.05)
    cfg = ProtocolConfig(metric="gmean", model=template, seed=0)
    _, state = fixed_eta_baseline(
        subset_classes(train, [0, 1, 2]),
        subset_classes(test, [0, 1, 2, 3]),
        [subset_classes(train, [3])],
        cfg,
        eta=1.0,
    )
    det = state.detector

    rng = np.random.default_rng(0)
    X = np.vstack(
        [
            rng.normal(0.0, 6.0, (5000, dim)),
            means[rng.integers(0, 4, 5000)] + rng.normal(0.0, 1.0, (5000, dim)),
        ]
    )
    got = det.predict(X)
    scores = det.model_.decision_function(X)
    c = scores.argmax(axis=1)
    best = scores[np.arange(len(X)), c]
    th = det.stats_.mu - det.stats_.sigma  # eta = 1
    want = np.where(best > th[c], c, OOD_LABEL)
    n_same = int((got == want).sum())
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        ok = _verdict(
            4, n_same == len(X) and det.eta == 1.0,
            f"{n_same}/{len(X)} decisions identical to the direct mu - sigma rule",
        )
    assert ok


def _mnist_root() -> Path | None:
    roots = []
    env = os.environ.get("OODCAL_DATA_DIR")
    if env:
        roots += [Path(env), Path(env) / "mnist"]
    here = Path(__file__).resolve().parent.parent / "data"
    roots += [here, here / "mnist"]
    needed = IDX_FILES["train"] + IDX_FILES["test"]
    for root in roots:
        if all(
            any((root / (name + ext)).is_file() for ext in ("", ".gz")) for name in needed
        ):
            return root
    return None


def _cap_per_class(ds: LabeledDataset, cap: int) -> LabeledDataset:
    keep = np.concatenate(
        [np.flatnonzero(ds.y == c)[:cap] for c in np.unique(ds.y)]
    )
    keep.sort()
    return LabeledDataset(ds.X[keep], ds.y[keep], split=ds.split, source=ds.source)


def test_criterion_5_mnist_directional(capsys):
    # dynamic beats the fixed baseline by >= 3 points of total accuracy on
    # stages with >= 7 ID classes; cheating stays within 5 points above
    root = _mnist_root()
    if root is None:
        with capsys.disabled():
            print(
                "criterion 5: SKIP - MNIST IDX files not found (set OODCAL_DATA_DIR "
                "or place train-images-idx3-ubyte[.gz] etc. under ./data); "
                "this sandbox has no dataset and no way to download one"
            )
        pytest.skip("MNIST data not available in this environment")

    t0 = time.perf_counter()
    roots = [root]
    img, lbl = IDX_FILES["train"]
    train = load_idx_pair(_find_file(roots, img), _find_file(roots, lbl), "train")
    img, lbl = IDX_FILES["test"]
    test = load_idx_pair(_find_file(roots, img), _find_file(roots, lbl), "test")
    train = _cap_per_class(train, 800)  # keeps five seeds inside the budget
    test = _cap_per_class(test, 300)

    template = CosineMLPClassifier(hidden_layer_sizes=(400, 128), epochs=10)
    totals = {m: [] for m in ("fixed", "cheating", "dynamic")}
    for seed in range(5):
        id_classes, ood_order = choose_id_classes(10, 5, seed)
        id_train = subset_classes(train, id_classes)
        id_test = subset_classes(test, id_classes + ood_order)
        stream = [subset_classes(train, [c]) for c in ood_order]
        cfg = ProtocolConfig(metric="gmean", model=template, seed=seed)
        for method in totals:
            reports, _ = run_protocol(id_train, id_test, stream, cfg, method=method)
            totals[method] += [r.total for r in reports if r.n_id_classes >= 7]
    mean = {m: float(np.mean(v)) for m, v in totals.items()}
    elapsed = time.perf_counter() - t0
    gain = mean["dynamic"] - mean["fixed"]
    slack = mean["cheating"] - mean["dynamic"]
    with capsys.disabled():
        ok = _verdict(
            5, gain >= 0.03 and slack >= -0.05 and elapsed < 1800.0,
            f"total acc fixed {mean['fixed']:.3f} / dynamic {mean['dynamic']:.3f} / "
            f"cheating {mean['cheating']:.3f}; dynamic-fixed = {gain:+.3f} (>= +0.03), "
            f"cheating-dynamic = {slack:+.3f} (>= -0.05), {elapsed / 60:.1f}min (< 30min)",
        )
    assert ok


def test_criterion_6_monotonicity_and_decision_equivalence(capsys):
    # accuracies move one way in eta on every table; the threshold rule and
    # the Z'-vs-eta comparison agree input for input
    rng = np.random.default_rng(0)
    mono_ok = True
    for index in range(100):
        id_table, ood_table, stats = _random_tables(rng, index)
        id_z = id_neg_z_values(id_table, stats)
        ood_z = ood_neg_z_values(ood_table, stats)
        if id_z.size == 0:
            continue
        etas = candidate_etas(id_z, ood_z)
        acc_id, acc_ood = accuracies_at(id_z, ood_z, etas)
        mono_ok &= bool(np.all(np.diff(acc_id) >= 0) and np.all(np.diff(acc_ood) <= 0))

    C = 5
    stats = ClassStats(
        mu=rng.uniform(-0.5, 0.8, C), sigma=rng.uniform(0.05, 0.5, C),
        n=np.full(C, 2, dtype=np.int64),
    )
    scores = rng.uniform(-1.0, 1.0, (10_000, C))
    n_checked = n_same = 0
    for eta in (0.7, 1.0, 2.5):
        policy = ThresholdPolicy(eta, stats)
        got = policy.decide_batch(scores)
        c = scores.argmax(axis=1)
        zprime = np.array([neg_z(stats, int(ci), s[ci]) for ci, s in zip(c, scores)])
        want = np.where(zprime < eta, c, OOD_LABEL)
        n_checked += len(scores)
        n_same += int((got == want).sum())
        # scalar path agrees with the batch path
        head = [policy.decide(s) for s in scores[:50]]
        n_same += int((np.array(head) == got[:50]).sum()) - 50
    with capsys.disabled():
        ok = _verdict(
            6, mono_ok and n_same == n_checked,
            f"accuracies monotone on 100 tables; decide == Z'-rule on "
            f"{n_same}/{n_checked} inputs",
        )
    assert ok


def test_criterion_7_statistics_match_references(capsys):
    rng = np.random.default_rng(0)
    worst_t = worst_h = 0.0
    for _ in range(20):
        a = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.integers(2, 25))
        b = rng.normal(rng.uniform(-1, 1), rng.uniform(0.5, 2), rng.integers(2, 25))
        t, p = students_t(a, b)
        ref = scipy_stats.ttest_ind(a, b, equal_var=True)
        worst_t = max(worst_t, abs(t - ref.statistic), abs(p - ref.pvalue))
        pv = rng.uniform(0, 1, rng.integers(1, 10))
        adj = holm_bonferroni(pv)
        _, ref_adj, _, _ = multipletests(pv, method="holm")
        worst_h = max(worst_h, float(np.max(np.abs(adj - ref_adj))))
    hand = holm_bonferroni([0.01, 0.04]).tolist()
    with capsys.disabled():
        ok = _verdict(
            7, worst_t <= 1e-6 and worst_h <= 1e-6 and hand == [0.02, 0.04],
            f"t-test max dev {worst_t:.1e}, holm max dev {worst_h:.1e} (<= 1e-6); "
            f"[0.01, 0.04] -> {hand} exact",
        )
    assert ok


def test_criterion_8_parser_round_trips(tmp_path, capsys):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, (20, 28 * 28), dtype=np.uint8)
    labels = rng.integers(0, 10, 20)
    ds = LabeledDataset(pixels / 255.0, labels)
    img, lbl = tmp_path / "img-idx3-ubyte", tmp_path / "lbl-idx1-ubyte"
    write_idx_pair(ds, img, lbl, rows=28, cols=28)
    back = load_idx_pair(img, lbl)
    idx_ok = np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)

    cpix = rng.integers(0, 256, (15, 3072), dtype=np.uint8)
    cds = LabeledDataset(cpix / 255.0, rng.integers(0, 10, 15))
    batch = tmp_path / "batch.bin"
    write_cifar10(cds, batch)
    cback = load_cifar10([batch])
    cifar_ok = np.array_equal(cback.X, cds.X) and np.array_equal(cback.y, cds.y)

    errors_ok = True
    bad = tmp_path / "bad-idx3-ubyte"
    bad.write_bytes(b"\x00\x00\x08\x01" + b"\x00" * 12)  # wrong magic
    try:
        load_idx_pair(bad, lbl)
        errors_ok = False
    except DataFormatError:
        pass
    trunc = tmp_path / "trunc-idx3-ubyte"
    trunc.write_bytes(img.read_bytes()[:-5])
    try:
        load_idx_pair(trunc, lbl)
        errors_ok = False
    except DataLengthError:
        pass
    short_lbl = tmp_path / "short-idx1-ubyte"
    write_idx_pair(LabeledDataset(pixels[:9] / 255.0, labels[:9]), tmp_path / "t", short_lbl, 28, 28)
    try:
        load_idx_pair(img, short_lbl)
        errors_ok = False
    except DataConsistencyError:
        pass
    try:
        load_cifar10([bad])
        errors_ok = False
    except DataFormatError:
        pass

    with capsys.disabled():
        ok = _verdict(
            8, idx_ok and cifar_ok and errors_ok,
            f"IDX lossless {idx_ok}, CIFAR lossless {cifar_ok}, "
            f"malformed inputs raise typed errors {errors_ok}",
        )
    assert ok
