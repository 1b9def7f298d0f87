"""Acceptance gate: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic end-to-end
criterion trains ten full models (5 folds x 2 modes) and dominates the
runtime; everything else finishes in seconds to a couple of minutes.
"""

import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from checks import (NETWORK_EPS, classifier_loss_fn, draw_classifier_case,
                    draw_unet_case, unet_loss_fn, wrap_input)
from oracles import naive_conv2d, naive_matmul, naive_maxpool2, rational_metrics, truncate_pct
from papnet.classifier import CrossvalConfig, TrainConfig, run_crossval
from papnet.cli import main as cli_main
from papnet.data import (ABNORMAL, HERLEV_CLASS_MAP, NORMAL, AugmentConfig, ImageSample,
                         generate_synthetic, ingest_herlev, plan_stratified_kfold)
from papnet.evaluation import ConfusionMatrix2, metrics_from_matrix
from papnet.evaluation import truncate_pct as lib_truncate_pct
from papnet.imaging import BinaryMask, RasterImage
from papnet.optim import finite_difference_check
from papnet.tensor import (conv2d_backward, conv2d_forward, conv_params, dense_backward,
                           dense_forward, dense_params, dropout, maxpool2_backward,
                           maxpool2_forward, relu, relu_backward, sigmoid,
                           sigmoid_backward, upsample2_backward, upsample2_forward)
from papnet.unet import UNetTrainConfig, prepare_target, seg_metrics

GRAD_TOL = 1e-3
ORACLE_TOL = 1e-5
METRIC_TOL = 1e-12


def report(name: str, detail: str):
    print(f"\n[PASS] {name}: {detail}")


# --- criterion 1: gradient integrity ----------------------------------------

def _conv_layer_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(1, 2, 5, 5))
    p = conv_params(2, 3, 3, rng, dtype=np.float64)
    coeff = rng.normal(size=(1, 3, 5, 5))

    def loss():
        p.zero_grads()
        y = conv2d_forward(x, p, 1, 1)
        conv2d_backward(x, p, coeff, 1, 1)
        return float((coeff * y).sum())

    return finite_difference_check(loss, [p], eps=1e-3)


def _dense_layer_check(seed: int) -> float:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3))
    p = dense_params(3, 4, rng, dtype=np.float64)
    coeff = rng.normal(size=(2, 4))

    def loss():
        p.zero_grads()
        y = dense_forward(x, p)
        dense_backward(x, p, coeff)
        return float((coeff * y).sum())

    return finite_difference_check(loss, [p], eps=1e-3)


def _input_grad_check(seed: int, kind: str) -> float:
    rng = np.random.default_rng(seed)
    if kind == "relu":
        x = rng.normal(size=(16,))
        x = x[np.abs(x) > 2e-3]  # keep away from the kink at eps=1e-3
        xw = wrap_input(x.copy())

        def loss():
            xw.zero_grads()
            y = relu(xw.weights)
            xw.weight_grad += relu_backward(xw.weights, 2.0 * y)
            xw.has_grads = True
            return float((y ** 2).sum())
    elif kind == "sigmoid":
        xw = wrap_input(rng.normal(size=(16,)))

        def loss():
            xw.zero_grads()
            y = sigmoid(xw.weights)
            xw.weight_grad += sigmoid_backward(y, np.ones_like(y))
            xw.has_grads = True
            return float(y.sum(dtype=np.float64))
    elif kind == "maxpool":
        # the check is only valid at non-tied inputs: enforce a window gap
        while True:
            x = rng.normal(size=(1, 2, 4, 4))
            win = x.reshape(1, 2, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(1, 2, 2, 2, 4)
            srt = np.sort(win, axis=-1)
            if (srt[..., 3] - srt[..., 2]).min() > 1e-2:
                break
        xw = wrap_input(x)

        def loss():
            xw.zero_grads()
            y, idx = maxpool2_forward(xw.weights)
            xw.weight_grad += maxpool2_backward(idx, 2.0 * y, xw.weights.shape)
            xw.has_grads = True
            return float((y ** 2).sum())
    elif kind == "upsample":
        xw = wrap_input(rng.normal(size=(1, 2, 3, 3)))

        def loss():
            xw.zero_grads()
            y = upsample2_forward(xw.weights)
            xw.weight_grad += upsample2_backward(2.0 * y)
            xw.has_grads = True
            return float((y ** 2).sum())
    else:  # dropout with a frozen mask
        xw = wrap_input(rng.normal(size=(32,)))
        mask_seed = seed + 1

        def loss():
            xw.zero_grads()
            y, mask = dropout(xw.weights, 0.5, np.random.default_rng(mask_seed), True)
            xw.weight_grad += 2.0 * y * mask
            xw.has_grads = True
            return float((y ** 2).sum())

    return finite_difference_check(loss, [xw], eps=1e-3)


def test_criterion_gradient_integrity():
    """Every layer (100 seeds each) and both width-reduced networks (3 seeds,
    subsampled coordinates) pass central finite differences at <= 1e-3."""
    t0 = time.monotonic()
    worst = {"conv": 0.0, "dense": 0.0}
    for seed in range(100):
        worst["conv"] = max(worst["conv"], _conv_layer_check(seed))
        worst["dense"] = max(worst["dense"], _dense_layer_check(seed))
    for kind in ("relu", "sigmoid", "maxpool", "upsample", "dropout"):
        worst[kind] = max(_input_grad_check(seed, kind) for seed in range(100))
    for seed in range(3):
        model, x, target = draw_unet_case(seed=seed)
        loss_fn, params = unet_loss_fn(model, x, target)
        worst[f"unet{seed}"] = finite_difference_check(
            loss_fn, params, eps=NETWORK_EPS, max_coords_per_tensor=8,
            rng=np.random.default_rng(seed))
        cmodel, cx, onehot, drop_seed = draw_classifier_case(seed=seed)
        loss_fn, params = classifier_loss_fn(cmodel, cx, onehot, drop_seed)
        worst[f"classifier{seed}"] = finite_difference_check(
            loss_fn, params, eps=NETWORK_EPS, max_coords_per_tensor=8,
            rng=np.random.default_rng(seed))
    elapsed = time.monotonic() - t0
    overall = max(worst.values())
    assert overall <= GRAD_TOL, worst
    assert elapsed < 120.0, f"gradient suite took {elapsed:.0f}s"
    report("gradient integrity",
           f"max rel err {overall:.2e} (tol {GRAD_TOL}), {elapsed:.0f}s")


# --- criterion 2: oracle equivalence -----------------------------------------

def test_criterion_oracle_equivalence():
    rng = np.random.default_rng(2026)
    worst_conv = worst_pool = worst_mm = 0.0
    for _ in range(100):
        b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        k = int(rng.choice([1, 3]))
        h = int(rng.integers(k, 7)) * 2
        w = int(rng.integers(k, 7)) * 2
        stride, pad = int(rng.choice([1, 2])), int(rng.integers(0, 2))
        x = rng.normal(size=(b, cin, h, w)).astype(np.float32)
        p = conv_params(cin, cout, k, rng)
        worst_conv = max(worst_conv, float(np.abs(
            conv2d_forward(x, p, stride, pad)
            - naive_conv2d(x, p.weights, p.bias, stride, pad)).max()))

        pooled, idx = maxpool2_forward(x)
        o_pool, o_idx = naive_maxpool2(x)
        worst_pool = max(worst_pool, float(np.abs(pooled - o_pool).max()))
        assert np.array_equal(idx.astype(np.int64), o_idx)

        a = rng.normal(size=(int(rng.integers(1, 5)), int(rng.integers(1, 5)))).astype(np.float32)
        bmat = rng.normal(size=(a.shape[1], int(rng.integers(1, 5)))).astype(np.float32)
        pd = dense_params(a.shape[1], bmat.shape[1], rng)
        pd.weights[...] = bmat
        pd.bias[...] = 0
        worst_mm = max(worst_mm, float(np.abs(dense_forward(a, pd) - naive_matmul(a, bmat)).max()))
    assert worst_conv <= ORACLE_TOL and worst_pool <= ORACLE_TOL and worst_mm <= ORACLE_TOL

    worst_metric = 0.0
    for _ in range(1000):
        tp, fn, fp, tn = (int(v) for v in rng.integers(0, 400, size=4))
        if tp + fn + fp + tn == 0:
            tp = 1
        got = metrics_from_matrix(ConfusionMatrix2(tp, fn, fp, tn))
        want = rational_metrics(tp, fn, fp, tn)
        for key in ("accuracy", "precision_weighted", "recall_weighted", "f1_weighted"):
            worst_metric = max(worst_metric, abs(getattr(got, key) - float(want[key])))
    assert worst_metric <= METRIC_TOL
    report("oracle equivalence",
           f"conv {worst_conv:.1e} / pool {worst_pool:.1e} / matmul {worst_mm:.1e} "
           f"(tol {ORACLE_TOL}); metrics {worst_metric:.1e} (tol {METRIC_TOL})")


# --- criterion 3: paper-number fingerprints ----------------------------------

def test_criterion_paper_number_fingerprints():
    raw = ConfusionMatrix2(tp=645, fn=30, fp=144, tn=98)
    seg = ConfusionMatrix2(tp=622, fn=53, fp=123, tn=119)
    assert Fraction(raw.tp + raw.tn, raw.total) == Fraction(743, 917)
    assert truncate_pct(Fraction(743, 917)) == 81.02
    assert truncate_pct(Fraction(741, 917)) == 80.80
    m_raw = metrics_from_matrix(raw)
    m_seg = metrics_from_matrix(seg)
    assert lib_truncate_pct(m_raw.accuracy) == 81.02
    assert lib_truncate_pct(m_seg.accuracy) == 80.80
    assert m_raw.recall_weighted == m_raw.accuracy
    assert m_seg.recall_weighted == m_seg.accuracy
    rng = np.random.default_rng(3)
    for _ in range(1000):
        tp, fn, fp, tn = (int(v) for v in rng.integers(0, 300, size=4))
        if tp + fn + fp + tn == 0:
            tn = 1
        m = metrics_from_matrix(ConfusionMatrix2(tp, fn, fp, tn))
        assert m.recall_weighted == m.accuracy
    report("paper-number fingerprints",
           "accuracies 81.02% / 80.80% reproduced exactly; "
           "weighted recall == accuracy on 1000 random matrices")


# --- criterion 4: fold-plan properties ---------------------------------------

def test_criterion_fold_plan_properties():
    t0 = time.monotonic()
    img = RasterImage(np.zeros((2, 2, 3), dtype=np.uint8))
    samples = [ImageSample(f"n{i}", img, NORMAL, "normal_columnar") for i in range(242)]
    samples += [ImageSample(f"a{i}", img, ABNORMAL, "carcinoma_in_situ") for i in range(675)]
    plan = plan_stratified_kfold(samples, k=5, seed=7)
    plan_again = plan_stratified_kfold(list(reversed(samples)), k=5, seed=7)
    assert plan.assignment == plan_again.assignment

    union = set()
    normal_counts, abnormal_counts = [], []
    for fold in range(5):
        ids = plan.test_ids(fold)
        assert not (union & ids)
        union |= ids
        normal_counts.append(sum(1 for sid in ids if sid.startswith("n")))
        abnormal_counts.append(sum(1 for sid in ids if sid.startswith("a")))
    assert union == {s.id for s in samples}
    assert sorted(normal_counts) == [48, 48, 48, 49, 49]
    assert abnormal_counts == [135] * 5
    elapsed = time.monotonic() - t0
    assert elapsed < 1.0, f"fold planning took {elapsed:.2f}s"
    report("fold-plan properties",
           f"disjoint cover, Normal {sorted(normal_counts)}, Abnormal 135x5, {elapsed:.2f}s")


# --- criterion 5: synthetic end-to-end ---------------------------------------

ACCEPTANCE_E2E = CrossvalConfig(
    seed=42,
    input_size=128,
    train=TrainConfig(epochs=7, batch_size=16, learning_rate=1e-3, l2_lambda=1e-4),
    aug=AugmentConfig(contrast_range=(1.0, 1.0)),  # geometric-only: flips + rotations
    unet_base_width=4,
    unet_train=UNetTrainConfig(epochs=6, batch_size=8, learning_rate=3e-3,
                               blur_sigma=None, max_train_samples=144),
)


def test_criterion_synthetic_end_to_end():
    t0 = time.monotonic()
    samples = generate_synthetic(400, seed=20260810)
    plan = plan_stratified_kfold(samples, k=5, seed=42)

    raw = run_crossval(samples, plan, "raw", ACCEPTANCE_E2E)
    seg = run_crossval(samples, plan, "segmented", ACCEPTANCE_E2E)

    truth = {s.id: BinaryMask((prepare_target(s.truth_mask, 128)[0, 0] * 255).astype(np.uint8))
             for s in samples}
    dices = [seg_metrics(mask, truth[sid]).dice
             for art in seg.folds for sid, mask in art.val_masks.items()]
    held_out_dice = float(np.mean(dices))
    elapsed = time.monotonic() - t0

    assert ACCEPTANCE_E2E.unet_train.epochs <= 30
    assert held_out_dice >= 0.90, f"held-out dice {held_out_dice:.4f}"
    assert raw.report.pooled_metrics.accuracy >= 0.90, raw.report.pooled_metrics
    assert seg.report.pooled_metrics.accuracy >= 0.90, seg.report.pooled_metrics
    assert elapsed < 1800.0, f"end-to-end took {elapsed:.0f}s"
    report("synthetic end-to-end",
           f"dice {held_out_dice:.3f}, pooled acc raw {raw.report.pooled_metrics.accuracy:.3f} / "
           f"segmented {seg.report.pooled_metrics.accuracy:.3f}, {elapsed:.0f}s")


# --- criterion 6: Herlev soft target (only with the dataset present) ---------

def _herlev_root():
    root = os.environ.get("PAPNET_HERLEV_ROOT") or os.environ.get("PAPNET_DATA_ROOT")
    if root and all((Path(root) / d).is_dir() for d in HERLEV_CLASS_MAP):
        return Path(root)
    return None


@pytest.mark.skipif(_herlev_root() is None,
                    reason="Herlev dataset not present (set PAPNET_HERLEV_ROOT)")
def test_criterion_herlev_soft_target():
    samples, _ = ingest_herlev(_herlev_root())
    plan = plan_stratified_kfold(samples, k=5, seed=42)
    cfg = CrossvalConfig(seed=42)  # library defaults = default config
    raw = run_crossval(samples, plan, "raw", cfg)
    seg = run_crossval(samples, plan, "segmented", cfg)
    raw_acc = raw.report.pooled_metrics.accuracy
    seg_acc = seg.report.pooled_metrics.accuracy
    f1_delta_pp = (seg.report.pooled_metrics.f1_weighted
                   - raw.report.pooled_metrics.f1_weighted) * 100
    assert abs(raw_acc - 0.8102) <= 0.05
    assert abs(seg_acc - 0.8080) <= 0.05
    report("herlev soft target",
           f"raw {raw_acc:.4f}, segmented {seg_acc:.4f}, "
           f"f1 delta {f1_delta_pp:+.2f}pp (reported, not thresholded)")


# --- criterion 7: determinism ------------------------------------------------

def test_criterion_crossval_determinism(tmp_path):
    import json

    data = tmp_path / "data"
    assert cli_main(["synth", "--n", "80", "--seed", "11", "--out", str(data)]) == 0
    outputs = []
    for run in ("first", "second"):
        out = tmp_path / run
        config = {
            "seed": 3, "k": 5, "epochs": 1, "batch_size": 16, "mode": "raw",
            "data_root": str(data), "out_dir": str(out), "input_size": 64,
            "cam_samples": 0,
            "unet": {"base_width": 2, "epochs": 1},
        }
        cfg_path = tmp_path / f"{run}.json"
        cfg_path.write_text(json.dumps(config))
        assert cli_main(["crossval", "--config", str(cfg_path)]) == 0
        outputs.append((out / "raw" / "metrics.csv").read_bytes())
    assert outputs[0] == outputs[1]
    report("determinism", "two identical crossval runs produced byte-identical metrics.csv")
