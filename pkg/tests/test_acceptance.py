"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 6 and 8 train the default configuration twice (roughly 15 minutes on
one core).  Run just this file with ``pytest -v tests/test_acceptance.py``;
the PASS/FAIL lines go straight to the terminal even when output is captured.
"""
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from fusenet.config import load_config
from fusenet.experiment import run_experiment
from fusenet.layers import BatchNorm, Conv2D, Dense, Dropout, GlobalAvgPool, MaxPool2D, ReLU, softmax_cross_entropy, \
    softmax_cross_entropy_backward
from fusenet.metrics import cmc_curve, rank_one_accuracy, recall_at_k
from fusenet.modality import fc_stack_params, parameter_report, table1_spec
from fusenet.synthdata import AugmentConfig, augment_translate, tuple_count
from fusenet.tensor import Parameter, grad_check
from fusenet.train import TrainConfig, learning_rate, read_log_csv

from _helpers import layer_grad_error, micro_fusion
from test_metrics import oracle_rank_one, oracle_recall, random_instance

DEFAULT = os.path.join(os.path.dirname(__file__), "..", "configs", "default.ini")
SEEDS = range(20)
TOL = 1e-4


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\nCRITERION {number}: {'PASS' if ok else 'FAIL'} - {detail}")
        return ok
    return emit


# layer gradient cases, one builder per layer type ------------------------------

def _conv(rng):
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    layer = Conv2D(c_in, c_out, 3, rng=rng)
    layer.bias.value[...] = rng.standard_normal(c_out)
    return layer, rng.standard_normal((2, c_in, int(rng.integers(3, 6)), int(rng.integers(3, 6)))), True


def _pool(rng):
    k = int(rng.integers(2, 4))
    return MaxPool2D(k), rng.standard_normal((2, 2, 2 * k, 3 * k)), True


def _dense(rng):
    layer = Dense(12, int(rng.integers(1, 5)), rng=rng)
    layer.bias.value[...] = rng.standard_normal(layer.out_features)
    return layer, rng.standard_normal((3, 3, 2, 2)), True


def _bn(training):
    def build(rng):
        bn = BatchNorm(3)
        bn.gamma.value[...] = rng.uniform(0.5, 1.5, 3)
        bn.beta.value[...] = rng.standard_normal(3)
        bn.moving_var[...] = rng.uniform(0.5, 2.0, 3)
        return bn, rng.standard_normal((4, 3, 3, 3)), training
    return build


def _relu(rng):
    x = rng.standard_normal((3, 7))
    x[np.abs(x) < 1e-3] = 0.5
    return ReLU(), x, True


def _dropout(rng):
    layer = Dropout(0.6)
    layer.fixed_mask = rng.random((3, 8)) < 0.6
    return layer, rng.standard_normal((3, 8)), True


def _gap(rng):
    return GlobalAvgPool(), rng.standard_normal((2, 3, 4, 5)), True


LAYER_CASES = {"conv": _conv, "maxpool": _pool, "dense": _dense, "batchnorm_train": _bn(True),
               "batchnorm_eval": _bn(False), "relu": _relu, "dropout": _dropout, "gap": _gap}


def _softmax_error(seed):
    rng = np.random.default_rng(seed)
    z = Parameter("logits", rng.standard_normal((4, 5)))
    y = rng.integers(0, 5, 4)

    def analytic():
        _, p = softmax_cross_entropy(z.value, y)
        z.grad[...] = softmax_cross_entropy_backward(p, y)

    return grad_check(lambda: softmax_cross_entropy(z.value, y)[0], [z], 1e-6, analytic)


def test_criterion_1_gradient_correctness(report):
    start = time.perf_counter()
    worst = {}
    for name, build in LAYER_CASES.items():
        worst[name] = max(layer_grad_error(*build(np.random.default_rng(s)), seed=s) for s in SEEDS)
    worst["softmax_ce"] = max(_softmax_error(s) for s in SEEDS)
    errs = []
    for s in SEEDS:
        net, _, _, f, analytic = micro_fusion(s)
        errs.append(grad_check(f, net.params(), eps=1e-5, analytic=analytic))
    worst["multi_abstract_net"] = max(errs)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) < TOL and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(1, ok, f"{len(SEEDS)} seeds each, worst relative error: {detail}; {elapsed:.1f}s (limit 120s)")
    assert ok


def test_criterion_2_shape_fidelity(report):
    face, iris = table1_spec("face"), table1_spec("iris")
    got = {
        "face FC6 input": face.tap_shapes()["FC6"]["input"],
        "iris FC6 input": iris.tap_shapes()["FC6"]["input"],
        "face pool3": dict(face.trace())["pool3"],
        "iris pool3": dict(iris.trace())["pool3"],
        "face FC6 width": face.tap_shapes()["FC6"]["embedding"],
        "iris FC6 width": iris.tap_shapes()["FC6"]["embedding"],
    }
    want = {"face FC6 input": (512, 7, 7), "iris FC6 input": (512, 2, 16), "face pool3": (256, 28, 28),
            "iris pool3": (256, 8, 64), "face FC6 width": (1024,), "iris FC6 width": (1024,)}
    ok = got == want
    report(2, ok, "; ".join(f"{k} {v}" for k, v in got.items()))
    assert ok


def test_criterion_3_parameter_reduction(report):
    rows = {}
    for m in ("face", "iris", "fingerprint"):
        spec = table1_spec(m)
        c, h, w = spec.tap_shapes()["FC6"]["input"]
        fc6 = dict(parameter_report(spec))["FC6"]
        vgg = fc_stack_params(c * h * w, [4096, 4096])
        assert fc6 == c * h * w * 1024 + 1024
        assert vgg == c * h * w * 4096 + 4096 + 4096 * 4096 + 4096
        rows[m] = (fc6, vgg, Fraction(vgg, fc6))
    assert rows["face"][:2] == (25_691_136, 119_545_856)
    ok = all(r > 5 for _, _, r in rows.values())
    detail = "; ".join(f"{m}: FC6 {a:,} vs 4096/4096 {b:,} = {float(r):.4f}x" for m, (a, b, r) in rows.items())
    report(3, ok, detail + " (needs > 5x for every modality)")
    assert ok, "a 7x7x512 FC6 input caps the reduction at 4.65x"


def test_criterion_4_metric_oracles(report):
    rng = np.random.default_rng(2024)
    mismatches, bad_curves = 0, 0
    for _ in range(100):
        scores, labels = random_instance(rng)
        curve = cmc_curve(scores, labels)
        for K in range(1, scores.shape[1] + 1):
            mismatches += recall_at_k(scores, labels, K) != oracle_recall(scores, labels, K)
        mismatches += rank_one_accuracy(scores, labels) != oracle_rank_one(scores, labels)
        bad_curves += not (np.all(np.diff(curve.recall) >= 0) and curve.recall[-1] == 1.0)
    ok = mismatches == 0 and bad_curves == 0
    report(4, ok, f"100 instances: {mismatches} oracle mismatches, {bad_curves} non-monotone or unterminated curves")
    assert ok


def test_criterion_5_protocol_counts(report):
    n = tuple_count(294, 250)
    img = np.random.default_rng(0).random((1, 32, 32))
    cfg = AugmentConfig()
    out = augment_translate(img, cfg, seed=0)
    # sigmas (0, 50) expose the split: the first group comes back unshifted, the second always moves
    probe = augment_translate(img, AugmentConfig(sigmas=(0.0, 50.0)), seed=0)
    unshifted = [bool(np.array_equal(o, img)) for o in probe]
    split = [sum(unshifted), len(probe) - sum(unshifted)]
    ok_order = all(unshifted[:split[0]])
    ok = n == 73_500 and len(out) == 20 and split == [10, 10] and ok_order and tuple(cfg.sigmas) == (2.5, 5.0)
    report(5, ok, f"tuples {n:,}; augmented images {len(out)} split {split} over sigmas {tuple(cfg.sigmas)}")
    assert ok


# default-configuration runs -----------------------------------------------------

@pytest.fixture(scope="module")
def default_runs(tmp_path_factory):
    runs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"default_{name}")
        start = time.perf_counter()
        summary = run_experiment(DEFAULT, str(out))
        runs.append((out, summary, time.perf_counter() - start))
    return runs


def test_criterion_6_fusion_ordering(report, default_runs):
    out, acc, elapsed = default_runs[0]
    mean = {k: v[0] for k, v in acc.items()}
    uni = max(v for k, v in mean.items() if k.startswith("unimodal_"))
    score = max(mean["score_sum"], mean["score_major"])
    checks = {
        "multi_abstract >= weighted": mean["multi_abstract"] >= mean["weighted"],
        "weighted >= max(sum, major)": mean["weighted"] >= score,
        "max(sum, major) >= best unimodal - 0.5": score >= uni - 0.5,
        "multi_abstract >= best unimodal + 2": mean["multi_abstract"] >= uni + 2,
        "runtime < 30 min": elapsed < 1800,
    }
    ok = all(checks.values())
    failed = [k for k, v in checks.items() if not v]
    table = ", ".join(f"{k} {v:.2f}" for k, v in mean.items())
    report(6, ok, f"rank-one % over 5 seeds: {table}; run {elapsed / 60:.1f} min"
           + (f"; failed: {failed}" if failed else ""))
    assert ok, failed


def test_criterion_7_schedule_contracts(report, default_runs):
    out = default_runs[0][0]
    cfg = load_config(DEFAULT)
    problems = []
    for seed in cfg.seeds:
        run = out / f"seed{seed}"
        finals = [read_log_csv(run / f"log_unimodal_{m}.csv")["pretrain_modality"]["final_lr"]
                  for m in cfg.dataset.modalities]
        for kind in cfg.fusion_kinds:
            sums = dict(line.split(" = ") for line in (run / f"trunk_{kind}.txt").read_text().splitlines())
            if sums["before_frozen"] != sums["after_frozen"]:
                problems.append(f"seed {seed} {kind}: trunk changed during the frozen phase")
            joint = read_log_csv(run / f"log_{kind}.csv")["joint"]
            if joint["lr"][0] != min(finals):
                problems.append(f"seed {seed} {kind}: joint lr {joint['lr'][0]} != min final {min(finals)}")
    for phase, tc in cfg.train.items():
        for j in range(6):
            lr = learning_rate(tc, tc.epochs_per_decay * j)
            if abs(lr - tc.lr * 0.1 ** j) >= 1e-12:
                problems.append(f"{phase}: lr at epoch {tc.epochs_per_decay * j} is {lr}")
    ok = not problems
    report(7, ok, "frozen trunks unchanged, joint lr = min modality final lr, decay points exact"
           if ok else "; ".join(problems))
    assert ok


def test_criterion_8_determinism(report, default_runs):
    (a, _, _), (b, _, _) = default_runs
    same = (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    report(8, same, f"two default runs give {'byte-identical' if same else 'different'} metrics CSVs "
           f"({len((a / 'metrics.csv').read_bytes())} bytes)")
    assert same
