"""End-to-end acceptance suite.

Criteria 5, 6, 7 and 9 consume full 2000-iteration training runs that
are cached on disk under .cache/acceptance (see acceptance_runs.py);
with a cold cache this module trains them first, which takes on the
order of two hours on one CPU core.
"""
import json
import time

import numpy as np
import pytest
from scipy.special import softmax as scipy_softmax
from scipy.stats import entropy as scipy_entropy

import acceptance_runs
from oracles import distill_loops, hausdorff_loops

from cmdseg import tensor as T
from cmdseg.distill import (LogitsBatch, distill, distill_class_logits, kd_loss,
                            parse_snapshots, temperature_softmax)
from cmdseg.losses import dice_loss, softmax_probs, weighted_cross_entropy
from cmdseg.metrics import MetricsReport, dice_coefficient, hausdorff_distance
from cmdseg.network import build_network, count_parameters, dilated_mini, unet_mini
from cmdseg.norm import NormSpec, make_scope, norm_forward
from cmdseg.tensor import Tensor
from cmdseg.trainer import load_csv

SEEDS = acceptance_runs.SEEDS


@pytest.fixture(scope="session")
def runs():
    acceptance_runs.ensure_runs()
    return {name: acceptance_runs.run_dir(name)
            for _s, _seed, name in acceptance_runs.RUNS}


def rel_err(a, b):
    denom = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return np.abs(a - b).max() / denom


def check_grad(f, x, tol=1e-4):
    t = Tensor(x, requires_grad=True)
    f(t).backward()
    num = T.finite_diff_grad(f, t)
    assert rel_err(t.grad, num) < tol


# -- criterion 1: gradient fidelity -----------------------------------

def test_criterion_1_gradient_fidelity_all_ops():
    t0 = time.monotonic()
    n_seeds = 20

    for seed in range(n_seeds):
        rng = np.random.default_rng([1, seed])

        # conv2d over all stride/dilation combinations
        for stride in (1, 2):
            for dilation in (1, 2):
                x = rng.standard_normal((1, 2, 6, 6))
                k = Tensor(rng.standard_normal((2, 2, 3, 3)))
                w = rng.standard_normal(
                    T.conv2d(Tensor(x), k, stride=stride, dilation=dilation).shape)
                check_grad(lambda v, k=k, w=w, s=stride, d=dilation:
                           (T.conv2d(v, k, stride=s, dilation=d) * Tensor(w)).sum(), x)

        # all four normalization kinds
        for kind in ("batch", "instance", "layer", "group"):
            spec = NormSpec(kind, 4)
            xn = rng.standard_normal((2, 4, 3, 3))
            wn = rng.standard_normal(xn.shape)

            def f_norm(v, spec=spec, wn=wn):
                return (norm_forward(v, spec, make_scope(spec), mode="train")
                        * Tensor(wn)).sum()

            check_grad(f_norm, xn)

        # resize_concat
        low = rng.standard_normal((1, 2, 3, 3))
        skip = Tensor(rng.standard_normal((1, 2, 6, 6)))
        wc = rng.standard_normal((1, 4, 6, 6))
        check_grad(lambda v: (T.resize_concat(v, skip) * Tensor(wc)).sum(), low)

        # segmentation losses
        logits = rng.standard_normal((1, 3, 4, 4))
        labels = rng.integers(0, 3, size=(1, 4, 4))
        check_grad(lambda v: dice_loss(softmax_probs(v), labels), logits)
        check_grad(lambda v: weighted_cross_entropy(v, labels), logits)

        # temperature softmax
        z = rng.standard_normal(5)
        wz = rng.standard_normal(5)
        check_grad(lambda v: (temperature_softmax(v, 2.0) * Tensor(wz)).sum(), z)

        # distilled class averages
        wd = rng.standard_normal(3)

        def f_distill(v):
            vecs, _ = distill_class_logits(LogitsBatch(v, labels))
            picked = [x for x in vecs if x is not None]
            return (T.stack(picked) * Tensor(np.tile(wd, (len(picked), 1)))).sum()

        check_grad(f_distill, logits)

        # symmetric-KL distillation loss
        other = LogitsBatch(Tensor(rng.standard_normal((1, 3, 4, 4))),
                            rng.integers(0, 3, size=(1, 4, 4)))
        check_grad(lambda v: kd_loss(distill(LogitsBatch(v, labels), 2.0),
                                     distill(other, 2.0)).value, logits)

    assert time.monotonic() - t0 < 120.0


# -- criterion 2: distillation oracle ---------------------------------

def test_criterion_2_distill_matches_nested_loop_oracle():
    rng = np.random.default_rng(2)
    for _ in range(100):
        n = int(rng.integers(1, 5))
        c = int(rng.integers(2, 6))
        h = int(rng.integers(2, 9))
        w = int(rng.integers(2, 9))
        logits = rng.standard_normal((n, c, h, w))
        labels = rng.integers(0, c, size=(n, h, w))
        if rng.random() < 0.5:   # force absent classes regularly
            gone = int(rng.integers(0, c))
            labels[labels == gone] = (gone + 1) % c
        vectors, present = distill_class_logits(LogitsBatch(Tensor(logits), labels))
        want, want_present = distill_loops(logits, labels)
        assert present == list(want_present)
        for v, wv in zip(vectors, want):
            assert (v is None) == (wv is None)
            if v is not None:
                assert np.abs(v.data - wv).max() < 1e-12


# -- criterion 3: KD-loss properties ----------------------------------

def test_criterion_3_kd_properties_and_temperature():
    rng = np.random.default_rng(3)
    for _ in range(25):
        ba = LogitsBatch(Tensor(rng.standard_normal((2, 4, 5, 5))),
                         rng.integers(0, 4, size=(2, 5, 5)))
        bb = LogitsBatch(Tensor(rng.standard_normal((2, 4, 5, 5))),
                         rng.integers(0, 4, size=(2, 5, 5)))
        qa, qb = distill(ba, 2.0), distill(bb, 2.0)
        for q in (qa, qb):
            mat = q.matrix()
            rows = mat[~np.isnan(mat).any(axis=1)]
            assert np.abs(rows.sum(axis=1) - 1.0).max() < 1e-9
        ab = kd_loss(qa, qb).value.item()
        ba_ = kd_loss(qb, qa).value.item()
        assert ab >= 0.0
        assert ab == ba_                       # exact symmetry
        assert kd_loss(qa, qa).value.item() < 1e-12

    for _ in range(100):
        z = rng.standard_normal(6) * 2.0
        p1 = temperature_softmax(Tensor(z), 1.0).data
        assert np.abs(p1 - scipy_softmax(z)).max() < 1e-12
        ents = [scipy_entropy(temperature_softmax(Tensor(z), t).data)
                for t in (1.0, 2.0, 5.0, 9.999)]
        assert all(b >= a - 1e-12 for a, b in zip(ents, ents[1:]))


# -- criterion 4: parameter accounting --------------------------------

@pytest.mark.parametrize("factory", [dilated_mini, unet_mini])
def test_criterion_4_parameter_accounting(factory):
    def total(setting):
        return count_parameters(build_network(factory(3, setting=setting), seed=0))[0]

    joint = total("joint")
    chilopod = total("chilopod")
    individual = total("individual")
    x_shaped = total("x_shaped")

    extra = sum(2 * l.norm.channels for l in factory(3).layers if l.kind == "norm")
    assert chilopod - joint == extra
    assert individual == 2 * joint
    assert x_shaped > chilopod
    # Param Scale ordering: Ours ~ Joint << X-shaped ~ Individual
    assert total("ours") == chilopod
    assert joint < chilopod < x_shaped <= individual


# -- criterion 5: desk-scale trend reproduction -----------------------

def _mean_dice(runs, setting, key):
    vals = []
    for seed in SEEDS:
        summary = json.loads((runs[f"{setting}_seed{seed}"] / "test_metrics.json").read_text())
        if key == "overall":
            vals.append(summary["overall_mean_dice"])
        else:
            vals.append(summary["modality_mean_dice"][key])
    return float(np.mean(vals))


def test_criterion_5_trend_reproduction(runs):
    ours = _mean_dice(runs, "ours", "overall")
    chilopod = _mean_dice(runs, "chilopod", "overall")
    joint = _mean_dice(runs, "joint", "overall")
    joint_kd = _mean_dice(runs, "joint_kd", "overall")
    assert ours >= chilopod >= joint, (ours, chilopod, joint)

    ours_b = _mean_dice(runs, "ours", "B")
    individual_b = _mean_dice(runs, "individual", "B")
    assert ours_b - individual_b >= 2.0, (ours_b, individual_b)

    assert joint_kd >= joint, (joint_kd, joint)

    for name, d in runs.items():
        wall = json.loads((d / "wall_time.json").read_text())["seconds"]
        assert wall <= 600.0, f"{name} took {wall:.0f}s"


# -- criterion 6: KD-curve behavior -----------------------------------

def test_criterion_6_final_kd_lower_with_alpha(runs):
    # chilopod is the alpha=0 counterpart: identical sharing, KD monitored only
    for seed in SEEDS:
        with_kd = float(load_csv(runs[f"ours_seed{seed}"] / "validation.csv")[-1]["kd_val"])
        without = float(load_csv(runs[f"chilopod_seed{seed}"] / "validation.csv")[-1]["kd_val"])
        assert with_kd < without, (seed, with_kd, without)


# -- criterion 7: confusion evolution ---------------------------------

def _mean_abs_diff_by_iter(run_dir):
    records = parse_snapshots((run_dir / "snapshots.txt").read_text())
    by_iter = {}
    for rec in records:
        by_iter.setdefault(rec["iteration"], {})[rec["modality"]] = rec["matrix"]
    curve = {}
    for it, pair in sorted(by_iter.items()):
        diff = np.abs(pair["A"] - pair["B"])
        mutual = ~np.isnan(diff).any(axis=1)
        if mutual.any():
            curve[it] = float(diff[mutual].mean())
    return curve


def test_criterion_7_confusion_difference_returns_to_clean(runs):
    for seed in SEEDS:
        curve = _mean_abs_diff_by_iter(runs[f"ours_seed{seed}"])
        its = sorted(curve)
        final = curve[its[-1]]
        peak = max(curve[i] for i in its[:-1])
        assert final < peak, (seed, final, peak, curve)


# -- criterion 8: metrics oracles -------------------------------------

def test_criterion_8_metric_oracles():
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 200:
        h = int(rng.integers(4, 17))
        w = int(rng.integers(4, 17))
        a = rng.random((h, w)) < rng.uniform(0.2, 0.7)
        b = rng.random((h, w)) < rng.uniform(0.2, 0.7)
        if not a.any() or not b.any():
            continue
        sp = (float(rng.uniform(0.5, 2.0)), float(rng.uniform(0.5, 2.0)))
        assert hausdorff_distance(a, b, sp) == pytest.approx(
            hausdorff_loops(a, b, sp), abs=1e-9)
        checked += 1

    # tagged dice examples
    m = np.zeros((4, 4), bool)
    m[0:2, 0:2] = True
    shifted = np.zeros((4, 4), bool)
    shifted[1:3, 0:2] = True
    disjoint = np.zeros((4, 4), bool)
    disjoint[2:, 2:] = True
    assert dice_coefficient(m, m) == 100.0
    assert dice_coefficient(m, disjoint) == 0.0
    assert dice_coefficient(m, shifted) == 50.0

    # tagged hausdorff examples
    p1 = np.zeros((5, 6), bool)
    p2 = np.zeros((5, 6), bool)
    p1[0, 0] = True
    p2[3, 4] = True
    assert hausdorff_distance(p1, p1) == 0.0
    assert hausdorff_distance(p1, p2) == pytest.approx(5.0)
    sq3 = np.zeros((9, 9), bool)
    sq5 = np.zeros((9, 9), bool)
    sq3[3:6, 3:6] = True
    sq5[2:7, 2:7] = True
    assert hausdorff_distance(sq3, sq5) == pytest.approx(hausdorff_loops(sq3, sq5))

    # overall-mean arithmetic on the published modality means
    rep = MetricsReport()
    rep.add("A", 1, "dice", 91.7)
    rep.add("B", 1, "dice", 86.0)
    assert rep.overall_mean("dice") == pytest.approx(88.85, abs=1e-12)


# -- criterion 9: determinism -----------------------------------------

def test_criterion_9_training_byte_identical(runs):
    first = runs["ours_seed1"]
    rerun = runs["ours_seed1_rerun"]
    for name in ("iterations.csv", "validation.csv", "snapshots.txt",
                 "checkpoint.zip", "config.json"):
        assert (first / name).read_bytes() == (rerun / name).read_bytes(), name
