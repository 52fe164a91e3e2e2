from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langseg.errors import ContractError, DataError
from langseg.metrics import ConfusionMatrix, class_iou_fractions, evaluate, evaluate_masks, metrics
from langseg.model import ModelConfig, init_params
from langseg.synth import generate_dataset
from langseg.text_encoder import default_vocabulary


def _brute(pred, gt, classes):
    """Set-based oracle over pixel coordinates, exact rationals."""
    coords = [(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1])]
    ious = {}
    for c in range(classes):
        g = {p for p in coords if gt[p] == c}
        if not g:
            continue
        q = {p for p in coords if pred[p] == c}
        ious[c] = Fraction(len(g & q), len(g | q))
    miou = sum(ious.values(), Fraction(0)) / len(ious)
    pa = Fraction(sum(1 for p in coords if pred[p] == gt[p]), len(coords))
    return ious, miou, pa


def test_worked_2x2_example():
    gt = np.array([[0, 0], [1, 1]])
    pred = np.array([[0, 1], [1, 1]])
    cm = ConfusionMatrix(2).accumulate(pred, gt)
    assert cm.counts.tolist() == [[1, 1], [0, 2]]
    assert class_iou_fractions(cm) == [Fraction(1, 2), Fraction(2, 3)]
    r = metrics(cm)
    assert r.miou == float(Fraction(7, 12)) and r.pixel_accuracy == 0.75
    assert round(r.miou, 4) == 0.5833


def test_perfect_and_disjoint():
    gt = np.array([[0, 1, 2], [2, 1, 0]])
    r = metrics(ConfusionMatrix(3).accumulate(gt, gt))
    assert r.miou == 1.0 and r.pixel_accuracy == 1.0
    r = metrics(ConfusionMatrix(2).accumulate(1 - np.array([[0, 1]]), np.array([[0, 1]])))
    assert r.miou == 0.0 and r.class_iou == [0.0, 0.0]


def test_absent_classes_ignored():
    gt = np.array([[0, 0], [2, 2]])
    pred = np.array([[0, 1], [2, 2]])
    r = metrics(ConfusionMatrix(4).accumulate(pred, gt))
    assert r.ignored == [1, 3]
    assert r.class_iou[1] is None and r.class_iou[3] is None
    assert r.miou == pytest.approx((0.5 + 1.0) / 2, abs=1e-15)


def test_errors():
    with pytest.raises(ContractError):
        metrics(ConfusionMatrix(3))
    with pytest.raises(DataError):
        ConfusionMatrix(3).accumulate(np.zeros((2, 2), int), np.zeros((2, 3), int))
    with pytest.raises(DataError, match=r"\(0, 1\)"):
        ConfusionMatrix(3).accumulate(np.array([[0, 3]]), np.array([[0, 0]]))


def test_oracle_equivalence_200_pairs():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        c = int(rng.integers(1, 5))
        h, w = (int(x) for x in rng.integers(1, 9, size=2))
        gt, pred = rng.integers(0, c, size=(h, w)), rng.integers(0, c, size=(h, w))
        fr = class_iou_fractions(ConfusionMatrix(c).accumulate(pred, gt))
        ious, miou, pa = _brute(pred, gt, c)
        assert {k: v for k, v in enumerate(fr) if v is not None} == ious
        present = [f for f in fr if f is not None]
        assert sum(present, Fraction(0)) / len(present) == miou
        r = metrics(ConfusionMatrix(c).accumulate(pred, gt))
        assert r.miou == float(miou) and r.pixel_accuracy == float(pa)


masks = st.integers(1, 4).flatmap(lambda c: st.tuples(
    st.just(c), st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(1, 8)))


def _pair(args):
    c, seed, h, w = args
    rng = np.random.default_rng(seed)
    return c, rng.integers(0, c, size=(h, w)), rng.integers(0, c, size=(h, w))


@settings(max_examples=80, deadline=None)
@given(masks)
def test_bounds_and_permutation_equivariance(args):
    c, pred, gt = _pair(args)
    r = metrics(ConfusionMatrix(c).accumulate(pred, gt))
    assert 0 <= r.miou <= 1 and 0 <= r.pixel_accuracy <= 1
    assert all(v is None or 0 <= v <= 1 for v in r.class_iou)
    perm = np.random.default_rng(args[1] + 1).permutation(c)
    rp = metrics(ConfusionMatrix(c).accumulate(perm[pred], perm[gt]))
    assert rp.miou == pytest.approx(r.miou, abs=1e-15) and rp.pixel_accuracy == r.pixel_accuracy
    for k in range(c):
        assert rp.class_iou[perm[k]] == r.class_iou[k]


@settings(max_examples=50, deadline=None)
@given(masks, st.integers(0, 2**32 - 1))
def test_additivity(args, seed2):
    c, pred, gt = _pair(args)
    _, pred2, gt2 = _pair((c, seed2, 3, 5))
    a = ConfusionMatrix(c).accumulate(pred, gt)
    b = ConfusionMatrix(c).accumulate(pred2, gt2)
    both = ConfusionMatrix(c).accumulate(pred, gt).accumulate(pred2, gt2)
    assert np.array_equal(a.merge(b).counts, both.counts)
    assert a.total + b.total == both.total


def test_argmax_invariance_of_metric():
    rng = np.random.default_rng(3)
    probs = rng.uniform(size=(4, 5, 5))
    gt = rng.integers(0, 4, size=(5, 5))
    # strictly monotone transform of the scores keeps the argmax and thus the metric
    a = metrics(ConfusionMatrix(4).accumulate(probs.argmax(0), gt))
    b = metrics(ConfusionMatrix(4).accumulate((np.exp(3 * probs) + 1).argmax(0), gt))
    assert a.miou == b.miou and a.pixel_accuracy == b.pixel_accuracy


def test_evaluate_per_scenario_and_filter():
    vocab = default_vocabulary()
    cfg = ModelConfig(height=16, width=16, levels=2, features=4, text_dim=4, vocab_size=len(vocab))
    p = init_params(cfg, 0)
    data = generate_dataset(8, 1, 16, 16, scenarios=("clean", "lowres"))
    r = evaluate(p, cfg, data, vocab)
    assert sorted(r.scenarios) == ["clean", "lowres"]
    assert r.pixels == 8 * 256 and sum(s.pixels for s in r.scenarios.values()) == r.pixels
    only = evaluate(p, cfg, data, vocab, scenarios=["lowres"])
    assert only.miou == r.scenarios["lowres"].miou
    with pytest.raises(ContractError):
        evaluate(p, cfg, data, vocab, scenarios=["occluded"])


def test_memorized_sample_scores_one():
    data = generate_dataset(2, 4, 16, 16)
    r = evaluate_masks([s.mask for s in data], data, 13)
    assert r.miou == 1.0 and r.pixel_accuracy == 1.0
