"""Acceptance suite: one printed PASS/FAIL line per criterion.

Criteria 5-7 train twelve full-size models (4 variants x 3 seeds, 3000
steps each). Trained parameters are cached in the pytest cache directory,
keyed by a hash of the package source and the run configuration, so a rerun
on unchanged code only repeats evaluation. ``pytest --cache-clear`` forces
fresh training.
"""
import hashlib
import json
import time
from dataclasses import asdict, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

import langseg
from langseg import tensor as T
from langseg.ablation import VARIANTS, variant_config
from langseg.config import RunConfig
from langseg.decoder import combine_scales, effective_scale_weights
from langseg.gradcheck import micro_model_checks
from langseg.losses import LossWeights, gen_nll, seg_ce, total_loss, triplet_from_distances
from langseg.metrics import ConfusionMatrix, class_iou_fractions, evaluate, metrics
from langseg.model import ModelConfig, forward, init_params
from langseg.synth import SCENARIOS, generate_dataset, holdout_split, load_dataset, rerender, write_dataset
from langseg.tensor import Tensor
from langseg.text_encoder import default_vocabulary
from langseg.trainer import AdamState, Checkpoint, TrainConfig, train

SEEDS = (7, 8, 9)
BASE = RunConfig()          # 64x64, C=13, K=3, batch 8, lr 1e-4, seed 7, joint, 3000 steps


@pytest.fixture
def say(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
    return emit


# ---------------------------------------------------------------- 1

def test_criterion_1_gradient_soundness(say):
    t0 = time.perf_counter()
    reports = micro_model_checks(seed=0, h=1e-5, tol=1e-4)
    elapsed = time.perf_counter() - t0
    worst = max(r.overall_max for r in reports.values())
    ok = all(r.passed for r in reports.values()) and worst <= 1e-4 and elapsed < 60
    say(1, ok, f"max rel err {worst:.2e} over {', '.join(reports)}; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2

def test_criterion_2_loss_identities(say):
    rng = np.random.default_rng(2)
    same = True
    for _ in range(50):
        probs = T.softmax_channels(Tensor(rng.normal(scale=4, size=(2, 5, 6, 6))))
        gt = rng.integers(0, 5, size=(2, 6, 6))
        same &= gen_nll(probs, gt).item() == seg_ce(probs, gt).item()
    worst = 0.0
    for _ in range(200):
        comps = dict(zip(("gen", "triplet", "seg", "multi_scale"), rng.uniform(0, 10, 4)))
        w = LossWeights(*rng.uniform(0, 3, 4))
        b = total_loss(comps, w)[1]
        exact = sum(Fraction(lam) * Fraction(comps[k]) for lam, k in zip(w.lambdas, comps))
        worst = max(worst, abs(Fraction(b.total) - exact))
    dead = triplet_from_distances(0.2, 0.9, 0.5).item() == 0.0
    equal = triplet_from_distances(0.37, 0.37, 0.5).item() == 0.5
    ok = same and worst <= 1e-12 and dead and equal
    say(2, ok, f"gen==seg exact: {same}; total err {float(worst):.1e}; dead zone {dead}; alpha at equality {equal}")
    assert ok


# ---------------------------------------------------------------- 3

def _brute(pred, gt, c):
    cells = [(i, j) for i in range(gt.shape[0]) for j in range(gt.shape[1])]
    ious = []
    for k in range(c):
        g = {p for p in cells if gt[p] == k}
        if g:
            q = {p for p in cells if pred[p] == k}
            ious.append(Fraction(len(g & q), len(g | q)))
    return sum(ious, Fraction(0)) / len(ious), Fraction(sum(pred[p] == gt[p] for p in cells), len(cells))


def test_criterion_3_metric_oracle(say):
    rng = np.random.default_rng(3)
    matches = 0
    for _ in range(200):
        c = int(rng.integers(1, 5))
        h, w = (int(v) for v in rng.integers(1, 9, size=2))
        gt, pred = rng.integers(0, c, size=(h, w)), rng.integers(0, c, size=(h, w))
        cm = ConfusionMatrix(c).accumulate(pred, gt)
        fr = [f for f in class_iou_fractions(cm) if f is not None]
        miou, pa = _brute(pred, gt, c)
        matches += sum(fr, Fraction(0)) / len(fr) == miou and Fraction(int(np.trace(cm.counts)), cm.total) == pa
    r = metrics(ConfusionMatrix(2).accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]])))
    worked = r.miou == 7 / 12 and r.pixel_accuracy == 0.75
    ok = matches == 200 and worked
    say(3, ok, f"{matches}/200 exact oracle matches; 2x2 example mIoU {r.miou:.4f} PA {r.pixel_accuracy}")
    assert ok


# ---------------------------------------------------------------- 4

def test_criterion_4_normalization(say):
    rng = np.random.default_rng(4)
    vocab = default_vocabulary()
    cfg = ModelConfig(height=16, width=16, levels=3, features=6, text_dim=6, vocab_size=len(vocab))
    worst_pix = 0.0
    for seed in range(10):
        p = init_params(cfg, seed)
        imgs = rng.uniform(size=(2, 3, 16, 16))
        ids = rng.integers(0, len(vocab), size=(2, 8))
        probs = forward(p, cfg, imgs, ids).probs.data
        worst_pix = max(worst_pix, float(np.abs(probs.sum(axis=1) - 1).max()))
    worst_w, convex = 0.0, 0
    for _ in range(100):
        k = int(rng.integers(1, 5))
        logits = rng.normal(scale=3, size=k)
        worst_w = max(worst_w, abs(effective_scale_weights(logits).sum() - 1))
        levels = [Tensor(rng.normal(size=(3, 16 >> i, 16 >> i))) for i in range(k)]
        out = combine_scales(levels, Tensor(logits)).data
        resized = np.stack([T.bilinear_resize(lv, 16, 16).data for lv in levels])
        convex += bool(np.all(out >= resized.min(0) - 1e-12) and np.all(out <= resized.max(0) + 1e-12))
    ok = worst_pix <= 1e-12 and worst_w <= 1e-12 and convex == 100
    say(4, ok, f"pixel sum err {worst_pix:.1e}; weight sum err {worst_w:.1e}; convexity {convex}/100")
    assert ok


# ---------------------------------------------------------------- 5-7 shared training

def _source_digest() -> str:
    h = hashlib.sha256()
    for path in sorted(Path(langseg.__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    h.update(json.dumps(asdict(BASE), sort_keys=True).encode())
    h.update(repr(SEEDS).encode())
    return h.hexdigest()[:16]


@pytest.fixture(scope="session")
def split():
    data = generate_dataset(320, 7)
    return holdout_split(data, 0.2)


@pytest.fixture(scope="session")
def trained(request, split):
    """(variant, seed) -> (ParamStore, ModelConfig, train seconds, cached?)."""
    train_set, test_set = split
    assert len(train_set) == 256 and len(test_set) == 64
    vocab = default_vocabulary()
    cache = request.config.cache.mkdir(f"langseg-acceptance-{_source_digest()}")
    out = {}
    for variant in VARIANTS:
        for seed in SEEDS:
            cfg = replace(variant_config(BASE, variant), seed=seed)
            model = cfg.model_config(len(vocab))
            path = Path(cache) / f"{variant}_{seed}.bin"
            meta = path.with_suffix(".json")
            if path.is_file() and meta.is_file():
                ck = Checkpoint.load(path, expect_hash=model.digest())
                out[variant, seed] = (ck.params, model, json.loads(meta.read_text())["seconds"], True)
                continue
            params = init_params(model, cfg.param_seed)
            t0 = time.perf_counter()
            res = train(cfg.train_config(), train_set, params, model, vocab)
            seconds = time.perf_counter() - t0
            res.checkpoint(model).save(path)
            meta.write_text(json.dumps({"seconds": seconds}))
            out[variant, seed] = (params, model, seconds, False)
    return out


@pytest.fixture(scope="session")
def scores(trained, split):
    """(variant, seed, scenario) -> held-out MetricReport."""
    _, test_set = split
    vocab = default_vocabulary()
    sets = {sc: (test_set if sc == "clean" else rerender(test_set, sc)) for sc in SCENARIOS}
    out = {}
    for (variant, seed), (params, model, _, _) in trained.items():
        for sc, samples in sets.items():
            if variant == "full" or sc in ("clean", "occluded"):
                out[variant, seed, sc] = evaluate(params, model, samples, vocab)
    return out


def _mean(scores, variant, scenario="clean"):
    return float(np.mean([scores[variant, s, scenario].miou for s in SEEDS]))


def test_criterion_5_learnability(say, trained, scores):
    _, _, seconds, cached = trained["full", 7]
    miou = scores["full", 7, "clean"].miou
    ok = miou >= 0.85 and seconds < 30 * 60
    say(5, ok, f"held-out mIoU {miou:.4f} (need >= 0.85) after 3000 steps; train time {seconds / 60:.1f} min"
        + (" (cached)" if cached else ""))
    assert ok


def test_criterion_6_ablation_direction(say, scores):
    m = {v: _mean(scores, v) for v in VARIANTS}
    gaps = {
        "full - no_multi_scale": m["full"] - m["no_multi_scale"],
        "full - no_language_loss": m["full"] - m["no_language_loss"],
        "no_language_loss - no_language_guidance": m["no_language_loss"] - m["no_language_guidance"],
    }
    ok = all(g >= 0.01 for g in gaps.values())
    detail = "; ".join(f"{v} {x:.4f}" for v, x in m.items())
    say(6, ok, detail + " | gaps " + ", ".join(f"{k} {g:+.4f}" for k, g in gaps.items()))
    assert ok


def test_criterion_7_scenario_degradation(say, scores):
    clean = scores["full", 7, "clean"].miou
    others = {sc: scores["full", 7, sc].miou for sc in SCENARIOS if sc != "clean"}
    lower = all(v < clean for v in others.values())
    gap = _mean(scores, "full", "occluded") - _mean(scores, "no_language_guidance", "occluded")
    ok = lower and gap >= 0.01
    say(7, ok, f"clean {clean:.4f}; " + "; ".join(f"{k} {v:.4f}" for k, v in others.items())
        + f" | occluded full - no_language_guidance {gap:+.4f} (3 seeds)")
    assert ok


# ---------------------------------------------------------------- 8

def test_criterion_8_determinism_and_resume(say, tmp_path):
    vocab = default_vocabulary()
    model = ModelConfig(vocab_size=len(vocab))
    data = generate_dataset(24, 8)
    tc = TrainConfig(steps=12, checkpoint_every=6, seed=7)
    for run in ("a", "b"):
        train(tc, data, init_params(model, 7), model, vocab, out_dir=tmp_path / run)
    train(tc, data, init_params(model, 7), model, vocab, steps=6, out_dir=tmp_path / "r")
    ck = Checkpoint.load(tmp_path / "r" / "ckpt_6.bin", expect_hash=model.digest())
    train(tc, data, ck.params, model, vocab, adam=ck.adam, start_step=6, out_dir=tmp_path / "r")

    def files(run):
        return [(tmp_path / run / f).read_bytes() for f in ("train_log.csv", "ckpt_6.bin", "ckpt_12.bin")]

    identical = files("a") == files("b")
    resumed = files("a") == files("r")
    say(8, identical and resumed, f"repeat run bitwise equal: {identical}; midpoint resume bitwise equal: {resumed}")
    assert identical and resumed


# ---------------------------------------------------------------- 9

def test_criterion_9_format_roundtrips(say, tmp_path):
    samples = generate_dataset(16, 9, scenarios=SCENARIOS)
    write_dataset(samples, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    masks = all(a.mask.tobytes() == b.mask.tobytes() for a, b in zip(samples, back)) and len(back) == 16
    img_err = max(float(np.abs(a.image - b.image).max()) for a, b in zip(samples, back))

    vocab = default_vocabulary()
    model = ModelConfig(vocab_size=len(vocab))
    params = init_params(model, 3)
    adam = AdamState.zeros_like(params)
    Checkpoint(params, adam, 0, model.digest()).save(tmp_path / "c.bin")
    loaded = Checkpoint.load(tmp_path / "c.bin", expect_hash=model.digest())
    params_ok = loaded.params.names() == params.names() and all(
        loaded.params[n].data.tobytes() == params[n].data.tobytes() for n in params.names())
    ok = masks and img_err <= 1 / 255 and params_ok
    say(9, ok, f"masks bit-exact: {masks}; max image err {img_err:.2e} (<= {1 / 255:.2e}); "
        f"checkpoint bitwise: {params_ok}")
    assert ok
