import csv

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from langseg.errors import ArtifactMismatchError, ConfigError, FormatError, NumericError
from langseg.losses import LossWeights, total_loss
from langseg.model import ModelConfig, forward, init_params, loss_terms
from langseg.synth import generate_dataset, generate_scene
from langseg.tensor import ParamStore, backward
from langseg.text_encoder import default_vocabulary
from langseg.trainer import (AdamState, AugmentConfig, Checkpoint, TrainConfig, adam_step, augment, batch_indices,
                             clip_grad_norm, collate, hflip, scheduled_weights, train)

def test_flip_involution_and_column_oracle():
    s = generate_scene(3, 16, 16)
    twice = hflip(hflip(s))
    assert twice.image.tobytes() == s.image.tobytes() and twice.mask.tobytes() == s.mask.tobytes()
    f = hflip(s)
    w = s.mask.shape[1]
    for j in range(w):
        np.testing.assert_array_equal(f.mask[:, j], s.mask[:, w - 1 - j])
        np.testing.assert_array_equal(f.image[:, :, j], s.image[:, :, w - 1 - j])


def test_augment_identity_when_disabled():
    s = generate_scene(4, 16, 16)
    cfg = AugmentConfig(flip=False, crop=True, jitter=True, crop_fraction=1.0, jitter_range=(1.0, 1.0))
    for seed in range(5):
        out = augment(s, np.random.default_rng(seed), cfg)
        assert out.image.tobytes() == s.image.tobytes() and out.mask.tobytes() == s.mask.tobytes()
        assert out.prompt == s.prompt


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 1000))
def test_augment_label_safety(seed, scene):
    s = generate_scene(scene, 32, 32)
    out = augment(s, np.random.default_rng(seed))
    assert out.mask.shape == s.mask.shape and out.image.shape == s.image.shape
    assert set(np.unique(out.mask)) <= set(np.unique(s.mask))
    assert out.image.min() >= 0 and out.image.max() <= 1


def test_augment_flip_only_aligns_foreground():
    s = generate_scene(8, 16, 16)
    cfg = AugmentConfig(flip=True, crop=False, jitter=False)
    for seed in range(10):
        out = augment(s, np.random.default_rng(seed), cfg)
        flipped = not np.array_equal(out.mask, s.mask)
        ref = hflip(s) if flipped else s
        np.testing.assert_array_equal(out.mask, ref.mask)
        np.testing.assert_array_equal(out.image, ref.image)


def test_adam_first_step():
    p = ParamStore({"theta": np.array(1.0)})
    state = AdamState.zeros_like(p)
    p.grads["theta"][...] = 1.0
    adam_step(p, state, 1e-4)
    assert p["theta"].data == pytest.approx(0.9999, abs=1e-12)
    assert state.t == 1 and p.grads["theta"] == 0.0


def test_adam_zero_gradients_leave_parameters():
    p = ParamStore({"w": np.arange(4.0)})
    state = AdamState.zeros_like(p)
    adam_step(p, state, 1e-3)
    np.testing.assert_array_equal(p["w"].data, np.arange(4.0))
    assert state.t == 1


def test_adam_nan_gradient_names_parameter():
    p = ParamStore({"a.ok": np.zeros(2), "b.bad": np.zeros(2)})
    p.grads["b.bad"][0] = np.nan
    with pytest.raises(NumericError, match="b.bad"):
        adam_step(p, AdamState.zeros_like(p), 1e-3)


def test_clip_grad_norm():
    p = ParamStore({"a": np.zeros(2), "b": np.zeros(1)})
    p.grads["a"][:] = [3.0, 0.0]
    p.grads["b"][:] = [4.0]
    assert clip_grad_norm(p, 1.0) == 5.0
    np.testing.assert_allclose(np.concatenate([p.grads["a"], p.grads["b"]]), [0.6, 0.0, 0.8])


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 40), st.integers(2, 9), st.integers(0, 50))
def test_batch_indices_cover_each_epoch(n, batch, seed):
    steps = (3 * n) // batch + 1
    flat = np.concatenate([batch_indices(n, batch, s, seed) for s in range(steps)])
    for e in range(len(flat) // n):
        assert sorted(flat[e * n:(e + 1) * n].tolist()) == list(range(n))


def test_config_validation():
    for bad in (dict(steps=0), dict(lr=0.0), dict(batch_size=1), dict(schedule="random")):
        with pytest.raises(ConfigError):
            TrainConfig(**bad).validate()


def test_alternating_phases():
    w = LossWeights()
    assert scheduled_weights(w, "joint", 5) == w
    phases = [scheduled_weights(w, "alternating", s).lambdas for s in range(3)]
    assert phases == [(0.5, 0.0, 0.0, 0.25), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0)]


def _tiny(seed=0, levels=2, features=4, text_dim=6):
    vocab = default_vocabulary()
    cfg = ModelConfig(height=16, width=16, levels=levels, features=features, text_dim=text_dim,
                      vocab_size=len(vocab))
    return vocab, cfg, init_params(cfg, seed)


def test_triplet_phase_leaves_class_head_without_gradient():
    vocab, cfg, p = _tiny()
    data = generate_dataset(4, 1, 16, 16)
    images, ids, masks = collate(data, vocab, cfg.max_len)
    w = scheduled_weights(LossWeights(), "alternating", 1)
    assert w.lambdas == (0.0, 1.0, 0.0, 0.0)
    terms = loss_terms(forward(p, cfg, images, ids), masks, w)
    obj, _ = total_loss(terms, w)
    backward(obj, p)
    for name in ("decoder.head.weight", "decoder.head.bias"):
        assert not p.grads[name].any(), name
    assert p.grads["align.image_proj.weight"].any()


def test_training_is_deterministic_and_logs(tmp_path):
    vocab, cfg, _ = _tiny()
    data = generate_dataset(6, 2, 16, 16)
    tc = TrainConfig(lr=1e-3, batch_size=3, steps=5, seed=3)
    runs = []
    for k in range(2):
        p = init_params(cfg, 0)
        res = train(tc, data, p, cfg, vocab, out_dir=tmp_path / f"r{k}")
        runs.append((p, res))
    for name in runs[0][0].names():
        assert runs[0][0][name].data.tobytes() == runs[1][0][name].data.tobytes()
    log_a = (tmp_path / "r0" / "train_log.csv").read_text()
    assert log_a == (tmp_path / "r1" / "train_log.csv").read_text()

    rows = list(csv.reader(log_a.splitlines()))
    assert rows[0] == ["step", "gen", "triplet", "seg", "multi_scale", "total"]
    w = tc.loss
    for row in rows[1:]:
        step, gen, trip, seg, ms, total = (float(x) for x in row)
        assert abs(total - (w.gen * gen + w.triplet * trip + w.seg * seg + w.multi_scale * ms)) <= 1e-12
    assert (tmp_path / "r0" / "ckpt_5.bin").is_file()


def test_resume_equivalence(tmp_path):
    vocab, cfg, _ = _tiny()
    data = generate_dataset(10, 5, 16, 16)
    tc = TrainConfig(lr=1e-3, batch_size=4, steps=6, seed=11, checkpoint_every=3)

    full = init_params(cfg, 2)
    train(tc, data, full, cfg, vocab, out_dir=tmp_path / "full")

    half = init_params(cfg, 2)
    train(tc, data, half, cfg, vocab, steps=3, out_dir=tmp_path / "a")
    ck = Checkpoint.load(tmp_path / "a" / "ckpt_3.bin", expect_hash=cfg.digest())
    assert ck.step == 3
    train(tc, data, ck.params, cfg, vocab, adam=ck.adam, start_step=ck.step, out_dir=tmp_path / "a")
    for name in full.names():
        assert full[name].data.tobytes() == ck.params[name].data.tobytes(), name
    assert (tmp_path / "a" / "train_log.csv").read_text() == (tmp_path / "full" / "train_log.csv").read_text()


def test_checkpoint_roundtrip_and_errors(tmp_path):
    vocab, cfg, p = _tiny()
    state = AdamState.zeros_like(p)
    state.m["decoder.head.bias"] += 0.5
    state.t = 9
    Checkpoint(p, state, 9, cfg.digest()).save(tmp_path / "c.bin")
    back = Checkpoint.load(tmp_path / "c.bin")
    assert back.step == 9 and back.adam.t == 9 and back.params.names() == p.names()
    for n in p.names():
        assert back.params[n].data.tobytes() == p[n].data.tobytes()
        assert back.adam.m[n].tobytes() == state.m[n].tobytes()
    with pytest.raises(ArtifactMismatchError):
        Checkpoint.load(tmp_path / "c.bin", expect_hash="0" * 16)
    (tmp_path / "junk.bin").write_bytes(b"hello\n")
    with pytest.raises(FormatError):
        Checkpoint.load(tmp_path / "junk.bin")
    with pytest.raises(FileNotFoundError):
        Checkpoint.load(tmp_path / "missing.bin")


def test_training_descent_smoke():
    vocab = default_vocabulary()
    cfg = ModelConfig(vocab_size=len(vocab))
    p = init_params(cfg, 7)
    data = generate_dataset(32, 7)
    res = train(TrainConfig(steps=200, seed=7), data, p, cfg, vocab)
    assert res.log[-1][1].seg < res.log[0][1].seg
