import dataclasses
import struct

import numpy as np
import pytest

from dgc.autodiff import Tape
from dgc.config import TrainConfig
from dgc.data import ImageStore, Manifest, PreprocessConfig, Record, SyntheticSpec, generate_synthetic
from dgc.model import DETERMINISTIC, GENERATIVE, EncoderConfig, ModelConfig, forward_baseline, forward_eval, init_model
from dgc.objective import AdamState, batch_weights
from dgc.trainer import (
    MAGIC,
    Checkpoint,
    CheckpointError,
    CheckpointVersionError,
    TrainingError,
    batch_loss,
    checkpoint_bytes,
    evaluate,
    history_csv,
    load_checkpoint,
    parse_checkpoint,
    predict,
    save_checkpoint,
    train,
)


def tiny_cfg(mode=GENERATIVE, **kw):
    model = ModelConfig(
        encoder=EncoderConfig(widths=(4, 8), kernels=(3, 3), strides=(2, 2), image_size=12),
        latent_dim=8,
        n_labels=3,
        mode=mode,
    )
    base = dict(epochs=3, batch_size=8, lr=1e-2, model=model, preprocess=PreprocessConfig(None, None))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def data():
    spec = SyntheticSpec(image_size=12, n_labels=3, prevalence=(0.3,) * 3, frequencies=(2.0, 3.0, 2.5), amplitude=0.2)
    images, m = generate_synthetic(spec, 90)
    return images, m.subset(m.records[:60]), m.subset(m.records[60:])


def test_zero_lr_freezes_parameters(data):
    images, tr, va = data
    cfg = tiny_cfg(lr=0.0, epochs=2)
    result = train(cfg, tr, va, images)
    init = init_model(cfg.model, cfg.init_seed)
    for k in init.params:
        assert np.array_equal(init.params[k], result.final_model.params[k])


@pytest.mark.parametrize("mode", [GENERATIVE, DETERMINISTIC])
def test_identical_runs_give_identical_checkpoints(data, mode):
    images, tr, va = data
    cfg = tiny_cfg(mode)
    a = train(cfg, tr, va, images)
    b = train(cfg, tr, va, images)
    assert checkpoint_bytes(a.best) == checkpoint_bytes(b.best)
    assert [h.train_loss for h in a.history] == [h.train_loss for h in b.history]


def test_best_is_max_over_history(data):
    images, tr, va = data
    result = train(tiny_cfg(epochs=4), tr, va, images)
    assert result.best.metric == max(h.val_mean_auc for h in result.history)
    assert result.history[result.best.epoch].val_mean_auc == result.best.metric


def test_deterministic_mode_ignores_noise_seed(data):
    images, tr, va = data
    a = train(tiny_cfg(DETERMINISTIC, noise_seed=1), tr, va, images)
    b = train(tiny_cfg(DETERMINISTIC, noise_seed=999), tr, va, images)
    assert checkpoint_bytes(dataclasses.replace(a.best, config=b.best.config)) == checkpoint_bytes(b.best)


def test_generative_mode_uses_noise_seed(data):
    images, tr, va = data
    a = train(tiny_cfg(noise_seed=1), tr, va, images)
    b = train(tiny_cfg(noise_seed=2), tr, va, images)
    assert not np.array_equal(a.final_model.params["classifier.weight"], b.final_model.params["classifier.weight"])


def test_tiny_set_loss_strictly_decreases(data):
    images, tr, _ = data
    four = tr.subset(tr.records[:4])
    t = four.targets()
    assert 0 < t.sum() < t.size
    result = train(tiny_cfg(DETERMINISTIC, lr=1e-3, epochs=5, batch_size=4), four, tr, images)
    losses = [h.train_loss for h in result.history]
    assert all(b < a for a, b in zip(losses, losses[1:])), losses


def test_null_model_auc_near_half():
    rng = np.random.default_rng(0)
    cfg = tiny_cfg()
    aucs = []
    for seed in range(20):
        images = {f"{k}.pgm": rng.integers(0, 256, size=(12, 12), dtype=np.uint8) for k in range(80)}
        recs = [Record(p, f"P{k}", tuple(int(v) for v in rng.integers(0, 2, size=3))) for k, p in enumerate(images)]
        m = Manifest(recs, ("a", "b", "c"))
        ckpt = Checkpoint(cfg, init_model(cfg.model, seed), 0, 0.0)
        aucs.append(evaluate(ckpt, m, images).mean_auc)
    assert 0.4 <= np.mean(aucs) <= 0.6


def test_evaluation_is_deterministic_and_order_free(data):
    images, tr, va = data
    ckpt = train(tiny_cfg(epochs=1), tr, va, images).best
    a = evaluate(ckpt, va, images)
    b = evaluate(ckpt, va, images)
    assert a.aucs == b.aucs
    shuffled = va.subset([va.records[i] for i in np.random.default_rng(3).permutation(len(va))])
    assert evaluate(ckpt, shuffled, images).aucs == a.aucs


def test_predict_matches_forward_eval(data):
    images, tr, va = data
    cfg = tiny_cfg()
    model = init_model(cfg.model, 5)
    probs = predict(model, va, ImageStore(images), cfg, batch_size=7)
    x = np.stack([images[r.image_path] for r in va]).astype(np.float64) / 255.0
    x = np.repeat(x[:, None], 3, axis=1)
    mean = np.asarray(cfg.preprocess.mean)[None, :, None, None]
    std = np.asarray(cfg.preprocess.std)[None, :, None, None]
    direct = forward_eval(model, ((x - mean) / std).astype(np.float32)).data
    assert np.array_equal(probs, direct)


def test_eval_noise_is_seeded(data):
    images, tr, va = data
    ckpt = train(tiny_cfg(epochs=1), tr, va, images).best
    a = evaluate(ckpt, va, images, pixel_noise_std=0.2, noise_seed=4)
    b = evaluate(ckpt, va, images, pixel_noise_std=0.2, noise_seed=4)
    c = evaluate(ckpt, va, images)
    assert a.aucs == b.aucs and a.aucs != c.aucs


def test_batch_loss_equals_sum_of_sample_losses():
    cfg = tiny_cfg(DETERMINISTIC)
    model = init_model(cfg.model, 6, dtype=np.float64)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(5, 3, 12, 12))
    y = np.array([[1, 0, 0], [0, 0, 1], [0, 0, 0], [1, 1, 0], [0, 1, 0]])
    total = float(batch_loss(model.copy(), x, y, None, Tape()).data)
    logits = forward_baseline(model.copy(), x, bn_mode="train", logits=True).data
    w_pos, w_neg = batch_weights(y)
    p = 1 / (1 + np.exp(-logits))
    per_sample = [-(w_pos * y[i] * np.log(p[i]) + w_neg * (1 - y[i]) * np.log(1 - p[i])).sum() for i in range(5)]
    assert total == pytest.approx(sum(per_sample), rel=1e-10)


def test_empty_sets_rejected(data):
    images, tr, va = data
    with pytest.raises(TrainingError):
        train(tiny_cfg(), tr.subset([]), va, images)
    with pytest.raises(TrainingError):
        train(tiny_cfg(), tr, va.subset([]), images)


def test_history_csv_columns(data):
    images, tr, va = data
    result = train(tiny_cfg(epochs=2), tr, va, images)
    lines = history_csv(result.history, {"seed": 0}).splitlines()
    assert lines[0] == "# seed=0"
    assert lines[1] == "epoch,train_loss,val_mean_auc,wall_seconds"
    assert len(lines) == 2 + 2


# ---------------------------------------------------------------- checkpoint


@pytest.fixture(scope="module")
def trained(data):
    images, tr, va = data
    return train(tiny_cfg(epochs=2), tr, va, images).best, images, va


def test_round_trip_preserves_outputs(trained, tmp_path):
    ckpt, images, va = trained
    save_checkpoint(ckpt, tmp_path / "a.dgc")
    back = load_checkpoint(tmp_path / "a.dgc")
    assert back.config == ckpt.config and back.epoch == ckpt.epoch and back.metric == ckpt.metric
    x = np.random.default_rng(7).normal(size=(4, 3, 12, 12)).astype(np.float32)
    assert np.array_equal(forward_eval(ckpt.model, x).data, forward_eval(back.model, x).data)
    assert np.array_equal(
        predict(ckpt.model, va, ImageStore(images), ckpt.config), predict(back.model, va, ImageStore(images), back.config)
    )


def test_resave_is_byte_identical(trained, tmp_path):
    ckpt, _, _ = trained
    save_checkpoint(ckpt, tmp_path / "a.dgc")
    save_checkpoint(load_checkpoint(tmp_path / "a.dgc"), tmp_path / "b.dgc")
    assert (tmp_path / "a.dgc").read_bytes() == (tmp_path / "b.dgc").read_bytes()


def test_layout_header(trained):
    raw = checkpoint_bytes(trained[0])
    assert raw[:4] == MAGIC
    assert struct.unpack("<I", raw[4:8])[0] == 1
    meta_len = struct.unpack("<I", raw[8:12])[0]
    meta = raw[12:12 + meta_len].decode()
    assert "config.lr=0.01\n" in meta and "epoch=" in meta


@pytest.mark.parametrize("cut", [0, 3, 10, 40, -1])
def test_truncated_file_is_corrupt(trained, cut):
    raw = checkpoint_bytes(trained[0])
    with pytest.raises(CheckpointError, match="corrupt"):
        parse_checkpoint(raw[:cut])


def test_bad_magic_version_and_trailing_bytes(trained):
    raw = checkpoint_bytes(trained[0])
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointVersionError):
        parse_checkpoint(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        parse_checkpoint(raw + b"\x00")


def test_adam_state_round_trip(trained):
    ckpt = trained[0]
    state = AdamState(lr=ckpt.config.lr, t=7)
    for k, v in ckpt.model.params.items():
        state.m[k] = np.full_like(v, 0.5)
        state.v[k] = np.full_like(v, 0.25)
    with_adam = dataclasses.replace(ckpt, adam=state)
    back = parse_checkpoint(checkpoint_bytes(with_adam))
    assert back.adam.t == 7
    assert all(np.array_equal(back.adam.m[k], state.m[k]) for k in state.m)
    assert checkpoint_bytes(back) == checkpoint_bytes(with_adam)
