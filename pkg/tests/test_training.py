import csv
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mdsvit.exceptions import (
    CheckpointIntegrityError,
    ConfigError,
    IncompatibleCheckpointError,
    NonFiniteError,
)
from mdsvit.layers import Parameter
from mdsvit.model import ModelConfig, build_model
from mdsvit.synth import generate
from mdsvit.training import (
    FORMAT_VERSION,
    LOG_COLUMNS,
    AdamW,
    EarlyStopping,
    StepLR,
    TrainConfig,
    adam_step,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    make_checkpoint,
    model_from_checkpoint,
    parameter_digest,
    save_checkpoint,
    train_main,
    train_merge,
)

from oracles import adam_reference

HW = (32, 64)


def small_model(seed=0):
    return build_model(ModelConfig.preset_config("toy", HW), seed=seed)


@pytest.fixture(scope="module")
def samples():
    return generate(3, HW, seed=2)


# -- optimiser -----------------------------------------------------------------

def test_first_step_moves_by_lr(rng):
    p = Parameter(rng.normal(size=(5,)))
    start = p.data.copy()
    adam_step({"p": p}, {"p": rng.normal(size=(5,))}, AdamW([("p", p)], lr=1e-3))
    assert np.allclose(np.abs(p.data - start), 1e-3, rtol=1e-4)


def test_adam_matches_reference(rng):
    p0 = rng.normal(size=(4, 3))
    grads = [rng.normal(size=(4, 3)) for _ in range(6)]
    p = Parameter(p0.copy())
    opt = AdamW([("p", p)], lr=0.01)
    for g in grads:
        p.grad = g
        opt.step()
    assert np.allclose(p.data, adam_reference(p0, grads, 0.01), atol=1e-12)


def test_decoupled_weight_decay(rng):
    p0 = rng.normal(size=(3,))
    p = Parameter(p0.copy())
    opt = AdamW([("p", p)], lr=0.1, weight_decay=0.5)
    p.grad = np.ones(3)
    opt.step()
    assert np.allclose(p.data, p0 * (1 - 0.05) - 0.1, atol=1e-7)


def test_adam_converges_on_quadratic():
    p = Parameter(np.array([3.0, -2.0]))
    opt = AdamW([("p", p)], lr=0.05)
    for _ in range(500):
        p.grad = 2 * p.data
        opt.step()
    assert np.all(np.abs(p.data) < 1e-2)


def test_none_grad_is_skipped(rng):
    p, q = Parameter(rng.normal(size=2)), Parameter(rng.normal(size=2))
    before = q.data.copy()
    p.grad = np.ones(2)
    AdamW([("p", p), ("q", q)], lr=0.1).step()
    assert np.array_equal(q.data, before)


def test_nan_gradient_names_parameter():
    p = Parameter(np.zeros(2))
    p.grad = np.array([np.nan, 0.0])
    with pytest.raises(NonFiniteError, match="'weights'"):
        AdamW([("weights", p)]).step()


# -- scheduler / early stopping -----------------------------------------------

@given(st.floats(1e-6, 1.0), st.integers(0, 200), st.integers(1, 20), st.floats(0.1, 1.0))
def test_step_lr_closed_form(lr, epoch, step, gamma):
    assert StepLR(lr, step, gamma).lr_at(epoch) == pytest.approx(lr * gamma ** (epoch // step))


def test_step_lr_halves_every_ten():
    s = StepLR(1.0)
    assert [s.lr_at(e) for e in (0, 9, 10, 19, 20, 35)] == [1, 1, 0.5, 0.5, 0.25, 0.125]


def test_early_stop_counts_stagnant_epochs():
    es = EarlyStopping(patience=5)
    assert not es.step(1.0)
    assert [es.step(1.0) for _ in range(5)] == [False] * 4 + [True]


def test_improvement_resets_counter():
    es = EarlyStopping(patience=2)
    es.step(1.0)
    es.step(1.0)
    assert not es.step(0.5) and es.improved


def test_monotone_decreasing_loss_never_stops():
    es = EarlyStopping(patience=5)
    assert not any(es.step(10.0 - e) for e in range(50))


# -- checkpoints ----------------------------------------------------------------

def _ckpt():
    model = small_model()
    opt = AdamW(model.named_parameters(), lr=1e-3)
    return make_checkpoint(model, opt, epoch=3, best_val_loss=-1.5, seed=9, extra={"stage": "main"})


def test_checkpoint_bytes_round_trip():
    buf = encode_checkpoint(_ckpt())
    assert buf[:4] == b"MDSV"
    assert encode_checkpoint(decode_checkpoint(buf)) == buf


def test_checkpoint_restores_model(tmp_path, rng):
    ck = _ckpt()
    save_checkpoint(tmp_path / "a.ckpt", ck)
    back = load_checkpoint(tmp_path / "a.ckpt")
    assert back.epoch == 3 and back.best_val_loss == -1.5 and back.rng_state["seed"] == 9
    model = model_from_checkpoint(back)
    ref = small_model()
    for (k, a), (_, b) in zip(model.named_parameters(), ref.named_parameters()):
        assert np.array_equal(a.data, b.data), k


def test_corrupted_payload_detected():
    buf = bytearray(encode_checkpoint(_ckpt()))
    buf[-10] ^= 0xFF
    with pytest.raises(CheckpointIntegrityError):
        decode_checkpoint(bytes(buf))


def test_truncated_checkpoint_detected():
    buf = encode_checkpoint(_ckpt())
    for cut in (3, 20, len(buf) // 2, len(buf) - 1):
        with pytest.raises(CheckpointIntegrityError):
            decode_checkpoint(buf[:cut])


def test_version_mismatch():
    buf = bytearray(encode_checkpoint(_ckpt()))
    buf[4:8] = (FORMAT_VERSION + 1).to_bytes(4, "little")
    with pytest.raises(IncompatibleCheckpointError):
        decode_checkpoint(bytes(buf))


# -- training loops -----------------------------------------------------------

def test_train_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(epochs=0).validate()
    with pytest.raises(ConfigError):
        TrainConfig(gamma=0).validate()
    assert TrainConfig.merge_defaults().lr == 1e-5


def test_early_stop_fires_after_five_stagnant_epochs(samples):
    cfg = TrainConfig(epochs=20, batch_size=3, lr=0.0, freeze_batchnorm=True)
    res = train_main(small_model(), samples, samples, cfg)
    assert res.stopped_early
    assert len(res.log.records) == 6  # one improving epoch then five stagnant


def test_log_csv_columns(samples, tmp_path):
    cfg = TrainConfig(epochs=2, batch_size=2, log_path=str(tmp_path / "log.csv"), checkpoint_dir=str(tmp_path))
    res = train_main(small_model(), samples, samples, cfg)
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 3
    assert float(rows[2][1]) == cfg.lr
    assert (tmp_path / "best.ckpt").exists() and (tmp_path / "last.ckpt").exists()
    rec = res.log.records[-1]
    assert rec.val_cc == pytest.approx((rec.reports["map1"].cc + rec.reports["map2"].cc) / 2)


def test_resume_reproduces_next_epoch(samples):
    cfg = TrainConfig(epochs=3, batch_size=2, lr=1e-3, seed=4)
    full = train_main(small_model(), samples, samples, cfg)
    first = train_main(small_model(), samples, samples, TrainConfig(epochs=1, batch_size=2, lr=1e-3, seed=4))
    ck = decode_checkpoint(encode_checkpoint(first.last))
    resumed = train_main(small_model(seed=99), samples, samples, cfg, resume=ck)
    assert [r.epoch for r in resumed.log.records] == [1, 2]
    for a, b in zip(full.log.records[1:], resumed.log.records):
        assert abs(a.train_loss - b.train_loss) < 1e-6
        assert abs(a.val_loss - b.val_loss) < 1e-6


def test_nan_loss_raises(samples):
    model = small_model()
    model.decoder1.convs[-1].bias.data[:] = np.nan
    with pytest.raises(NonFiniteError, match="epoch 0, batch 0"):
        train_main(model, samples, samples, TrainConfig(epochs=1, batch_size=3))


def test_callback_can_stop(samples):
    res = train_main(small_model(), samples, samples, TrainConfig(epochs=5, batch_size=3), callback=lambda r: True)
    assert len(res.log.records) == 1 and not res.stopped_early


def test_merge_stage_freezes_main_model(samples):
    model = small_model()
    main = [p for k, p in model.named_parameters() if not k.startswith("merge.")]
    digest = parameter_digest(main)
    merge_before = parameter_digest(model.merge.parameters())
    with pytest.warns(UserWarning, match="batch size 64"):
        res = train_merge(model, samples, samples, TrainConfig.merge_defaults(epochs=2, lr=1e-3))
    assert parameter_digest(main) == digest
    assert parameter_digest(model.merge.parameters()) != merge_before
    assert all(p.grad is None for p in main)
    assert all(p.requires_grad for p in main)
    assert set(res.log.records[0].reports) == {"merged"}
    names = [k for k in res.last.tensors if k.startswith("opt.m.")]
    assert names and all(k.startswith("opt.m.merge.") for k in names)


def test_merge_batch_fits_without_warning(samples):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        train_merge(small_model(), samples, samples, TrainConfig.merge_defaults(epochs=1, batch_size=3))
