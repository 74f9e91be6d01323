import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from micfer.mine import EmaState
from micfer.model import ModelBundle, encode_identity
from micfer.train import (ConfigError, Optimizers, TrainConfig, TrainingError, dims_for, fit,
                          identity_pretrain, parse_config, step_gradients, stratified_holdout,
                          train_step, write_metrics)
from reference_training import composite_gradient_error, plain_ce_trace


def _bundle(train, seed=0, **cfg):
    config = TrainConfig(d_e=8, d_i=4, **cfg)
    dims = dims_for(train, config, 3)
    return ModelBundle(dims, seed), config


# ---------------------------------------------------------------- config

def test_parse_config_types_and_comments():
    cfg = parse_config("# run\nalpha = 0.5\nepochs=3  # short\ndisable_mi = true\n\n"
                       "input_mode = residual+motion\n")
    assert cfg.alpha == 0.5 and cfg.epochs == 3 and cfg.disable_mi is True
    assert cfg.with_motion


@pytest.mark.parametrize("text,pattern", [
    ("alpha 0.5", "key = value"),
    ("gamma = 1", "unknown key 'gamma'"),
    ("epochs = three", "bad int"),
    ("disable_mi = maybe", "bad bool"),
])
def test_parse_config_errors_name_the_line(text, pattern):
    with pytest.raises(ConfigError, match=pattern) as exc:
        parse_config("alpha = 0.1\n" + text, "run.cfg")
    assert "run.cfg:2" in str(exc.value)


def test_invalid_config_values():
    with pytest.raises(ConfigError):
        TrainConfig(input_mode="pixels")
    with pytest.raises(ConfigError):
        TrainConfig(batch_size=1)


@given(st.integers(0, 200))
def test_beta_schedule(epoch):
    cfg = TrainConfig()
    assert cfg.beta(epoch) == max(0.0, 1.0 - epoch / 30)


def test_lr_schedule():
    cfg = TrainConfig()
    assert cfg.lr_at(29) == 1e-3
    assert cfg.lr_at(30) == pytest.approx(1e-4)


@given(st.lists(st.integers(0, 5), min_size=1, max_size=60), st.floats(0.05, 0.9),
       st.integers(0, 1000))
def test_stratified_holdout_takes_some_of_every_group(groups, frac, seed):
    groups = np.array(groups)
    mask = stratified_holdout(groups, frac, np.random.default_rng(seed))
    for g in np.unique(groups):
        members = groups == g
        k = mask[members].sum()
        assert k == max(1, int(round(frac * members.sum())))


# ---------------------------------------------------------------- steps

@pytest.mark.parametrize("seed", [0, 1, 2])
def test_composite_gradient_matches_finite_differences(tiny_splits, seed):
    train, _ = tiny_splits
    batch = train.subset([0, 5])
    dims = dims_for(train, TrainConfig(d_e=8, d_i=4), 3)
    assert composite_gradient_error(batch, dims, seed) < 1e-3


def test_train_step_leaves_identity_encoder_untouched(tiny_splits):
    train, _ = tiny_splits
    bundle, cfg = _bundle(train)
    before = bundle.fI.checksum()
    enc_before = bundle.fE.checksum()
    opts = Optimizers(bundle, cfg)
    batch = train.subset(np.arange(6))
    z_i = encode_identity(bundle, batch.i_frames)
    ema = EmaState()
    for step in range(3):
        train_step(bundle, batch, z_i, cfg, 0, ema, np.random.default_rng(step), opts, step)
    assert bundle.fI.checksum() == before
    assert bundle.fE.checksum() != enc_before


def test_beta_term_vanishes_after_schedule(tiny_splits):
    train, _ = tiny_splits
    bundle, cfg = _bundle(train)
    batch = train.subset(np.arange(4))
    z_i = encode_identity(bundle, batch.i_frames)
    pi = np.array([1, 0, 3, 2])
    with_rec = step_gradients(bundle, batch, z_i, cfg.alpha, cfg.beta(30), EmaState(), pi, True)
    without = step_gradients(bundle, batch, z_i, cfg.alpha, 0.0, EmaState(), pi, False)
    for p in bundle.encoder_parameters():
        assert np.array_equal(with_rec.encoder[p], without.encoder[p])


def test_classifier_gradient_ignores_regularizers(tiny_splits):
    train, _ = tiny_splits
    bundle, _ = _bundle(train)
    batch = train.subset(np.arange(4))
    z_i = encode_identity(bundle, batch.i_frames)
    pi = np.array([1, 0, 3, 2])
    full = step_gradients(bundle, batch, z_i, 0.1, 1.0, EmaState(), pi, True)
    ce_only = step_gradients(bundle, batch, z_i, 0.0, 0.0, None, None, False)
    for p in bundle.cls.parameters():
        assert np.array_equal(full.cls[p], ce_only.cls[p])


def test_inner_statistics_steps_only_add_T_updates(tiny_splits):
    train, _ = tiny_splits
    batch = train.subset(np.arange(6))
    runs = {}
    for k in (0, 3):
        bundle, cfg = _bundle(train, mine_inner_steps=k)
        opts = Optimizers(bundle, cfg)
        z_i = encode_identity(bundle, batch.i_frames)
        train_step(bundle, batch, z_i, cfg, 0, EmaState(), np.random.default_rng(0), opts)
        runs[k] = bundle, opts
    assert runs[0][1].T.states[0].t == 1 and runs[3][1].T.states[0].t == 4
    assert runs[0][0].cls.checksum() == runs[3][0].cls.checksum()
    assert runs[0][0].T.checksum() != runs[3][0].T.checksum()


def test_nan_aborts_with_loss_name_and_step(tiny_splits):
    train, _ = tiny_splits
    bundle, cfg = _bundle(train)
    batch = train.subset(np.arange(4))
    batch.residuals = batch.residuals.copy()
    batch.residuals[0, 0, 0, 0, 0] = np.nan
    z_i = encode_identity(bundle, batch.i_frames)
    with pytest.raises(TrainingError, match="loss_ce is NaN at step 7"):
        train_step(bundle, batch, z_i, cfg, 0, EmaState(), np.random.default_rng(0),
                   Optimizers(bundle, cfg), step=7)


def test_batch_of_one_rejected(tiny_splits):
    train, _ = tiny_splits
    bundle, cfg = _bundle(train)
    batch = train.subset([0])
    with pytest.raises(ValueError):
        train_step(bundle, batch, encode_identity(bundle, batch.i_frames), cfg, 0, EmaState(),
                   np.random.default_rng(0), Optimizers(bundle, cfg))


# ---------------------------------------------------------------- fit

@pytest.fixture(scope="module")
def tiny_identity(tiny_splits):
    train, _ = tiny_splits
    dims = dims_for(train, TrainConfig(d_e=8, d_i=4), 3)
    return identity_pretrain(train, dims, epochs=8, min_accuracy=0.0).encoder


def test_fit_is_deterministic(tiny_splits, tiny_identity, tmp_path):
    train, _ = tiny_splits
    cfg = TrainConfig(d_e=8, d_i=4, epochs=2, batch_size=8)
    a = fit(cfg, train, tiny_identity, 3)
    b = fit(cfg, train, tiny_identity, 3)
    write_metrics(tmp_path / "a.csv", a.metrics)
    write_metrics(tmp_path / "b.csv", b.metrics)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == \
        "epoch,loss_ce,mi_hat,loss_recon,train_acc,val_acc"
    assert a.bundle.checksum() == b.bundle.checksum()


def test_fit_keeps_identity_encoder_frozen(tiny_splits, tiny_identity):
    train, _ = tiny_splits
    before = tiny_identity.checksum()
    res = fit(TrainConfig(d_e=8, d_i=4, epochs=2, batch_size=8), train, tiny_identity, 3)
    assert res.bundle.fI.checksum() == before == res.final.fI.checksum()


def test_fit_logs_schedule(tiny_splits, tiny_identity):
    train, _ = tiny_splits
    cfg = TrainConfig(d_e=8, d_i=4, epochs=3, batch_size=8, beta_epochs=2)
    res = fit(cfg, train, tiny_identity, 3)
    assert [m.beta for m in res.metrics] == [1.0, 0.5, 0.0]
    assert all(math.isfinite(m.mi_hat) and math.isfinite(m.loss_recon) for m in res.metrics)
    assert 0 <= res.best_epoch < 3


def test_zero_weights_reproduce_plain_cross_entropy(tiny_splits, tiny_identity):
    train, _ = tiny_splits
    cfg = TrainConfig(d_e=8, d_i=4, epochs=3, batch_size=8, alpha=0.0, beta_start=0.0)
    trace = [m.loss_ce for m in fit(cfg, train, tiny_identity, 3).metrics]
    assert trace == plain_ce_trace(cfg, train, tiny_identity, 3)


def test_disabled_regularizers_reproduce_plain_cross_entropy(tiny_splits, tiny_identity):
    train, _ = tiny_splits
    cfg = TrainConfig(d_e=8, d_i=4, epochs=2, batch_size=8, disable_mi=True, disable_recon=True)
    res = fit(cfg, train, tiny_identity, 3)
    assert [m.loss_ce for m in res.metrics] == plain_ce_trace(cfg, train, tiny_identity, 3)
    assert all(math.isnan(m.mi_hat) for m in res.metrics)


def test_pretrain_is_seeded(tiny_splits):
    train, _ = tiny_splits
    dims = dims_for(train, TrainConfig(d_e=8, d_i=4), 3)
    a = identity_pretrain(train, dims, epochs=2, seed=3, min_accuracy=0.0)
    b = identity_pretrain(train, dims, epochs=2, seed=3, min_accuracy=0.0)
    assert a.encoder.checksum() == b.encoder.checksum()
    assert all(not p.requires_grad for p in a.encoder.parameters())


def test_pretrain_failure_is_reported(tiny_splits):
    train, _ = tiny_splits
    dims = dims_for(train, TrainConfig(d_e=8, d_i=4), 3)
    with pytest.raises(TrainingError, match="held-out accuracy"):
        identity_pretrain(train, dims, epochs=0, min_accuracy=1.01)
