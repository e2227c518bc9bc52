import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from wifipose.errors import ConfigError, DataError, NumericError
from wifipose.estimators import CsiPretrainer, PoseRegressor

TINY = dict(d=16, heads=2, ffn_dim=32, depth=1, decoder_depth=1, decoder_d=16, decoder_heads=2,
            epochs=2, steps_per_epoch=3, batch_size=8, lr=1e-3, warmup_epochs=1)


@pytest.fixture(scope="module")
def fitted(small_dataset):
    ds = small_dataset
    return CsiPretrainer(**TINY).fit(ds.csi, groups=ds.sequence_ids)


def state_bytes(module):
    return {k: v.detach().numpy().tobytes() for k, v in module.state_dict().items()}


def test_get_params_and_clone():
    pre = CsiPretrainer(**TINY, seed=7)
    params = pre.get_params()
    assert params["d"] == 16 and params["seed"] == 7 and params["lambda_unif"] == 0.5
    twin = clone(pre)
    assert twin.get_params() == params and twin is not pre
    reg = PoseRegressor(encoder=pre, skeleton="wipose18", lr=3e-3)
    deep = reg.get_params(deep=True)
    assert deep["encoder__d"] == 16 and deep["lr"] == 3e-3
    reg.set_params(encoder__d=32, epochs=3)
    assert reg.encoder.d == 32 and reg.epochs == 3


def test_default_hyperparameters():
    pre = CsiPretrainer()
    cfg = pre.train_config()
    assert (cfg.epochs, cfg.batch_size, cfg.lr, cfg.warmup_epochs, cfg.weight_decay) == (400, 256, 1.5e-4, 40, 0.05)
    assert pre.mask_ratio == 0.8
    dcfg = PoseRegressor().train_config()
    assert (dcfg.lr, dcfg.batch_size) == (1e-3, 32)


def test_transform_shapes(fitted, small_dataset):
    emb = fitted.transform(small_dataset.csi)
    assert emb.shape == (48, 16) and emb.dtype == np.float32
    lat = fitted.latents(small_dataset.csi[:3])
    assert lat.shape[:2] == (3, fitted.model_.n)
    np.testing.assert_allclose(lat.mean(axis=1), emb[:3], atol=1e-6)
    rec, pix = fitted.reconstruct(small_dataset.csi[:2])
    assert rec.shape == (2, 3, 16, 8) and pix.shape == rec.shape
    assert set(np.unique(pix)) <= {0.0, 1.0} and pix.mean() == pytest.approx(0.8, abs=0.1)
    assert len(fitted.history_) == 2 and fitted.n_steps_ == 6


def test_not_fitted(small_dataset):
    with pytest.raises(NotFittedError):
        CsiPretrainer(**TINY).transform(small_dataset.csi)
    with pytest.raises(NotFittedError):
        PoseRegressor().predict(small_dataset.csi)


def test_input_validation(fitted, small_dataset):
    with pytest.raises(DataError, match="fitted shape"):
        fitted.transform(small_dataset.csi[:, :, :, :, :8])
    with pytest.raises(DataError, match="non-finite"):
        bad = small_dataset.csi[:2].copy()
        bad[0, 0, 0, 0, 0, 0] = np.nan
        fitted.transform(bad)
    with pytest.raises(DataError, match=r"\(N, E, R, A, S, T\)"):
        fitted.transform(np.zeros((3, 4)))
    with pytest.raises(ConfigError, match="batch size"):
        CsiPretrainer(**{**TINY, "batch_size": 100}).fit(small_dataset.csi, groups=small_dataset.sequence_ids)
    with pytest.raises(DataError, match="poses"):
        PoseRegressor(encoder=fitted).fit(small_dataset.csi, small_dataset.pose[:5])


def test_pretrain_deterministic(small_dataset):
    ds = small_dataset
    a = CsiPretrainer(**TINY, seed=4).fit(ds.csi, groups=ds.sequence_ids)
    b = CsiPretrainer(**TINY, seed=4).fit(ds.csi, groups=ds.sequence_ids)
    assert a.history_ == b.history_
    assert state_bytes(a.model_) == state_bytes(b.model_)
    c = CsiPretrainer(**TINY, seed=5).fit(ds.csi, groups=ds.sequence_ids)
    assert c.history_ != a.history_


def test_regressor_freezes_encoder(fitted, small_dataset):
    ds = small_dataset
    before = state_bytes(fitted.model_)
    reg = PoseRegressor(encoder=fitted, epochs=2, steps_per_epoch=4, batch_size=8, lr=3e-3)
    reg.fit(ds.csi, ds.pose)
    assert state_bytes(reg.encoder_.model_) == before
    assert state_bytes(fitted.model_) == before
    assert not any(p.requires_grad for p in reg.encoder_.model_.parameters())
    pred = reg.predict(ds.csi)
    assert pred.shape == (48, 17, 3)
    assert reg.score(ds.csi, ds.pose) == pytest.approx(
        -np.linalg.norm(pred - ds.pose[:, 0], axis=-1).mean(), rel=1e-6)


def test_regressor_without_encoder_uses_random_frozen_encoder(small_dataset):
    ds = small_dataset
    reg = PoseRegressor(encoder=CsiPretrainer(**TINY), epochs=1, steps_per_epoch=2, batch_size=8)
    reg.fit(ds.csi, ds.pose, ds.csi[:6], ds.pose[:6])
    assert reg.encoder_.n_steps_ == 0
    assert np.isfinite(reg.history_[0]["val_mpjpe"])
    assert not hasattr(reg.encoder, "model_")  # the template is left untouched


def test_regressor_deterministic(fitted, small_dataset):
    ds = small_dataset
    kw = dict(encoder=fitted, epochs=2, steps_per_epoch=3, batch_size=8, seed=2)
    a = PoseRegressor(**kw).fit(ds.csi, ds.pose)
    b = PoseRegressor(**kw).fit(ds.csi, ds.pose)
    assert [r["train_loss"] for r in a.history_] == [r["train_loss"] for r in b.history_]
    np.testing.assert_array_equal(a.predict(ds.csi), b.predict(ds.csi))


def test_skeleton_mismatch(fitted, small_dataset):
    with pytest.raises(DataError, match="joints"):
        PoseRegressor(encoder=fitted, skeleton="piw3d14", epochs=1).fit(small_dataset.csi, small_dataset.pose)


def test_non_finite_loss_raises(small_dataset):
    ds = small_dataset
    with pytest.raises(NumericError, match="epoch 0, batch 0"):
        CsiPretrainer(**{**TINY, "lr": 1e30, "warmup_epochs": 0, "schedule": "constant"},
                      tau=1e-300).fit(ds.csi, groups=ds.sequence_ids)


def test_non_finite_pose_loss_raises(fitted, small_dataset):
    ds = small_dataset
    reg = PoseRegressor(encoder=fitted, epochs=3, steps_per_epoch=2, batch_size=8, optimizer="sgd", lr=1e30)
    with pytest.raises(NumericError, match="non-finite pose loss"):
        reg.fit(ds.csi, ds.pose)


def test_sgd_decoder_trains(fitted, small_dataset):
    ds = small_dataset
    reg = PoseRegressor(encoder=fitted, optimizer="sgd", epochs=3, steps_per_epoch=6, batch_size=8, lr=1e-2)
    reg.fit(ds.csi, ds.pose)
    assert reg.history_[-1]["train_loss"] < reg.history_[0]["train_loss"]
