import numpy as np
import pytest

from stripereid.dataset import SynthSpec, generate_synthetic
from stripereid.errors import DatasetTooSmall, MissingCache, ShapeMismatch, ValidationError
from stripereid.trainer import (
    FeatureStore,
    OptimizerState,
    TrainConfig,
    epoch_length,
    image_list,
    init_optimizer,
    load_checkpoint,
    optimizer_apply,
    sample_batch,
    train,
    train_config_from_dict,
    train_step,
)
from stripereid.association import init_anchors
from stripereid.trainer import build_model


def quiet(_msg):
    pass


def small_cfg(**overrides):
    base = dict(
        k=4,
        aware="global",
        batch_size=8,
        total_iterations=20,
        warmup_epochs=1,
        c_prime=8,
        seed=5,
        log_interval=1000,
        learning_rate=0.01,
    )
    base.update(overrides)
    return TrainConfig(**base)


class TestConfig:
    def test_default_hyperparameters(self):
        cfg = TrainConfig()
        assert cfg.eta == 0.5
        assert cfg.margin == 0.5
        assert cfg.lam == 1.0
        assert cfg.c_prime == 256
        assert cfg.batch_size == 64

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            train_config_from_dict({"k": 2, "bogus": 1})

    def test_loader_fills_defaults_when_unset(self):
        cfg = train_config_from_dict({"aware": "global", "k": 2})
        assert (cfg.eta, cfg.margin, cfg.lam, cfg.c_prime) == (0.5, 0.5, 1.0, 256)

    def test_batch_size_floor(self):
        with pytest.raises(ValidationError):
            train_config_from_dict({"batch_size": 1})

    def test_bad_enum_values(self):
        with pytest.raises(ValidationError):
            train_config_from_dict({"pooling": "median"})
        with pytest.raises(ValidationError):
            train_config_from_dict({"aware": "both"})
        with pytest.raises(ValidationError):
            train_config_from_dict({"optimizer": "adam"})


class TestSampleBatch:
    def test_two_images_forced(self, tmp_path):
        m = generate_synthetic(SynthSpec(1, 2, 1, (2, 2, 2), seed=0), tmp_path)
        images = image_list(m.training_view())
        batch = sample_batch(images, 2, np.random.default_rng(0))
        assert {it.camera for it in batch} == {0, 1}

    def test_every_batch_covers_two_cameras(self, easy_dataset):
        # published batch size, repeated draws
        images = image_list(easy_dataset.training_view())
        rng = np.random.default_rng(1)
        for _ in range(1000):
            batch = sample_batch(images, 64, rng)
            assert len(batch) == 64
            assert len({it.camera for it in batch}) >= 2
            ids = [(it.camera, it.tracklet_id, it.record.image_id) for it in batch]
            assert len(set(ids)) == 64  # without replacement

    def test_deterministic_sequence(self, easy_dataset):
        images = image_list(easy_dataset.training_view())
        seq_a = [
            [it.record.image_id for it in sample_batch(images, 4, np.random.default_rng(7))]
            for _ in range(1)
        ]
        seq_b = [
            [it.record.image_id for it in sample_batch(images, 4, np.random.default_rng(7))]
            for _ in range(1)
        ]
        assert seq_a == seq_b

    def test_too_small(self, tmp_path):
        m = generate_synthetic(SynthSpec(1, 1, 3, (2, 2, 2), seed=0), tmp_path)
        with pytest.raises(DatasetTooSmall):
            sample_batch(image_list(m.training_view()), 2, np.random.default_rng(0))


class TestOptimizer:
    def test_zero_gradient_keeps_params_state_decays(self):
        cfg = small_cfg(optimizer="rmsprop", learning_rate=0.1)
        params = {"w": np.array([1.0, -2.0], dtype=np.float32)}
        state = OptimizerState(slots={"w": np.array([0.5, 0.5], dtype=np.float32)})
        optimizer_apply(params, {"w": np.zeros(2)}, state, cfg)
        assert np.array_equal(params["w"], [1.0, -2.0])
        assert np.allclose(state.slots["w"], 0.45)  # rho * s

    def test_plain_sgd_single_step(self):
        cfg = small_cfg(optimizer="sgd", momentum=0.0, learning_rate=0.1)
        params = {"w": np.array([1.0], dtype=np.float32)}
        state = init_optimizer(params)
        optimizer_apply(params, {"w": np.array([2.0])}, state, cfg)
        assert np.allclose(params["w"], 1.0 - 0.1 * 2.0)

    def test_sgd_momentum_accumulates(self):
        cfg = small_cfg(optimizer="sgd", momentum=0.9, learning_rate=1.0)
        params = {"w": np.array([0.0], dtype=np.float64)}
        state = init_optimizer(params)
        v = 0.0
        p = 0.0
        for g in (1.0, -0.5, 0.25):
            optimizer_apply(params, {"w": np.array([g])}, state, cfg)
            v = 0.9 * v + g
            p = p - v
        assert abs(params["w"][0] - p) < 1e-12

    def test_rmsprop_three_step_trace(self):
        cfg = small_cfg(optimizer="rmsprop", learning_rate=0.05)
        params = {"w": np.array([1.0], dtype=np.float64)}
        state = init_optimizer(params)
        s = 0.0
        p = 1.0
        for g in (0.3, -0.7, 1.1):
            optimizer_apply(params, {"w": np.array([g])}, state, cfg)
            s = 0.9 * s + 0.1 * g * g
            p = p - 0.05 * g / (np.sqrt(s) + 1e-8)
        assert abs(params["w"][0] - p) < 1e-9

    def test_shape_mismatch(self):
        cfg = small_cfg(optimizer="sgd")
        params = {"w": np.zeros(3, dtype=np.float32)}
        with pytest.raises(ShapeMismatch):
            optimizer_apply(params, {"w": np.zeros(4)}, init_optimizer(params), cfg)


class TestTrainStep:
    def _setup(self, manifest, cfg):
        view = manifest.training_view()
        store = FeatureStore(view.feature_dims)
        model = build_model(cfg, view.feature_dims, param_seed=1)
        bank = init_anchors(
            view, lambda recs: model.forward(store.batch(recs), train=False), eta=cfg.eta
        )
        return view, store, model, bank

    def test_local_kind_features_stateless_anchors_move(self, tmp_path):
        m = generate_synthetic(
            SynthSpec(4, 2, 3, (4, 2, 8), 2.0, 0.1, 0.0, 0.2, seed=2), tmp_path
        )
        cfg = small_cfg(aware="local", k=2, batch_size=4)
        view, store, model, bank = self._setup(m, cfg)
        images = image_list(view)
        rng = np.random.default_rng(0)
        batch = sample_batch(images, 4, rng)
        fmaps = store.batch([it.record for it in batch])
        feats_before = model.forward(fmaps, train=True).copy()
        intra_before = bank.snapshot_intra()
        train_step(batch, model, bank, cfg, init_optimizer(model.trainable()), store, False)
        assert np.array_equal(model.forward(fmaps, train=True), feats_before)
        moved = any(
            not np.array_equal(intra_before[cam], bank.intra[cam]) for cam in bank.cameras()
        )
        assert moved

    def test_zero_loss_step_still_runs_anchor_updates(self, tmp_path):
        # anchors placed exactly on the features: both hinges sit at zero
        m = generate_synthetic(SynthSpec(3, 2, 1, (4, 2, 8), 2.0, 0.1, 0.0, 0.0, seed=3), tmp_path)
        cfg = small_cfg(aware="local", k=2, batch_size=4, margin=0.0)
        view, store, model, bank = self._setup(m, cfg)
        for t in view.tracklets:
            feats = model.forward(store.batch(t.frames), train=False)
            bank.intra[t.camera][bank.index[t.camera][t.tracklet_id]] = feats[0]
            bank.cross[t.camera][bank.index[t.camera][t.tracklet_id]] = feats[0]
        batch = sample_batch(image_list(view), 4, np.random.default_rng(1))
        loss = train_step(batch, model, bank, cfg, init_optimizer(model.trainable()), store, True)
        assert loss == 0.0
        assert bank.t == 1

    def test_step_loss_reproducible(self, easy_dataset):
        cfg = small_cfg(batch_size=6)
        losses = []
        for _ in range(2):
            view, store, model, bank = self._setup(easy_dataset, cfg)
            batch = sample_batch(image_list(view), 6, np.random.default_rng(9))
            losses.append(
                train_step(batch, model, bank, cfg, init_optimizer(model.trainable()), store, False)
            )
        assert losses[0] == losses[1]

    def test_backward_before_forward_raises(self):
        model = build_model(small_cfg(), (4, 2, 8), param_seed=0)
        with pytest.raises(MissingCache):
            model.backward(np.zeros((2, 4, 8)))

    def test_loss_decreases_on_easy_data(self, tmp_path):
        m = generate_synthetic(
            SynthSpec(10, 2, 6, (8, 4, 16), 3.0, 0.3, 0.0, 0.1, seed=21), tmp_path
        )
        cfg = small_cfg(
            k=4, batch_size=8, total_iterations=200, warmup_epochs=1, c_prime=16,
            learning_rate=0.045, optimizer="rmsprop", seed=11,
        )
        result = train(m.training_view(), cfg, tmp_path / "ckpt", log=quiet)
        ma = np.convolve(result.losses, np.ones(20) / 20, mode="valid")
        assert ma[-1] < ma[0]


class TestTrainDriver:
    def test_full_determinism(self, easy_dataset, tmp_path):
        cfg = small_cfg(total_iterations=12)
        train(easy_dataset.training_view(), cfg, tmp_path / "a", log=quiet)
        train(easy_dataset.training_view(), cfg, tmp_path / "b", log=quiet)
        assert (tmp_path / "a/header.json").read_bytes() == (tmp_path / "b/header.json").read_bytes()
        for fa in sorted((tmp_path / "a/tensors").iterdir()):
            fb = tmp_path / "b/tensors" / fa.name
            assert fa.read_bytes() == fb.read_bytes()

    def test_resume_reproduces_uninterrupted_run(self, easy_dataset, tmp_path):
        train(easy_dataset.training_view(), small_cfg(total_iterations=6), tmp_path / "half", log=quiet)
        train(easy_dataset.training_view(), small_cfg(total_iterations=12), tmp_path / "full", log=quiet)
        train(
            easy_dataset.training_view(),
            small_cfg(total_iterations=12),
            tmp_path / "resumed",
            resume=tmp_path / "half",
            log=quiet,
        )
        assert (tmp_path / "full/header.json").read_bytes() == (
            tmp_path / "resumed/header.json"
        ).read_bytes()
        for fa in sorted((tmp_path / "full/tensors").iterdir()):
            assert fa.read_bytes() == (tmp_path / "resumed/tensors" / fa.name).read_bytes()

    def test_resume_config_mismatch_rejected(self, easy_dataset, tmp_path):
        train(easy_dataset.training_view(), small_cfg(total_iterations=4), tmp_path / "c", log=quiet)
        with pytest.raises(ValidationError):
            train(
                easy_dataset.training_view(),
                small_cfg(total_iterations=8, learning_rate=0.123),
                tmp_path / "d",
                resume=tmp_path / "c",
                log=quiet,
            )

    def test_warmup_boundary(self, easy_dataset, tmp_path):
        view = easy_dataset.training_view()
        epoch = epoch_length(view.num_images(), 8)
        n_warm = 1
        cfg = small_cfg(batch_size=8, warmup_epochs=n_warm, total_iterations=epoch * n_warm)
        result = train(view, cfg, tmp_path / "w", log=quiet)
        loaded = load_checkpoint(result.path)
        for cam in loaded.bank.cameras():
            assert np.array_equal(loaded.bank.intra[cam], loaded.bank.cross[cam])

        cfg2 = small_cfg(batch_size=8, warmup_epochs=n_warm, total_iterations=epoch * n_warm + 3)
        result2 = train(view, cfg2, tmp_path / "w2", log=quiet)
        loaded2 = load_checkpoint(result2.path)
        diverged = any(
            not np.array_equal(loaded2.bank.intra[cam], loaded2.bank.cross[cam])
            for cam in loaded2.bank.cameras()
        )
        assert diverged

    def test_warmup_forever_keeps_cross_equal_intra(self, easy_dataset, tmp_path):
        cfg = small_cfg(warmup_epochs=100, total_iterations=10)
        result = train(easy_dataset.training_view(), cfg, tmp_path / "ww", log=quiet)
        loaded = load_checkpoint(result.path)
        for cam in loaded.bank.cameras():
            assert np.array_equal(loaded.bank.intra[cam], loaded.bank.cross[cam])

    def test_log_line_format(self, easy_dataset, tmp_path):
        lines = []
        cfg = small_cfg(total_iterations=4, log_interval=2)
        train(easy_dataset.training_view(), cfg, tmp_path / "log", log=lines.append)
        assert lines
        for line in lines:
            keys = dict(part.split("=") for part in line.split())
            assert set(keys) == {"iter", "loss", "lr", "warmup"}
            assert keys["warmup"] in {"0", "1"}
            float(keys["loss"])

    def test_checkpoint_reload_preserves_state(self, easy_dataset, tmp_path):
        cfg = small_cfg(total_iterations=5)
        result = train(easy_dataset.training_view(), cfg, tmp_path / "r", log=quiet)
        loaded = load_checkpoint(result.path)
        assert loaded.iteration == 5
        assert loaded.config == cfg
        assert loaded.bank.t == 5
        assert loaded.model.kind == "global"
        for name, arr in loaded.model.state().items():
            assert arr.dtype == np.float32, name
        for cam in loaded.bank.cameras():
            for arr in (loaded.bank.intra[cam], loaded.bank.cross[cam]):
                assert np.abs(np.linalg.norm(arr, axis=2) - 1.0).max() < 1e-6

    def test_local_adapter_gets_trained(self, easy_dataset, tmp_path):
        cfg = small_cfg(aware="local", local_adapter=True, total_iterations=8)
        result = train(easy_dataset.training_view(), cfg, tmp_path / "la", log=quiet)
        loaded = load_checkpoint(result.path)
        ident = np.broadcast_to(np.eye(16, dtype=np.float32), loaded.model.adapter.weight.shape)
        assert not np.array_equal(loaded.model.adapter.weight, ident)
