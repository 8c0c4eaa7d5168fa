import numpy as np
import pytest

from conftest import small_backbone, small_synthetic
from novnet import nn_core
from novnet.data_io import Dataset
from novnet.dual_trainer import (
    Checkpoint,
    TrainerState,
    TrainingConfig,
    build_dual_model,
    load_checkpoint,
    save_checkpoint,
    train,
    train_step,
)
from novnet.errors import ConfigError, CorruptionError, FormatError, LabelError
from novnet.losses import MembershipParams, cross_entropy, membership_loss
from novnet.nn_core import Dense, NetworkSpec, Relu


def copy_params(params):
    return {k: v.copy() for k, v in params.items()}


def backbone16():
    return NetworkSpec((4,), (Dense(4, 16), Relu()))


class TestBuildDualModel:
    def test_deterministic(self):
        a = build_dual_model(backbone16(), 4, 3, seed=5)
        b = build_dual_model(backbone16(), 4, 3, seed=5)
        for pa, pb in ((a.backbone, b.backbone), (a.head_T, b.head_T), (a.head_R, b.head_R)):
            assert pa.keys() == pb.keys()
            for k in pa:
                assert np.array_equal(pa[k], pb[k])

    def test_head_shape_contract(self):
        model = build_dual_model(backbone16(), 4, 3, seed=0)
        assert model.head_T["layer0.weight"].shape == (4, 16)
        assert model.head_R["layer0.weight"].shape == (3, 16)

    def test_heads_differ(self):
        model = build_dual_model(NetworkSpec((4,), (Dense(4, 8), Relu())), 3, 3, seed=1)
        assert not np.array_equal(model.head_T["layer0.weight"], model.head_R["layer0.weight"])

    def test_needs_two_known_classes(self):
        with pytest.raises(ConfigError):
            build_dual_model(backbone16(), 1, 3, seed=0)

    def test_no_reference_head_when_zero_classes(self):
        model = build_dual_model(backbone16(), 3, 0, seed=0)
        assert model.head_R is None

    def test_combined_head_width(self):
        model = build_dual_model(backbone16(), 3, 5, seed=0, combined_head=True)
        assert model.head_T["layer0.weight"].shape == (8, 16)
        assert model.head_R is None
        assert model.num_known == 3

    def test_backbone_must_be_flat(self):
        spec = NetworkSpec((1, 6, 6), (nn_core.Conv2d(1, 2, 3),))
        with pytest.raises(ConfigError):
            build_dual_model(spec, 2, 2, seed=0)


def random_batch(rng, n, dim, c):
    return rng.standard_normal((n, dim)), rng.integers(0, c, size=n)


class TestTrainStep:
    def test_zero_alphas_leave_head_T_unchanged(self):
        rng = np.random.default_rng(0)
        model = build_dual_model(backbone16(), 3, 2, seed=0)
        cfg = TrainingConfig(mode="dual-full", alpha1=0.0, alpha2=0.0, lr=0.1, seed=0)
        before = copy_params(model.head_T)
        train_step(model, random_batch(rng, 8, 4, 3), random_batch(rng, 8, 4, 2), cfg)
        assert all(np.array_equal(before[k], model.head_T[k]) for k in before)

    def test_cumulative_identity(self):
        rng = np.random.default_rng(1)
        model = build_dual_model(backbone16(), 3, 2, seed=1)
        cfg = TrainingConfig(mode="dual-full", alpha1=0.7, alpha2=0.3, seed=0)
        m = train_step(model, random_batch(rng, 6, 4, 3), random_batch(rng, 6, 4, 2), cfg)
        assert abs(m.cumulative - (m.loss_ce_R + 0.7 * m.loss_ce_T + 0.3 * m.loss_m_T)) < 1e-12

    def test_backbone_gradient_is_sum_of_branches(self):
        rng = np.random.default_rng(2)
        model = build_dual_model(backbone16(), 3, 2, seed=2)
        cfg = TrainingConfig(mode="dual-full", lr=0.05, momentum=0.0, seed=0)
        batch_t = random_batch(rng, 5, 4, 3)
        batch_r = random_batch(rng, 7, 4, 2)

        # independent two-pass decomposition oracle
        def branch_grads(head_spec, head, batch, upstream_fn):
            x, y = batch
            feat, cache_b = nn_core.forward(model.backbone_spec, model.backbone, x)
            f, cache_h = nn_core.forward(head_spec, head, feat)
            _, dfeat = nn_core.backward(head_spec, head, cache_h, upstream_fn(f, y))
            grads, _ = nn_core.backward(model.backbone_spec, model.backbone, cache_b, dfeat)
            return grads

        def t_upstream(f, y):
            ce = cross_entropy(f, y)
            mem = membership_loss(f, y, MembershipParams(cfg.lam))
            return cfg.alpha1 * ce.grad + cfg.alpha2 * mem.grad

        g_t = branch_grads(model.head_T_spec, model.head_T, batch_t, t_upstream)
        g_r = branch_grads(model.head_R_spec, model.head_R, batch_r,
                           lambda f, y: cross_entropy(f, y).grad)
        before = copy_params(model.backbone)
        train_step(model, batch_t, batch_r, cfg)
        for k in before:
            step = (before[k] - model.backbone[k]) / cfg.lr  # momentum 0: step = grads
            assert np.max(np.abs(step - (g_t[k] + g_r[k]))) < 1e-10

    def test_label_out_of_range(self):
        rng = np.random.default_rng(3)
        model = build_dual_model(backbone16(), 3, 2, seed=3)
        cfg = TrainingConfig(mode="ce-only", seed=0)
        x, _ = random_batch(rng, 4, 4, 3)
        with pytest.raises(LabelError):
            train_step(model, (x, np.array([0, 1, 3, 0])), None, cfg)

    def test_reference_batch_consistency(self):
        rng = np.random.default_rng(4)
        model = build_dual_model(backbone16(), 3, 2, seed=4)
        with pytest.raises(ConfigError):
            train_step(model, random_batch(rng, 4, 4, 3), None,
                       TrainingConfig(mode="dual-full", seed=0))
        with pytest.raises(ConfigError):
            train_step(model, random_batch(rng, 4, 4, 3), random_batch(rng, 4, 4, 2),
                       TrainingConfig(mode="ce-only", seed=0))


class TestTrain:
    def test_zero_lr_keeps_parameters(self, toy_datasets):
        known, _, reference = toy_datasets
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=0)
        before = (copy_params(model.backbone), copy_params(model.head_T), copy_params(model.head_R))
        cfg = TrainingConfig(mode="dual-full", epochs=3, lr=0.0, seed=0)
        model, history = train(model, known, reference, cfg)
        for prev, now in zip(before, (model.backbone, model.head_T, model.head_R)):
            for k in prev:
                assert np.array_equal(prev[k], now[k])
        assert len(history) == 3

    def test_zero_epochs(self, toy_datasets):
        known, _, reference = toy_datasets
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=0)
        before = copy_params(model.backbone)
        model, history = train(model, known, reference, TrainingConfig(mode="dual-full", epochs=0, seed=0))
        assert history == []
        assert all(np.array_equal(before[k], model.backbone[k]) for k in before)

    @pytest.mark.parametrize("seed", range(5))
    def test_loss_decreases_on_separable_data(self, seed):
        rng = np.random.default_rng(seed)
        samples = []
        for i in range(40):
            label = i % 2
            center = np.array([3.0, 0.0]) if label else np.array([-3.0, 0.0])
            samples.append((center + 0.3 * rng.standard_normal(2), label))
        ds = Dataset(samples, ["neg", "pos"], "sep")
        model = build_dual_model(NetworkSpec((2,), (Dense(2, 8), Relu())), 2, 0, seed=seed)
        cfg = TrainingConfig(mode="ce-only", epochs=10, lr=0.05, seed=seed, batch_size_T=8)
        model, history = train(model, ds, None, cfg)
        assert history[-1].loss_ce_T < history[0].loss_ce_T

    def test_shared_backbone_instance(self, trained_dual_full):
        model, _, datasets = trained_dual_full
        known, _, _ = datasets
        x = known.features()[:4]
        f_t_before = model.known_logits(x)
        f_r_before = model.reference_logits(x)
        perturbed = {k: v + 0.1 for k, v in model.backbone.items()}
        original, model.backbone = model.backbone, perturbed
        try:
            assert not np.array_equal(model.known_logits(x), f_t_before)
            assert not np.array_equal(model.reference_logits(x), f_r_before)
        finally:
            model.backbone = original

    def test_history_components_finite(self, trained_dual_full):
        _, history, _ = trained_dual_full
        for h in history:
            for v in (h.loss_ce_R, h.loss_ce_T, h.loss_m_T, h.cumulative):
                assert np.isfinite(v)

    def test_mode_dataset_consistency(self, toy_datasets):
        known, _, reference = toy_datasets
        model = build_dual_model(small_backbone(), known.n_classes, 0, seed=0)
        with pytest.raises(ConfigError):
            train(model, known, reference, TrainingConfig(mode="ce-only", epochs=1, seed=0))
        model2 = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=0)
        with pytest.raises(ConfigError):
            train(model2, known, None, TrainingConfig(mode="dual-full", epochs=1, seed=0))

    def test_ce_only_equals_plain_trainer(self, toy_datasets):
        known, _, _ = toy_datasets
        cfg = TrainingConfig(mode="ce-only", epochs=4, lr=0.05, momentum=0.9,
                             batch_size_T=16, seed=11)
        model = build_dual_model(small_backbone(), known.n_classes, 0, seed=11)
        trained, _ = train(model, known, None, cfg)

        # plain single-branch trainer written from scratch
        backbone_spec = small_backbone()
        head_spec = NetworkSpec((8,), (Dense(8, known.n_classes),))
        backbone = nn_core.init_params(backbone_spec, [11, 0])
        head = nn_core.init_params(head_spec, [11, 1])
        bb_state = nn_core.OptimizerState(lr=0.05, momentum=0.9)
        hd_state = nn_core.OptimizerState(lr=0.05, momentum=0.9)
        x_all = known.features()
        y_all = known.labels()
        rng = np.random.default_rng([11, 3])
        for _ in range(4):
            perm = rng.permutation(len(y_all))
            for start in range(0, len(y_all), 16):
                idx = perm[start:start + 16]
                feat, cache_b = nn_core.forward(backbone_spec, backbone, x_all[idx])
                f, cache_h = nn_core.forward(head_spec, head, feat)
                ce = cross_entropy(f, y_all[idx])
                head_grads, dfeat = nn_core.backward(head_spec, head, cache_h, ce.grad)
                bb_grads, _ = nn_core.backward(backbone_spec, backbone, cache_b, dfeat)
                backbone, bb_state = nn_core.sgd_step(backbone, bb_grads, bb_state)
                head, hd_state = nn_core.sgd_step(head, head_grads, hd_state)
        for k in backbone:
            assert np.array_equal(trained.backbone[k], backbone[k])
        for k in head:
            assert np.array_equal(trained.head_T[k], head[k])

    def test_finetune_cc_with_zero_reference_degenerates_to_ce_only(self, toy_datasets):
        known, _, _ = toy_datasets
        cfg_ft = TrainingConfig(mode="finetune-cC", epochs=4, lr=0.05, seed=21, batch_size_T=16)
        model_ft = build_dual_model(small_backbone(), known.n_classes, 0, seed=21, combined_head=True)
        model_ft, hist_ft = train(model_ft, known, None, cfg_ft)

        cfg_ce = TrainingConfig(mode="ce-only", epochs=4, lr=0.05, seed=21, batch_size_T=16)
        model_ce = build_dual_model(small_backbone(), known.n_classes, 0, seed=21)
        model_ce, hist_ce = train(model_ce, known, None, cfg_ce)

        for k in model_ce.backbone:
            assert np.array_equal(model_ft.backbone[k], model_ce.backbone[k])
        for k in model_ce.head_T:
            assert np.array_equal(model_ft.head_T[k], model_ce.head_T[k])
        assert [h.to_dict() for h in hist_ft] == [h.to_dict() for h in hist_ce]

    def test_finetune_cc_trains_on_union(self, toy_datasets):
        known, _, reference = toy_datasets
        cfg = TrainingConfig(mode="finetune-cC", epochs=3, lr=0.05, seed=5, batch_size_T=16)
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes,
                                 seed=5, combined_head=True)
        model, history = train(model, known, reference, cfg)
        assert model.head_T["layer0.weight"].shape[0] == known.n_classes + reference.n_classes
        assert all(np.isfinite(h.loss_ce_T) for h in history)

    def test_divergence_raises(self, toy_datasets):
        from novnet.errors import DivergenceError
        known, _, reference = toy_datasets
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=0)
        cfg = TrainingConfig(mode="dual-full", epochs=50, lr=1e9, seed=0)
        with np.errstate(all="ignore"), pytest.raises(DivergenceError):
            train(model, known, reference, cfg)

    def test_epoch_callback_sees_every_epoch(self, toy_datasets):
        known, _, reference = toy_datasets
        seen = []
        cfg = TrainingConfig(mode="dual-full", epochs=3, seed=0)
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=0)
        train(model, known, reference, cfg, epoch_callback=lambda e, m: seen.append(e))
        assert seen == [0, 1, 2]


class TestTrainingConfig:
    def test_unknown_mode(self):
        with pytest.raises(ConfigError):
            TrainingConfig(mode="bogus")

    def test_dict_round_trip(self):
        cfg = TrainingConfig(mode="dual-ce", lam=2.5, alpha1=0.5, epochs=7, seed=9)
        again = TrainingConfig.from_dict(cfg.to_dict())
        assert again == cfg
        assert cfg.to_dict()["lambda"] == 2.5

    def test_unknown_keys_rejected(self):
        with pytest.raises(ConfigError):
            TrainingConfig.from_dict({"mode": "ce-only", "bogus": 1})

    def test_effective_alpha2(self):
        assert TrainingConfig(mode="dual-ce", alpha2=3.0).effective_alpha2 == 0.0
        assert TrainingConfig(mode="dual-full", alpha2=3.0).effective_alpha2 == 3.0


class TestCheckpoint:
    def make_model(self, c=4, ref=8, combined=False):
        return build_dual_model(backbone16(), c, ref, seed=13, combined_head=combined)

    def test_round_trip_bitwise(self, tmp_path):
        model = self.make_model()
        cfg = TrainingConfig(mode="dual-full", seed=13)
        path = tmp_path / "model.nvfg"
        save_checkpoint(model, cfg, path, epoch=3, metrics={"cumulative": 1.5})
        ckpt = load_checkpoint(path)
        assert isinstance(ckpt, Checkpoint)
        assert ckpt.epoch == 3
        assert ckpt.config == cfg
        probe = np.random.default_rng(0).standard_normal((5, 4))
        assert np.array_equal(ckpt.model.known_logits(probe), model.known_logits(probe))
        assert np.array_equal(ckpt.model.reference_logits(probe), model.reference_logits(probe))

    def test_wrong_magic(self, tmp_path):
        path = tmp_path / "bad.nvfg"
        model = self.make_model()
        save_checkpoint(model, TrainingConfig(seed=0), path)
        data = bytearray(path.read_bytes())
        data[:4] = b"XXXX"
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_wrong_version(self, tmp_path):
        path = tmp_path / "bad.nvfg"
        save_checkpoint(self.make_model(), TrainingConfig(seed=0), path)
        data = bytearray(path.read_bytes())
        data[4:8] = (99).to_bytes(4, "little")
        path.write_bytes(bytes(data))
        with pytest.raises(FormatError):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "trunc.nvfg"
        save_checkpoint(self.make_model(), TrainingConfig(seed=0), path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 15])
        with pytest.raises(CorruptionError):
            load_checkpoint(path)

    def test_shape_audit_after_reload(self, tmp_path):
        model = self.make_model(c=4, ref=8)
        path = tmp_path / "m.nvfg"
        save_checkpoint(model, TrainingConfig(seed=0), path)
        ckpt = load_checkpoint(path)
        assert ckpt.model.head_T["layer0.weight"].shape == (4, 16)
        assert ckpt.model.head_R["layer0.weight"].shape == (8, 16)
        assert ckpt.model.num_known == 4
        assert ckpt.model.num_reference == 8

    def test_combined_head_round_trip(self, tmp_path):
        model = self.make_model(c=3, ref=2, combined=True)
        path = tmp_path / "m.nvfg"
        save_checkpoint(model, TrainingConfig(mode="finetune-cC", seed=0), path)
        ckpt = load_checkpoint(path)
        assert ckpt.model.combined_head
        assert ckpt.model.head_R is None
        assert ckpt.model.head_T["layer0.weight"].shape == (5, 16)


class TestWeightSharingInvariant:
    def test_branches_see_identical_features_every_epoch(self, toy_datasets):
        known, _, reference = toy_datasets
        probe = known.features()[:6]
        model = build_dual_model(small_backbone(), known.n_classes, reference.n_classes, seed=7)
        mismatches = []

        def check(epoch, m):
            f_t = m.features_for_known_branch(probe)
            f_r = m.features_for_reference_branch(probe)
            if not np.array_equal(f_t, f_r):
                mismatches.append(epoch)

        cfg = TrainingConfig(mode="dual-full", epochs=5, seed=7)
        train(model, known, reference, cfg, epoch_callback=check)
        assert mismatches == []
