import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mucs.data import TrainingInstance
from mucs.diffusion.config import ArchConfig, ConfigError, LossConfig, NoiseDraw, TrainConfig, \
    build_generation_schedule
from mucs.diffusion.losses import diffusion_loss, draw_noise, per_sample_loss, sample_training_noise
from mucs.diffusion.network import MASKS, Denoiser, group_of, mask_names, parameter_groups
from mucs.diffusion.sampling import generate, sample
from mucs.diffusion.snapshot import CheckpointError, ModelSnapshot
from mucs.diffusion.training import ShuffledIndex, pretrain
from mucs.rng import Stream

from conftest import TINY_ARCH


def karras_oracle(smin, smax, rho, n):
    out = []
    for i in range(n):
        out.append((smax ** (1 / rho) + i / (n - 1) * (smin ** (1 / rho) - smax ** (1 / rho))) ** rho)
    return out


class TestSchedule:
    def test_matches_closed_form(self):
        sched = build_generation_schedule(0.002, 80, 7, 32)
        assert np.allclose(sched.as_array(), karras_oracle(0.002, 80, 7, 32), rtol=1e-12)
        assert sched.values[0] == 80 and sched.values[-1] == 0.002

    @given(st.floats(1e-4, 1.0), st.floats(2.0, 200.0), st.floats(0.5, 10.0), st.integers(2, 300))
    @settings(max_examples=60, deadline=None)
    def test_strictly_descending(self, smin, smax, rho, n):
        v = build_generation_schedule(smin, smax, rho, n).as_array()
        assert len(v) == n
        assert np.all(np.diff(v) < 0)

    @pytest.mark.parametrize("args", [(0.0, 80, 7, 32), (1.0, 0.5, 7, 32), (0.002, 80, 7, 1), (0.002, 80, 0, 8)])
    def test_rejects_bad_bounds(self, args):
        with pytest.raises(ConfigError):
            build_generation_schedule(*args)


class TestLoss:
    def test_edm_zero_network_matches_hand_computation(self, tiny_data, loss_cfg):
        f0 = ModelSnapshot.random_init(TINY_ARCH, loss_cfg, seed=0)
        gen = torch.Generator().manual_seed(0)
        sigma, n = draw_noise(8, TINY_ARCH.input_shape, loss_cfg, gen)
        x = tiny_data.x_batch(np.arange(8))
        got = per_sample_loss(f0.module(), x, tiny_data.cond_batch(np.arange(8)), sigma, n, loss_cfg)
        xs, ss, ns = x.double().numpy(), sigma.double().numpy(), n.double().numpy()
        sd = loss_cfg.sigma_data
        for i in range(8):
            c_skip = sd ** 2 / (ss[i] ** 2 + sd ** 2)
            w = (ss[i] ** 2 + sd ** 2) / (ss[i] * sd) ** 2
            want = w * np.mean((c_skip * (xs[i] + ss[i] * ns[i]) - xs[i]) ** 2)
            assert got[i].item() == pytest.approx(want, rel=1e-4)

    def test_ddpm_zero_network_is_noise_power(self, tiny_data):
        loss = LossConfig(variant="ddpm")
        f0 = ModelSnapshot.random_init(TINY_ARCH, loss, seed=0)
        gen = torch.Generator().manual_seed(1)
        sigma, n = draw_noise(4, TINY_ARCH.input_shape, loss, gen)
        got = per_sample_loss(f0.module(), tiny_data.x_batch(np.arange(4)), None, sigma, n, loss)
        assert torch.allclose(got, n.pow(2).mean((1, 2, 3)), rtol=1e-6)

    def test_exact_predictor_gives_zero(self, tiny_data, loss_cfg):
        x = tiny_data.x_batch(np.arange(3))
        sigma, n = draw_noise(3, TINY_ARCH.input_shape, loss_cfg, torch.Generator().manual_seed(2))
        got = per_sample_loss(lambda xn, s, c: x, x, None, sigma, n, loss_cfg)
        assert torch.all(got == 0)

    def test_diffusion_loss_validates_shapes(self, tiny_data, tiny_f1):
        inst = tiny_data[0]
        draw = NoiseDraw(0.5, np.zeros(TINY_ARCH.input_shape, dtype=np.float32))
        assert diffusion_loss(inst, draw, tiny_f1) >= 0
        with pytest.raises(ValueError):
            diffusion_loss(TrainingInstance("x", np.zeros((3, 8, 8)), 0), draw, tiny_f1)
        with pytest.raises(ValueError):
            diffusion_loss(inst, NoiseDraw(0.5, np.zeros((3, 8, 8))), tiny_f1)

    def test_noise_draws_replay_per_stream(self, loss_cfg):
        a = sample_training_noise(5, loss_cfg, Stream(4).child("n"), (3, 16, 16))
        b = sample_training_noise(5, loss_cfg, Stream(4).child("n"), (3, 16, 16))
        assert [d.sigma for d in a] == [d.sigma for d in b]
        assert all(np.array_equal(x.n, y.n) for x, y in zip(a, b))

    def test_noise_draw_rejects_non_positive_sigma(self):
        with pytest.raises(ConfigError):
            NoiseDraw(0.0, np.zeros(3))

    def test_lognormal_moments(self, loss_cfg):
        sigma, _ = draw_noise(20000, (1,), loss_cfg, torch.Generator().manual_seed(0))
        logs = sigma.double().log()
        assert logs.mean().item() == pytest.approx(loss_cfg.p_mean, abs=0.03)
        assert logs.std().item() == pytest.approx(loss_cfg.p_std, abs=0.03)


class TestNetwork:
    def test_every_parameter_has_a_group(self):
        net = Denoiser(ArchConfig())
        groups = parameter_groups(net)
        assert set(groups) == {"encoder", "decoder", "cond_embed", "cond_mlp", "block_mlp", "block_mod"}
        assert sum(len(v) for v in groups.values()) == len(list(net.parameters()))

    def test_masks_nest(self):
        net = Denoiser(ArchConfig())
        mlp, blocks, every = (mask_names(net, m) for m in ("mlp-only", "blocks", "all"))
        assert mlp < blocks < every
        assert all(group_of(n) in ("cond_mlp", "block_mlp") for n in mlp)
        with pytest.raises(ConfigError):
            mask_names(net, "heads")
        assert set(MASKS) == {"mlp-only", "blocks", "all"}

    def test_zero_init_output(self):
        net = Denoiser(ArchConfig())
        out = net(torch.randn(2, 3, 16, 16), torch.zeros(2), torch.tensor([0, 1]))
        assert torch.all(out == 0)

    def test_unconditional_arch(self):
        net = Denoiser(ArchConfig(cond_mode="none"))
        assert net(torch.randn(1, 3, 16, 16), torch.zeros(1)).shape == (1, 3, 16, 16)

    @pytest.mark.parametrize("kw", [{"input_shape": (3, 15, 16)}, {"cond_mode": "text"},
                                    {"cond_dropout": 1.5}, {"num_blocks": 0}])
    def test_arch_validation(self, kw):
        with pytest.raises(ConfigError):
            ArchConfig(**kw)


class TestSnapshot:
    def test_roundtrip(self, tiny_f1, tmp_path):
        path = tiny_f1.save(tmp_path / "f1.pt")
        back = ModelSnapshot.load(path)
        assert back.same_weights(tiny_f1)
        assert back.digest() == tiny_f1.digest()
        assert back.role == "F1" and back.arch == tiny_f1.arch

    def test_rejects_foreign_weights(self, tiny_f1):
        weights = dict(tiny_f1.weights)
        weights.pop(next(iter(weights)))
        with pytest.raises(CheckpointError):
            ModelSnapshot(weights, tiny_f1.arch, tiny_f1.loss, "F1", {})

    def test_weights_are_read_only(self, tiny_f1):
        with pytest.raises(TypeError):
            tiny_f1.weights["x"] = torch.zeros(1)

    def test_random_init_reproducible(self, loss_cfg):
        a = ModelSnapshot.random_init(TINY_ARCH, loss_cfg, 5)
        b = ModelSnapshot.random_init(TINY_ARCH, loss_cfg, 5)
        c = ModelSnapshot.random_init(TINY_ARCH, loss_cfg, 6)
        assert a.same_weights(b) and not a.same_weights(c)


class TestSampling:
    def test_same_seed_same_image(self, tiny_f1, short_schedule):
        a = generate(tiny_f1, 3, 1, short_schedule, 1.5)
        b = generate(tiny_f1, 3, 1, short_schedule, 1.5)
        assert np.array_equal(a.x_hat, b.x_hat)
        assert a.x_hat.min() >= -1 and a.x_hat.max() <= 1

    def test_different_seed_differs(self, tiny_f1, short_schedule):
        a = generate(tiny_f1, 3, 1, short_schedule, 1.5)
        b = generate(tiny_f1, 4, 1, short_schedule, 1.5)
        assert not np.array_equal(a.x_hat, b.x_hat)

    def test_unit_guidance_equals_plain_conditional(self, tiny_f1, short_schedule):
        a = sample(tiny_f1, 2, 0, short_schedule, 1.0)
        b = sample(tiny_f1, 2, 0, short_schedule, None)
        assert np.array_equal(a, b)

    def test_cfg_on_unconditional_rejected(self, loss_cfg, short_schedule):
        arch = ArchConfig(enc_channels=4, width=32, num_blocks=1, embed_dim=32, cond_mode="none")
        snap = ModelSnapshot.random_init(arch, loss_cfg, 0).with_role("F1")
        with pytest.raises(ConfigError):
            generate(snap, 0, None, short_schedule, 2.0)
        assert generate(snap, 0, None, short_schedule).x_hat.shape == (3, 16, 16)

    def test_f0_cannot_generate(self, loss_cfg, short_schedule):
        with pytest.raises(ConfigError):
            generate(ModelSnapshot.random_init(TINY_ARCH, loss_cfg, 0), 0, 0, short_schedule)


class TestTraining:
    def test_shuffled_index_covers_epoch(self):
        idx = ShuffledIndex(10, torch.Generator().manual_seed(0))
        first = idx.take(10)
        assert sorted(first) == list(range(10))
        assert len(idx.take(25)) == 25

    def test_pretrain_reduces_loss_and_records_config(self, tiny_pretrain):
        early, late = np.mean(tiny_pretrain.losses[:5]), np.mean(tiny_pretrain.losses[-5:])
        assert late < early
        assert tiny_pretrain.f1.role == "F1"
        assert TrainConfig(**tiny_pretrain.f1.provenance["train"]).steps == 40

    def test_pretrain_deterministic(self, tiny_data, loss_cfg, tiny_f1):
        again = pretrain(tiny_data, TINY_ARCH, loss_cfg,
                         TrainConfig(steps=40, batch_size=16, lr=2e-3, warmup=5, ema=0.9, seed=3)).f1
        assert again.same_weights(tiny_f1)

    def test_pretrain_shape_mismatch(self, tiny_data, loss_cfg):
        from mucs.data import DatasetError
        with pytest.raises(DatasetError):
            pretrain(tiny_data, ArchConfig(input_shape=(3, 8, 8)), loss_cfg, TrainConfig(steps=1))

    def test_train_config_validation(self):
        with pytest.raises(ConfigError):
            TrainConfig(ema=1.0)
        assert math.isclose(TrainConfig().lr, 1e-3)
