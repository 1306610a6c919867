"""Training loop mechanics: alternation, determinism, checkpoints,
divergence handling and the finite-difference harness."""

import dataclasses
import hashlib
import os

import numpy as np
import pytest

import m3dgan.autodiff as ad
from m3dgan.datamodel import ContractError, LossWeights, lookup_task, micro
from m3dgan.model import DataDims
from m3dgan.synthdata import SequenceStyleSpec, ShapeStyleSpec, gen_colored_shapes, gen_sequence_styles
from m3dgan.trainer import (
    Adam,
    DivergedError,
    grad_check,
    init_state,
    load_checkpoint,
    objective_closures,
    objective_gradient_report,
    save_checkpoint,
    train,
    train_step,
)


@pytest.fixture(scope="module")
def shapes_ds():
    return gen_colored_shapes(ShapeStyleSpec(resolution=16, k_styles=2, n_examples=24, seed=1))


def micro_state(shapes_ds, seed=0, **cfg_overrides):
    cfg = dataclasses.replace(micro(seed=seed), **cfg_overrides)
    task = lookup_task("shapes→shapes")
    return init_state(task, cfg, DataDims.from_example(shapes_ds.examples[0])), cfg


def _hash_params(params):
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(params[name].data.tobytes())
    return h.hexdigest()


class TestTrainStep:
    def test_zeroed_paths_contribute_nothing(self, shapes_ds):
        state, cfg = micro_state(shapes_ds)
        state.weights = LossWeights(lambda_2=0.0, lambda_3=0.0)
        state, metrics = train_step(state, shapes_ds.examples[:2])
        assert metrics.losses.lat == 0.0
        assert metrics.losses.dist == 0.0
        assert metrics.losses.gan_g_sam == 0.0
        assert state.model.counters["t_sam"] == 0

    def test_both_paths_fire_when_weighted(self, shapes_ds):
        state, cfg = micro_state(shapes_ds)
        state, _ = train_step(state, shapes_ds.examples[:2])
        assert state.model.counters["t_enc"] == 1
        assert state.model.counters["t_sam"] == 1
        # real + 2x detached fakes for D, 2x live fakes for the generator side
        assert state.model.counters["d_calls"] == 5

    def test_same_seed_bitwise_identical(self, shapes_ds):
        runs = []
        for _ in range(2):
            state, _ = micro_state(shapes_ds, seed=4)
            for _ in range(3):
                idx = state.rng.integers(0, len(shapes_ds), size=state.cfg.batch_size)
                state, _ = train_step(state, [shapes_ds.examples[int(i)] for i in idx])
            runs.append(_hash_params(state.model.parameters()))
        assert runs[0] == runs[1]

    def test_discriminator_frozen_during_generator_substep(self, shapes_ds):
        state, _ = micro_state(shapes_ds)
        groups = state.model.param_groups()
        d_before = _hash_params(groups["discriminator"])
        g_before = _hash_params(groups["generator"])
        state, _ = train_step(state, shapes_ds.examples[:2])
        assert _hash_params(groups["discriminator"]) != d_before
        assert _hash_params(groups["generator"]) != g_before
        for p in state.model.parameters().values():
            assert p.requires_grad

    def test_empty_batch_rejected(self, shapes_ds):
        state, _ = micro_state(shapes_ds)
        with pytest.raises(ContractError):
            train_step(state, [])

    def test_modality_mismatch_rejected(self, shapes_ds):
        state, _ = micro_state(shapes_ds)
        seq_ds = gen_sequence_styles(SequenceStyleSpec(n_examples=4, seed=0, feat_dim=4))
        with pytest.raises(ContractError):
            train_step(state, seq_ds.examples[:2])

    def test_latents_share_dim_and_generator_entry(self, shapes_ds):
        state, cfg = micro_state(shapes_ds)
        state, _ = train_step(state, shapes_ds.examples[:2])
        from m3dgan.attention import sample_prior
        from m3dgan.evaluation import encode_reference_mu, generate_from_latents

        z_prior = sample_prior(cfg.latent_dim, np.random.default_rng(0), batch=1)
        mu, _ = encode_reference_mu(state, [shapes_ds.examples[0].reference])
        assert z_prior.values.shape[-1] == mu.shape[-1] == cfg.latent_dim
        a = generate_from_latents(state, [shapes_ds.examples[0].source], z_prior.values)
        b = generate_from_latents(state, [shapes_ds.examples[0].source], mu)
        assert a[0].shape == b[0].shape

    def test_generator_descends_with_frozen_discriminator(self, shapes_ds):
        # one G step at a healthy rate should reduce the generator total
        wins = 0
        for seed in range(10):
            state, _ = micro_state(shapes_ds, seed=seed, adam_lr=1e-3)
            batch = shapes_ds.examples[:2]
            g_clo, _, _ = objective_closures(state, batch)
            before = float(g_clo().data)
            state.model.discriminator.set_requires_grad(False)
            state.model.zero_grad()
            ad.backward(g_clo())
            state.opt_g.step()
            state.model.discriminator.set_requires_grad(True)
            after = float(g_clo().data)
            wins += after < before
        assert wins >= 8


class TestDivergence:
    def test_nonfinite_step_leaves_state_untouched(self, shapes_ds):
        state, _ = micro_state(shapes_ds)
        before = _hash_params(state.model.parameters())
        rng_before = state.rng.bit_generator.state["state"]["state"]
        # poison one generator weight so every loss is non-finite
        p = next(iter(state.model.param_groups()["generator"].values()))
        saved = p.data.copy()
        p.data = np.full_like(p.data, np.nan)
        state, metrics = train_step(state, shapes_ds.examples[:2])
        assert metrics.diverged
        assert state.diverged_streak == 1
        p.data = saved
        assert _hash_params(state.model.parameters()) == before
        assert state.rng.bit_generator.state["state"]["state"] == rng_before

    def test_streak_aborts_training(self, shapes_ds):
        state, cfg = micro_state(shapes_ds, diverged_patience=3, steps=50)
        p = next(iter(state.model.param_groups()["generator"].values()))
        p.data = np.full_like(p.data, np.nan)

        class _DS:
            examples = shapes_ds.examples
            task_name = "shapes→shapes"

        with pytest.raises(DivergedError):
            for _ in range(10):
                state, metrics = train_step(state, shapes_ds.examples[:2])
                if metrics.diverged and state.diverged_streak >= cfg.diverged_patience:
                    raise DivergedError("streak")


class TestCheckpointing:
    def test_roundtrip_restores_everything(self, shapes_ds, tmp_path):
        state, _ = micro_state(shapes_ds, seed=2)
        for _ in range(2):
            idx = state.rng.integers(0, len(shapes_ds), size=state.cfg.batch_size)
            state, _ = train_step(state, [shapes_ds.examples[int(i)] for i in idx])
        ck = tmp_path / "ck"
        save_checkpoint(state, ck)
        loaded = load_checkpoint(ck)
        assert _hash_params(loaded.model.parameters()) == _hash_params(state.model.parameters())
        assert loaded.step == state.step
        assert loaded.rng.bit_generator.state == state.rng.bit_generator.state
        assert loaded.opt_g.t == state.opt_g.t
        np.testing.assert_array_equal(
            loaded.opt_g.m["generator.head.w"], state.opt_g.m["generator.head.w"]
        )

    def test_manifest_lists_every_tensor_with_shape(self, shapes_ds, tmp_path):
        state, _ = micro_state(shapes_ds)
        ck = tmp_path / "ck"
        save_checkpoint(state, ck)
        lines = (ck / "manifest.txt").read_text().splitlines()
        files = {f[: -len(".m3dt")] for f in os.listdir(ck) if f.endswith(".m3dt")}
        names = {line.split(" ")[0] for line in lines}
        assert names == files
        sample = next(line for line in lines if line.startswith("param.generator.head.w "))
        assert "x" in sample.split(" ")[1]

    def test_resume_matches_uninterrupted_run(self, shapes_ds, tmp_path):
        cfg = dataclasses.replace(micro(seed=5), steps=6)
        full = train(cfg, shapes_ds, out_dir=tmp_path / "full")
        half_cfg = dataclasses.replace(cfg, steps=3)
        train(half_cfg, shapes_ds, out_dir=tmp_path / "half")
        # extend the interrupted run's budget, then resume
        from m3dgan.datamodel import save_config

        mid = tmp_path / "half" / "checkpoint-final"
        save_config(cfg, mid / "config.txt")
        resumed = train(None, shapes_ds, out_dir=tmp_path / "resumed", resume_from=mid)
        a, b = sorted(os.listdir(full)), sorted(os.listdir(resumed))
        assert a == b
        for f in a:
            assert (tmp_path / "full" / "checkpoint-final" / f).read_bytes() == (
                tmp_path / "resumed" / "checkpoint-final" / f
            ).read_bytes(), f

    def test_repeated_runs_identical_metrics(self, shapes_ds, tmp_path):
        cfg = dataclasses.replace(micro(seed=6), steps=4)
        outs = []
        for i in range(3):
            train(cfg, shapes_ds, out_dir=tmp_path / f"r{i}")
            outs.append((tmp_path / f"r{i}" / "metrics.csv").read_bytes())
        assert outs[0] == outs[1] == outs[2]


class TestGradCheckHarness:
    def test_quadratic_toy_loss_is_exact(self):
        p = ad.Tensor(np.random.default_rng(0).standard_normal(40), requires_grad=True)
        rep = grad_check(lambda: ad.tsum(ad.square(p)) * 0.5, {"p": p}, epsilon=1e-5)
        assert rep.max_rel_error < 1e-8

    def test_epsilon_must_be_positive(self):
        p = ad.Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError, match="epsilon"):
            grad_check(lambda: ad.tsum(p), {"p": p}, epsilon=0.0)

    def test_nonfinite_analytic_gradient_reported_with_index(self):
        p = ad.Tensor(np.array([1.0, 0.0, 2.0]), requires_grad=True)
        with np.errstate(divide="ignore"):
            with pytest.raises(ContractError, match="flat index"):
                grad_check(lambda: ad.tsum(ad.log(p)), {"p": p})

    def test_full_objective_micro_config_float64(self, shapes_ds):
        cfg = micro(seed=0)
        task = lookup_task("shapes→shapes")
        rep_g, rep_d, state = objective_gradient_report(
            task, cfg, shapes_ds.examples[:2], dtype=np.float64, epsilon=1e-5, n_coords=80, seed=3
        )
        assert state.model.num_params() <= 5000
        assert rep_g.max_rel_error < 1e-5
        assert rep_d.max_rel_error < 1e-5

    def test_full_objective_micro_config_float32_vs_float64_twin(self, shapes_ds):
        cfg = micro(seed=0)
        task = lookup_task("shapes→shapes")
        rep_g, rep_d, _ = objective_gradient_report(
            task, cfg, shapes_ds.examples[:2], dtype=np.float32, epsilon=1e-3, n_coords=60, seed=3
        )
        assert max(rep_g.max_rel_error, rep_d.max_rel_error) < 1e-3


class TestAdam:
    def test_single_step_matches_reference_formula(self):
        p = ad.Tensor(np.array([1.0, -2.0]), requires_grad=True)
        p.grad = np.array([0.5, -1.0])
        opt = Adam({"p": p}, lr=0.1, beta1=0.9, beta2=0.999)
        opt.step()
        m = 0.1 * np.array([0.5, -1.0])
        v = 0.001 * np.array([0.25, 1.0])
        mhat = m / (1 - 0.9)
        vhat = v / (1 - 0.999)
        want = np.array([1.0, -2.0]) - 0.1 * mhat / (np.sqrt(vhat) + 1e-8)
        np.testing.assert_allclose(p.data, want, rtol=1e-12)

    def test_skips_params_without_grad(self):
        p = ad.Tensor(np.ones(2), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1, beta1=0.9, beta2=0.999)
        opt.step()
        np.testing.assert_array_equal(p.data, 1.0)
