"""Value types, config validation, presets and the task registry."""

import dataclasses

import numpy as np
import pytest

from m3dgan.datamodel import (
    ARROW,
    ContractError,
    LatentCode,
    LatentOrigin,
    LossWeights,
    Modality,
    ModelConfig,
    PairedExample,
    ReferencePolicy,
    Sample,
    desk,
    load_config,
    lookup_task,
    micro,
    paper_faithful,
    save_config,
    task_registry,
    validate_config,
)


class TestSample:
    def test_image_range_enforced(self):
        with pytest.raises(ContractError, match=r"\[-1, 1\]"):
            Sample(Modality.IMAGE, np.full((3, 4, 4), 2.0))

    def test_image_needs_chw(self):
        with pytest.raises(ContractError):
            Sample(Modality.IMAGE, np.zeros((4, 4)))

    def test_text_needs_int_ids(self):
        with pytest.raises(ContractError):
            Sample(Modality.TEXT, np.array([0.5, 1.5]))
        with pytest.raises(ContractError):
            Sample(Modality.TEXT, np.array([-1, 2]))

    def test_sequence_needs_frames(self):
        with pytest.raises(ContractError):
            Sample(Modality.SEQUENCE, np.zeros((0, 4)))

    def test_non_finite_rejected(self):
        with pytest.raises(ContractError):
            Sample(Modality.SEQUENCE, np.array([[np.nan, 1.0]]))

    def test_data_is_immutable(self):
        s = Sample(Modality.SEQUENCE, np.ones((2, 3)))
        with pytest.raises(ValueError):
            s.data[0, 0] = 5.0

    def test_reference_must_share_target_modality(self):
        img = Sample(Modality.IMAGE, np.zeros((3, 4, 4)))
        seq = Sample(Modality.SEQUENCE, np.ones((2, 3)))
        with pytest.raises(ContractError):
            PairedExample(img, img, seq)


class TestLatentCode:
    def test_finite_required(self):
        with pytest.raises(ContractError):
            LatentCode(np.array([np.inf, 0.0]), LatentOrigin.SAMPLED_PRIOR)

    def test_dim(self):
        z = LatentCode(np.zeros((5, 8)), LatentOrigin.ENCODED_REFERENCE)
        assert z.dim == 8


class TestConfigValidation:
    def test_paper_preset_is_valid_and_matches_sizes(self):
        cfg = paper_faithful()
        assert validate_config(cfg) == []
        assert cfg.n_tokens == 10
        assert cfg.ref_gru_units == 128
        assert cfg.ref_encoder_channels == (64, 64, 128, 128)
        assert cfg.prenet_conv_channels == (32, 32)
        assert cfg.conv1d_bank_size == 16
        assert cfg.generator_gru_units == 256
        assert len(cfg.image_gen_channels) == 6
        assert cfg.char_embed_dim == 128
        assert cfg.text_fc_units == (256, 128)

    def test_paper_image_task_batch_one(self):
        assert paper_faithful("image" + ARROW + "image").batch_size == 1
        assert paper_faithful("image" + ARROW + "image").epochs == 30
        assert paper_faithful("text" + ARROW + "speech").batch_size == 32

    def test_desk_and_micro_presets_valid(self):
        assert validate_config(desk()) == []
        assert validate_config(micro()) == []

    def test_zero_latent_dim_reported(self):
        errs = validate_config(dataclasses.replace(desk(), latent_dim=0))
        assert any("latent_dim" in e and ">= 1" in e for e in errs)

    def test_negative_lambda_reported_on_loss_weights(self):
        bad = dataclasses.replace(desk(), loss_weights=LossWeights(lambda_kl=-0.5))
        errs = validate_config(bad)
        assert any("LossWeights.lambda_kl" in e for e in errs)

    def test_heads_must_divide_token_dim(self):
        errs = validate_config(dataclasses.replace(desk(), n_heads=3))
        assert any("divisible" in e for e in errs)

    def test_every_violation_listed(self):
        bad = dataclasses.replace(desk(), latent_dim=0, n_tokens=0, adam_lr=-1.0)
        errs = validate_config(bad)
        assert len(errs) >= 3


class TestConfigFile:
    def test_roundtrip(self, tmp_path):
        cfg = dataclasses.replace(
            desk(seed=9),
            loss_weights=LossWeights(lambda_rec=3.5, lambda_3=0.25),
            rec_norm="l2",
            use_token_layer=False,
        )
        path = tmp_path / "cfg.txt"
        save_config(cfg, path)
        assert load_config(path) == cfg

    def test_flat_keys_mirror_field_names(self, tmp_path):
        path = tmp_path / "cfg.txt"
        save_config(desk(), path)
        keys = {line.split("=")[0].strip() for line in path.read_text().splitlines() if line.strip()}
        field_names = {f.name for f in dataclasses.fields(ModelConfig) if f.name != "loss_weights"}
        weight_names = {f.name for f in dataclasses.fields(LossWeights)}
        assert keys == field_names | weight_names

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "cfg.txt"
        path.write_text("latent_dim = 4\nbogus_knob = 1\n")
        with pytest.raises(ValueError, match="bogus_knob"):
            load_config(path)


class TestTaskRegistry:
    def test_six_bench_tasks_present(self):
        names = {t.name for t in task_registry()}
        for want in ("image→image", "text→image", "image→text", "text→speech", "speech→text", "text→text"):
            assert want in names

    def test_inference_flag_pattern(self):
        flags = {t.name: (t.t_enc, t.t_sam) for t in task_registry()}
        assert flags["image→image"] == (True, True)
        assert flags["text→image"] == (False, True)
        assert flags["image→text"] == (False, True)
        assert flags["text→speech"] == (True, True)
        assert flags["speech→text"] == (False, True)
        assert flags["text→text"] == (False, True)

    def test_image_to_image_reference_policies(self):
        t = lookup_task("image→image")
        assert t.train_reference_policy == ReferencePolicy.GROUND_TRUTH_TARGET
        assert t.test_reference_policy == ReferencePolicy.RANDOM_TARGET_SAMPLE

    def test_no_reference_at_test_implies_no_t_enc(self):
        for t in task_registry():
            if t.test_reference_policy == ReferencePolicy.NONE:
                assert not t.t_enc

    def test_ground_truth_reference_during_training_everywhere(self):
        for t in task_registry():
            assert t.train_reference_policy == ReferencePolicy.GROUND_TRUTH_TARGET

    def test_unknown_task_rejected(self):
        with pytest.raises(ContractError, match="unknown task"):
            lookup_task("audio→smell")

    def test_ascii_arrow_alias(self):
        assert lookup_task("text->image").name == "text→image"
