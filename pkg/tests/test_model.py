"""Cross-modal model assembly: every task wiring runs a training step."""

import dataclasses

import numpy as np
import pytest

from m3dgan.datamodel import Modality, PairedExample, Sample, lookup_task, micro
from m3dgan.model import DataDims, TranslationModel, stack_samples
from m3dgan.synthdata import (
    CaptionImageSpec,
    SequenceStyleSpec,
    ShapeStyleSpec,
    gen_colored_shapes,
    gen_sequence_styles,
    gen_toy_captions,
)
from m3dgan.trainer import init_state, train_step


def _text(ids):
    return Sample(Modality.TEXT, np.asarray(ids, dtype=np.int32))


def _seq(t, f, seed=0):
    return Sample(Modality.SEQUENCE, np.random.default_rng(seed).standard_normal((t, f)).astype(np.float32))


def _img(c=3, hw=16, value=0.5):
    return Sample(Modality.IMAGE, np.full((c, hw, hw), value, dtype=np.float32))


def _step_ok(task_name, examples):
    cfg = micro(seed=0)
    task = lookup_task(task_name)
    state = init_state(task, cfg, DataDims.from_example(examples[0]))
    state, metrics = train_step(state, examples)
    assert not metrics.diverged
    for v in metrics.losses.csv_values():
        assert np.isfinite(v)
    return state, metrics


class TestTaskWirings:
    def test_image_to_image(self):
        ds = gen_colored_shapes(ShapeStyleSpec(resolution=16, k_styles=2, n_examples=4, seed=0))
        _step_ok("shapes→shapes", ds.examples[:2])

    def test_text_to_image(self):
        ds = gen_toy_captions(CaptionImageSpec(resolution=16, n_examples=4, seed=0))
        _step_ok("captions→shapes", ds.examples[:2])

    def test_sequence_to_sequence(self):
        ds = gen_sequence_styles(SequenceStyleSpec(n_examples=4, feat_dim=6, min_len=5, max_len=5, seed=0))
        _step_ok("waves→waves", ds.examples[:2])

    def test_text_to_sequence(self):
        exs = [PairedExample(_text([1, 2, 3]), _seq(3, 6, i), _seq(3, 6, i)) for i in range(2)]
        _step_ok("text→speech", exs)

    def test_sequence_to_text_mismatched_lengths(self):
        exs = [PairedExample(_seq(5, 6, i), _text([1, 2, 3]), _text([1, 2, 3])) for i in range(2)]
        _step_ok("speech→text", exs)

    def test_text_to_text(self):
        exs = [PairedExample(_text([1, 2, 3]), _text([4, 5, 6]), _text([4, 5, 6])) for i in range(2)]
        _step_ok("text→text", exs)

    def test_image_to_text(self):
        exs = [PairedExample(_img(3, 16, 0.1 * i), _text([1, 2, 3, 4]), _text([1, 2, 3, 4])) for i in range(2)]
        _step_ok("image→text", exs)


class TestSharingPolicy:
    def test_text_ref_prenet_shared_per_modality(self):
        cfg = micro(seed=0)
        task = lookup_task("text→text")
        exs = [PairedExample(_text([1, 2]), _text([3, 4]), _text([3, 4]))]
        model = TranslationModel(task, cfg, DataDims.from_example(exs[0]), np.random.default_rng(0))
        assert model.prenet_ref_text is model.prenet_src
        # shared module's parameters are not double-registered
        names = list(model.parameters())
        assert len(names) == len(set(names))
        assert not any(n.startswith("prenet_ref_text.") for n in names)

    def test_per_task_policy_builds_separate_prenets(self):
        cfg = dataclasses.replace(micro(seed=0), weight_sharing="per_task")
        task = lookup_task("text→text")
        exs = [PairedExample(_text([1, 2]), _text([3, 4]), _text([3, 4]))]
        model = TranslationModel(task, cfg, DataDims.from_example(exs[0]), np.random.default_rng(0))
        assert model.prenet_ref_text is not model.prenet_src


class TestRecoveryRouting:
    def test_direct_recovery_head_when_flagged(self):
        cfg = dataclasses.replace(micro(seed=0), recovery_through_utl=False)
        ds = gen_colored_shapes(ShapeStyleSpec(resolution=16, k_styles=2, n_examples=4, seed=0))
        task = lookup_task("shapes→shapes")
        state = init_state(task, cfg, DataDims.from_example(ds.examples[0]))
        assert any(n.startswith("recovery_head.") for n in state.model.parameters())
        state, metrics = train_step(state, ds.examples[:2])
        assert not metrics.diverged


class TestBatching:
    def test_stack_requires_equal_shapes(self):
        with pytest.raises(Exception, match="mixed shapes"):
            stack_samples([_text([1, 2]), _text([1, 2, 3])])

    def test_dims_from_example(self):
        ds = gen_toy_captions(CaptionImageSpec(resolution=16, n_examples=2, seed=0))
        dims = DataDims.from_example(ds.examples[0])
        assert dims.target_image_channels == 3
        assert dims.image_size == (16, 16)
        assert dims.source_seq_feat == 0
