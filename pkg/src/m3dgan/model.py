"""Assembly of one translation model from the per-task pieces.

The unified layout is: frames (B, T, F) when the target is sequential,
a spatial map (B, C, H, W) when the target is an image.  Cross-layout
sources are bridged with small learned projections; an image source
feeding a sequential target contributes its rows as time steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .attention import AttentionEncoder, reparameterize
from .datamodel import ContractError, LatentCode, Modality, TaskSpec
from .subnets import (
    ConditionalDiscriminator,
    ImageGenerator,
    ImagePrenet,
    SequenceGenerator,
    SequencePrenet,
    TextPrenet,
    UnifiedRepr,
)


@dataclass(frozen=True)
class DataDims:
    """Array dimensions a model is built for; inferred from one example."""

    source_image_channels: int = 0
    target_image_channels: int = 0
    source_seq_feat: int = 0
    target_seq_feat: int = 0
    image_size: tuple = (0, 0)

    @staticmethod
    def from_example(ex):
        kw = {}
        for role, sample in (("source", ex.source), ("target", ex.target)):
            if sample.modality == Modality.IMAGE:
                kw[f"{role}_image_channels"] = sample.shape[0]
                kw["image_size"] = sample.shape[1:]
            elif sample.modality == Modality.SEQUENCE:
                kw[f"{role}_seq_feat"] = sample.shape[1]
        return DataDims(**kw)


def stack_samples(samples):
    """Stack equally shaped samples into one batch array."""
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ContractError(f"cannot batch mixed shapes {sorted(shapes)}")
    return np.stack([s.data for s in samples])


class TranslationModel(nn.Module):
    """Prenets + attention encoder + generator + discriminator for one task."""

    def __init__(self, task: TaskSpec, cfg, dims: DataDims, rng, dtype=np.float32):
        super().__init__()
        self.task = task
        self.cfg = cfg
        self.dims = dims
        self.dtype = dtype
        self.counters = {"t_enc": 0, "t_sam": 0, "d_calls": 0, "recover": 0}
        src, tgt = task.source_modality, task.target_modality

        # source prenet
        if src == Modality.IMAGE:
            self.prenet_src = ImagePrenet(dims.source_image_channels, cfg, rng, dtype=dtype)
            src_out = cfg.prenet_conv_channels[-1]
        elif src == Modality.SEQUENCE:
            self.prenet_src = SequencePrenet(dims.source_seq_feat, cfg, rng, dtype=dtype)
            src_out = self.prenet_src.out_dim
        else:
            self.prenet_src = TextPrenet(cfg, rng, dtype=dtype)
            src_out = self.prenet_src.out_dim

        # bridge into the target layout where source and target disagree
        self.repr_channels = cfg.prenet_conv_channels[-1]
        self.bridge = None
        if tgt == Modality.IMAGE and src != Modality.IMAGE:
            self.bridge = nn.Linear(src_out, self.repr_channels, rng, dtype=dtype)
            gen_in = self.repr_channels
        elif tgt != Modality.IMAGE and src == Modality.IMAGE:
            gen_in = src_out * dims.image_size[1]  # rows as steps, channels x width as features
        else:
            gen_in = src_out if tgt != Modality.IMAGE else self.repr_channels

        # reference pipeline (reference modality == target modality)
        self.ref_is_text = tgt == Modality.TEXT
        if self.ref_is_text:
            if cfg.weight_sharing == "per_modality" and src == Modality.TEXT:
                # alias the source prenet; bypass registration so parameters
                # are not listed (and hence updated) twice
                object.__setattr__(self, "prenet_ref_text", self.prenet_src)
            else:
                self.prenet_ref_text = TextPrenet(cfg, rng, dtype=dtype)
            self.ref_adapter = nn.Linear(self.prenet_ref_text.out_dim, cfg.ref_gru_units, rng, dtype=dtype)
            self.e_att = AttentionEncoder(1, 1, cfg, rng, build_encoder=False, dtype=dtype)
        elif tgt == Modality.IMAGE:
            self.e_att = AttentionEncoder(dims.target_image_channels, dims.image_size[1], cfg, rng, dtype=dtype)
        else:
            self.e_att = AttentionEncoder(1, dims.target_seq_feat, cfg, rng, dtype=dtype)
        if not cfg.recovery_through_utl:
            self.recovery_head = nn.Linear(cfg.ref_gru_units, cfg.latent_dim, rng, dtype=dtype)

        # generator
        if tgt == Modality.IMAGE:
            self.generator = ImageGenerator(gen_in, cfg, rng, dtype=dtype)
        elif tgt == Modality.SEQUENCE:
            self.generator = SequenceGenerator(gen_in, dims.target_seq_feat, cfg, rng, dtype=dtype)
        else:
            self.generator = SequenceGenerator(gen_in, cfg.vocab_size, cfg, rng, text_target=True, dtype=dtype)

        # conditional discriminator
        src_dim = {Modality.IMAGE: dims.source_image_channels, Modality.SEQUENCE: dims.source_seq_feat, Modality.TEXT: 0}[src]
        tgt_dim = {Modality.IMAGE: dims.target_image_channels, Modality.SEQUENCE: dims.target_seq_feat, Modality.TEXT: cfg.vocab_size}[tgt]
        self.discriminator = ConditionalDiscriminator(src, tgt, src_dim, tgt_dim, cfg, rng, dtype=dtype)

    # ------------------------------------------------------------------
    def param_groups(self):
        """Named parameter groups: prenets, attention encoder, generator, discriminator."""
        all_params = self.parameters()
        groups = {"prenets": {}, "e_att": {}, "generator": {}, "discriminator": {}}
        for name, p in all_params.items():
            if name.startswith("discriminator."):
                groups["discriminator"][name] = p
            elif name.startswith("e_att."):
                groups["e_att"][name] = p
            elif name.startswith("generator."):
                groups["generator"][name] = p
            else:
                groups["prenets"][name] = p
        return groups

    def _as_batch(self, samples, modality):
        if modality == Modality.TEXT:
            return stack_samples(samples)
        arr = stack_samples(samples).astype(self.dtype)
        return arr

    def unify_source(self, sources):
        """Source samples -> unified representation in the target layout."""
        src, tgt = self.task.source_modality, self.task.target_modality
        batch = self._as_batch(sources, src)
        if src == Modality.TEXT:
            repr_ = self.prenet_src(batch)
        else:
            repr_ = self.prenet_src(ad.as_tensor(batch))
        x = repr_.tensor
        if tgt == Modality.IMAGE:
            if src == Modality.IMAGE:
                return repr_
            h, w = self.dims.image_size
            vec = self.bridge(ad.tmean(x, axis=1))
            b, c = vec.shape
            spread = ad.broadcast_to(ad.reshape(vec, (b, c, 1, 1)), (b, c, h, w))
            return UnifiedRepr(src, spread, "spatial")
        if src == Modality.IMAGE:
            b, c, h, w = x.shape
            frames = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, h, c * w))
            return UnifiedRepr(src, frames, "frames")
        return repr_

    def _ref_conv_input(self, batch):
        """Reference batch -> (B, C, T, F) for the conv encoder."""
        if self.task.target_modality == Modality.IMAGE:
            return ad.as_tensor(batch)
        b, t, f = batch.shape
        return ad.reshape(ad.as_tensor(batch), (b, 1, t, f))

    def encode_reference(self, references, rng=None):
        """Reference samples -> (GaussianLatent, attention weights, pre-token Gaussian)."""
        tgt = self.task.target_modality
        batch = self._as_batch(references, tgt)
        if self.ref_is_text:
            emb = self.ref_adapter(self.prenet_ref_text.global_embedding(batch))
            return self.e_att.encode_from_embedding(emb, rng)
        return self.e_att.encode(self._ref_conv_input(batch), rng)

    def generate(self, s_repr: UnifiedRepr, z, teacher_ids=None, origin_counter=None, out_len=None):
        """Unified source + latent -> generated target tensor."""
        if isinstance(z, LatentCode):
            z = z.node if z.node is not None else ad.as_tensor(z.values.astype(self.dtype))
        if origin_counter:
            self.counters[origin_counter] += 1
        if self.task.target_modality == Modality.IMAGE:
            return self.generator(s_repr.tensor, z)
        if self.task.target_modality == Modality.TEXT:
            return self.generator(s_repr.tensor, z, teacher_ids=teacher_ids, out_len=out_len)
        return self.generator(s_repr.tensor, z)

    def recover_latent(self, generated, rng=None):
        """Encode a generated target back to a latent estimate.

        Routes through the full attention encoder and takes mu by default;
        config flags switch to a direct head off the reference embedding
        or to a reparameterized draw.
        """
        self.counters["recover"] += 1
        tgt = self.task.target_modality
        if tgt == Modality.TEXT:
            soft = ad.softmax(generated, axis=-1)
            frames = self.prenet_ref_text.forward_soft(soft).tensor
            emb = self.ref_adapter(ad.tmean(frames, axis=1))
        elif tgt == Modality.IMAGE:
            emb = self.e_att.encoder(generated)
        else:
            b, t, f = generated.shape
            emb = self.e_att.encoder(ad.reshape(generated, (b, 1, t, f)))
        if not self.cfg.recovery_through_utl:
            return self.recovery_head(emb)
        g, _, _ = self.e_att.encode_from_embedding(emb, rng)
        if self.cfg.latent_recovery_use_mu or rng is None:
            return g.mu
        return reparameterize(g, rng)

    def discriminate_batch(self, sources, target_tensor):
        """Raw source samples + target tensor -> logits (B, 1)."""
        self.counters["d_calls"] += 1
        src = self.task.source_modality
        batch = self._as_batch(sources, src)
        if self.task.target_modality == Modality.TEXT:
            t = target_tensor
            if not isinstance(t, ad.Tensor) or t.data.dtype.kind in "iu":
                t = self._one_hot(np.asarray(t.data if isinstance(t, ad.Tensor) else t))
            return self.discriminator(batch, t)
        return self.discriminator(batch, target_tensor)

    def _one_hot(self, ids):
        eye = np.eye(self.cfg.vocab_size, dtype=self.dtype)
        return ad.as_tensor(eye[ids])

    def disc_fake_input(self, gen_out):
        """Generated output as loss input; text logits become distributions."""
        if self.task.target_modality == Modality.TEXT:
            return ad.softmax(gen_out, axis=-1)
        return gen_out

    def target_tensor_from_samples(self, targets):
        """Ground-truth targets as the tensor layout the generator emits."""
        batch = self._as_batch(targets, self.task.target_modality)
        if self.task.target_modality == Modality.TEXT:
            return self._one_hot(batch)
        return ad.as_tensor(batch)
