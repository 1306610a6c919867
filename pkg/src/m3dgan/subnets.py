"""Modality subnets: prenets into the unified representation, generators
back out of it, and the conditional discriminator.

Prenets map raw samples to either feature frames (B, T, F) or a spatial
map (B, C, H, W).  Generators consume a unified representation plus a
latent style code; the sequence generator replicates the single code at
every time step, the image generator injects it at the bottleneck
(spatially broadcast) or at the input, per config.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .datamodel import ContractError, Modality


@dataclass
class UnifiedRepr:
    """Prenet output: frames or a spatial map, tagged with its origin."""

    modality: Modality
    tensor: Tensor
    kind: str  # "frames" (B, T, F) or "spatial" (B, C, H, W)


@dataclass
class DiscriminatorScore:
    logit: float

    @property
    def prob(self):
        return float(1.0 / (1.0 + np.exp(-self.logit)))


class ImagePrenet(nn.Module):
    """Two stride-1 conv layers; spatial resolution is preserved."""

    def __init__(self, in_channels, cfg, rng, dtype=np.float32):
        super().__init__()
        convs = []
        c = in_channels
        for ch in cfg.prenet_conv_channels:
            convs.append(nn.Conv2d(c, ch, 3, rng, stride=(1, 1), padding=(1, 1), dtype=dtype))
            c = ch
        self.convs = convs
        self.out_channels = c

    def __call__(self, x):
        for conv in self.convs:
            x = ad.relu(conv(x))
        return UnifiedRepr(Modality.IMAGE, x, "spatial")


class SequencePrenet(nn.Module):
    """Conv stack over (T, F) frames; the time axis is never strided."""

    def __init__(self, feat_dim, cfg, rng, dtype=np.float32):
        super().__init__()
        convs = []
        c = 1
        for ch in cfg.prenet_conv_channels:
            convs.append(nn.Conv2d(c, ch, 3, rng, stride=(1, 1), padding=(1, 1), dtype=dtype))
            c = ch
        self.convs = convs
        self.out_dim = c * feat_dim

    def __call__(self, x):
        """x: (B, T, F) -> frames (B, T, channels * F)."""
        b, t, f = x.shape
        if t < 1:
            raise ContractError("sequence prenet needs at least one frame")
        y = ad.reshape(x, (b, 1, t, f))
        for conv in self.convs:
            y = ad.relu(conv(y))
        c = y.shape[1]
        return UnifiedRepr(Modality.SEQUENCE, ad.reshape(ad.transpose(y, (0, 2, 1, 3)), (b, t, c * f)), "frames")


class TextPrenet(nn.Module):
    """Character pipeline: embedding, bottleneck FCs, a width-1..K conv
    bank with residual connection, post FCs, bidirectional GRU."""

    def __init__(self, cfg, rng, dtype=np.float32):
        super().__init__()
        self.embed = nn.Embedding(cfg.vocab_size, cfg.char_embed_dim, rng, dtype=dtype)
        fcs = []
        d = cfg.char_embed_dim
        for units in cfg.text_fc_units:
            fcs.append(nn.Linear(d, units, rng, dtype=dtype))
            d = units
        self.fcs = fcs
        self.bank = [nn.Conv1d(d, cfg.conv1d_bank_units, w, rng, dtype=dtype) for w in range(1, cfg.conv1d_bank_size + 1)]
        self.bank_proj = nn.Conv1d(cfg.conv1d_bank_size * cfg.conv1d_bank_units, d, 3, rng, dtype=dtype)
        post = []
        p = d
        for units in cfg.text_post_fc_units:
            post.append(nn.Linear(p, units, rng, dtype=dtype))
            p = units
        self.post = post
        self.bigru = nn.BiGRU(p, cfg.text_bigru_units, rng, dtype=dtype)
        self.out_dim = 2 * cfg.text_bigru_units

    def _pipeline(self, x):
        for fc in self.fcs:
            x = ad.relu(fc(x))
        ch = ad.transpose(x, (0, 2, 1))
        bank_out = ad.concat([ad.relu(conv(ch)) for conv in self.bank], axis=1)
        proj = ad.transpose(self.bank_proj(bank_out), (0, 2, 1))
        x = x + proj
        for fc in self.post:
            x = ad.relu(fc(x))
        return UnifiedRepr(Modality.TEXT, self.bigru(x), "frames")

    def __call__(self, ids):
        """ids: (B, L) int array -> frames (B, L, 2 * bigru units)."""
        ids = np.asarray(ids)
        if ids.ndim != 2 or ids.shape[1] < 1:
            raise ContractError("text prenet needs a non-empty (B, L) id array")
        return self._pipeline(self.embed(ids))

    def forward_soft(self, probs):
        """Per-step vocabulary distributions instead of hard ids."""
        return self._pipeline(probs @ self.embed.w)

    def global_embedding(self, ids):
        """Mean over time of the prenet frames: one vector per text."""
        frames = self(ids).tensor
        return ad.tmean(frames, axis=1)


def replicate_latent(z, t):
    """Tile a (B, D) latent so the same vector rides along every step."""
    b, d = z.shape
    return ad.broadcast_to(ad.reshape(z, (b, 1, d)), (b, t, d))


class SequenceGenerator(nn.Module):
    """Recurrent generator for sequence and text targets.

    The latent is replicated T times and concatenated to the source
    frames.  A two-layer residual GRU with content-based attention over
    the source frames feeds a decoder GRU; the head emits real frames for
    sequence targets or per-step character logits for text targets.
    """

    def __init__(self, in_dim, out_dim, cfg, rng, text_target=False, dtype=np.float32):
        super().__init__()
        u = cfg.generator_gru_units
        self.text_target = text_target
        self.latent_dim = cfg.latent_dim
        self.gru1 = nn.GRU(in_dim + cfg.latent_dim, u, rng, dtype=dtype)
        self.att_q = nn.Linear(u, u, rng, bias=False, dtype=dtype)
        self.att_k = nn.Linear(in_dim, u, rng, bias=False, dtype=dtype)
        self.gru2 = nn.GRU(u + in_dim, u, rng, dtype=dtype)
        dec_in = u
        if text_target:
            self.prev_embed = nn.Embedding(cfg.vocab_size, cfg.char_embed_dim, rng, dtype=dtype)
            dec_in += cfg.char_embed_dim
        self.decoder = nn.GRU(dec_in, u, rng, dtype=dtype)
        self.head = nn.Linear(u, out_dim, rng, dtype=dtype)
        self.out_dim = out_dim
        self.scale = 1.0 / np.sqrt(u)

    def _body(self, s, z):
        b, t, f = s.shape
        if t < 1:
            raise ContractError("sequence generator needs a non-empty source")
        if z.shape[-1] != self.latent_dim:
            raise ContractError(f"latent dim {z.shape[-1]} != configured {self.latent_dim}")
        x = ad.concat([s, replicate_latent(z, t)], axis=2)
        h1, _ = self.gru1(x)
        q = self.att_q(h1)
        k = self.att_k(s)
        att = ad.softmax((q @ ad.transpose(k, (0, 2, 1))) * self.scale, axis=-1)
        ctx = att @ s
        h2, _ = self.gru2(ad.concat([h1, ctx], axis=2))
        return h1 + h2

    @staticmethod
    def _resample_steps(h, out_len):
        """Index-map recurrent states onto a different decode length."""
        t = h.shape[1]
        if out_len == t:
            return h
        pos = [min(i * t // out_len, t - 1) for i in range(out_len)]
        return ad.concat([h[:, p : p + 1, :] for p in pos], axis=1)

    def __call__(self, s, z, teacher_ids=None, out_len=None):
        """Sequence targets -> (B, T, out_dim) frames.

        Text targets return per-step logits (B, L, vocab) where L is the
        teacher length at training (shifted ground truth as input) or
        ``out_len`` (default: source length) for greedy inference.
        """
        h = self._body(s, z)
        if not self.text_target:
            return self.head(self.decoder(h)[0])
        b = h.shape[0]
        length = np.asarray(teacher_ids).shape[1] if teacher_ids is not None else (out_len or h.shape[1])
        h = self._resample_steps(h, length)
        if teacher_ids is not None:
            prev = np.concatenate([np.zeros((b, 1), dtype=np.int64), np.asarray(teacher_ids)[:, : length - 1]], axis=1)
            dec_in = ad.concat([h, self.prev_embed(prev)], axis=2)
            return self.head(self.decoder(dec_in)[0])
        # greedy decode
        logits = []
        prev = np.zeros((b,), dtype=np.int64)
        state = ad.as_tensor(np.zeros((b, self.decoder.n_hidden), dtype=h.dtype))
        for i in range(length):
            step_in = ad.concat([h[:, i, :], self.prev_embed(prev)], axis=1)
            state = self.decoder.step(step_in, state)
            lg = self.head(state)
            logits.append(ad.reshape(lg, (b, 1, self.out_dim)))
            prev = np.argmax(lg.data, axis=-1)
        return ad.concat(logits, axis=1)


class ResBlockDown(nn.Module):
    """conv/norm/relu twice with a (possibly strided, 1x1-projected) skip."""

    def __init__(self, c_in, c_out, stride, rng, dtype=np.float32):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, rng, stride=(stride, stride), padding=(1, 1), dtype=dtype)
        self.norm1 = nn.InstanceNorm2d(c_out, dtype=dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng, stride=(1, 1), padding=(1, 1), dtype=dtype)
        self.norm2 = nn.InstanceNorm2d(c_out, dtype=dtype)
        self.skip = None
        if c_in != c_out or stride != 1:
            self.skip = nn.Conv2d(c_in, c_out, 1, rng, stride=(stride, stride), padding=(0, 0), bias=False, dtype=dtype)

    def __call__(self, x):
        y = ad.relu(self.norm1(self.conv1(x)))
        y = ad.relu(self.norm2(self.conv2(y)))
        return y + (self.skip(x) if self.skip is not None else x)


class ResBlockUp(nn.Module):
    """Transposed-conv residual block for the decode path.

    Uses pixel norm instead of instance norm: a flat color plane (exactly
    what the injected style code produces) has zero spatial variance, so
    instance norm would erase it, while pixel norm keeps the channel
    direction and still bounds activations.
    """

    def __init__(self, c_in, c_out, stride, rng, dtype=np.float32):
        super().__init__()
        op = (stride - 1, stride - 1)
        self.conv1 = nn.ConvTranspose2d(c_in, c_out, 3, rng, stride=(stride, stride), padding=(1, 1), output_padding=op, dtype=dtype)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, rng, stride=(1, 1), padding=(1, 1), dtype=dtype)
        self.skip = None
        if c_in != c_out or stride != 1:
            self.skip = nn.ConvTranspose2d(c_in, c_out, 1, rng, stride=(stride, stride), padding=(0, 0), output_padding=op, bias=False, dtype=dtype)

    def __call__(self, x):
        y = ad.relu(nn.pixel_norm(self.conv1(x)))
        y = ad.relu(nn.pixel_norm(self.conv2(y)))
        return y + (self.skip(x) if self.skip is not None else x)


class ImageGenerator(nn.Module):
    """Residual conv compressor + residual deconv decoder, tanh RGB output.

    Output resolution equals the source resolution: the up stack mirrors
    the down stack's stride plan exactly.
    """

    def __init__(self, in_channels, cfg, rng, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        chans = cfg.image_gen_channels
        strides = cfg.image_down_strides
        self.inject_input = cfg.z_inject == "input"
        entry_in = in_channels + (cfg.latent_dim if self.inject_input else 0)
        self.entry = nn.Conv2d(entry_in, chans[0], 3, rng, padding=(1, 1), dtype=dtype)
        self.down = [ResBlockDown(chans[max(i - 1, 0)], chans[i], strides[i], rng, dtype=dtype) for i in range(len(chans))]
        merge_in = chans[-1] + (0 if self.inject_input else cfg.latent_dim)
        self.merge = nn.Conv2d(merge_in, chans[-1], 3, rng, padding=(1, 1), dtype=dtype)
        rev_out = [chans[max(i - 1, 0)] for i in range(len(chans))]
        self.up = [ResBlockUp(chans[i], rev_out[i], strides[i], rng, dtype=dtype) for i in reversed(range(len(chans)))]
        self.head = nn.Conv2d(chans[0], 3, 3, rng, padding=(1, 1), dtype=dtype)
        self.latent_dim = cfg.latent_dim

    @staticmethod
    def _spread(z, h, w):
        b, d = z.shape
        return ad.broadcast_to(ad.reshape(z, (b, d, 1, 1)), (b, d, h, w))

    def __call__(self, s, z):
        if z.shape[-1] != self.latent_dim:
            raise ContractError(f"latent dim {z.shape[-1]} != configured {self.latent_dim}")
        x = s
        if self.inject_input:
            x = ad.concat([x, self._spread(z, x.shape[2], x.shape[3])], axis=1)
        x = ad.relu(self.entry(x))
        for block in self.down:
            x = block(x)
        if not self.inject_input:
            x = ad.concat([x, self._spread(z, x.shape[2], x.shape[3])], axis=1)
        x = ad.relu(self.merge(x))
        for block in self.up:
            x = block(x)
        return ad.tanh(self.head(x))


class ConditionalDiscriminator(nn.Module):
    """Scores a (source, target) pair with a single logit.

    The source is folded in as extra channels/features: images are
    channel-concatenated, sequences frame-concatenated, text reduced to a
    mean embedding and broadcast.  Architecture mirrors the prenets:
    strided 2-D convs for image targets, width-3 1-D convs for frames,
    leaky-relu activations, global average pool, linear head.
    """

    def __init__(self, source_modality, target_modality, source_dim, target_dim, cfg, rng, dtype=np.float32):
        super().__init__()
        self.source_modality = source_modality
        self.target_modality = target_modality
        same_layout = (source_modality == target_modality == Modality.IMAGE) or (
            source_modality == target_modality == Modality.SEQUENCE
        )
        if source_modality == Modality.TEXT:
            self.src_embed = nn.Embedding(cfg.vocab_size, cfg.char_embed_dim, rng, dtype=dtype)
            self.src_proj = nn.Linear(cfg.char_embed_dim, cfg.disc_cond_channels, rng, dtype=dtype)
            src_feat = cfg.disc_cond_channels
        elif same_layout:
            self.src_proj = None
            src_feat = source_dim
        else:
            self.src_proj = nn.Linear(source_dim, cfg.disc_cond_channels, rng, dtype=dtype)
            src_feat = cfg.disc_cond_channels
        convs = []
        c = target_dim + src_feat
        for ch in cfg.disc_channels:
            if target_modality == Modality.IMAGE:
                convs.append(nn.Conv2d(c, ch, 4, rng, stride=(2, 2), padding=(1, 1), dtype=dtype))
            else:
                convs.append(nn.Conv1d(c, ch, 3, rng, dtype=dtype))
            c = ch
        self.convs = convs
        self.head = nn.Linear(cfg.disc_channels[-1], 1, rng, dtype=dtype)

    def _source_features(self, src):
        """Reduce a cross-layout source to one conditioning vector per example."""
        if self.source_modality == Modality.TEXT:
            emb = self.src_embed(np.asarray(src))
            return self.src_proj(ad.tmean(emb, axis=1))
        if self.source_modality == Modality.IMAGE:
            src = ad.as_tensor(src)
            b = src.shape[0]
            return self.src_proj(ad.tmean(ad.reshape(src, (b, src.shape[1], -1)), axis=2))
        return self.src_proj(ad.tmean(ad.as_tensor(src), axis=1))

    def __call__(self, src, tgt):
        """src/tgt: batched arrays or tensors -> logits (B, 1).

        Text targets must arrive as float frames over the vocabulary
        (one-hot for real data, per-step distributions for generated).
        """
        tgt = ad.as_tensor(tgt)
        if self.target_modality == Modality.IMAGE:
            b, _, h, w = tgt.shape
            if self.source_modality == Modality.IMAGE:
                cond = ad.as_tensor(src)
                if cond.shape[2] != h or cond.shape[3] != w:
                    raise ContractError("conditional discriminator needs matching resolutions")
            else:
                vec = self._source_features(src)
                cond = ad.broadcast_to(ad.reshape(vec, (b, vec.shape[1], 1, 1)), (b, vec.shape[1], h, w))
            x = ad.concat([tgt, cond], axis=1)
            for conv in self.convs:
                x = ad.leaky_relu(conv(x), 0.2)
            pooled = ad.tmean(ad.reshape(x, (b, x.shape[1], -1)), axis=2)
        else:
            b, t, _ = tgt.shape
            if self.src_proj is None:
                cond = ad.as_tensor(src)
                if cond.shape[1] != t:
                    raise ContractError("sequence source and target must share a time length")
            else:
                vec = self._source_features(src)
                cond = ad.broadcast_to(ad.reshape(vec, (b, 1, vec.shape[1])), (b, t, vec.shape[1]))
            x = ad.transpose(ad.concat([tgt, cond], axis=2), (0, 2, 1))
            for conv in self.convs:
                x = ad.leaky_relu(conv(x), 0.2)
            pooled = ad.tmean(x, axis=2)
        return self.head(pooled)
