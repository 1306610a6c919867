"""Reference-conditioned style encoding.

A reference sample is compressed by a conv+GRU encoder into a fixed-length
embedding, which queries a small global bank of learned token embeddings
through multihead attention.  The resulting convex combination (the
"domain embedding") is projected to a diagonal Gaussian over the latent
space, from which the style code ``z`` is drawn.  The tiny token bank acts
as an information bottleneck: every style the model can express is a
mixture of a handful of learned prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .datamodel import ContractError, LatentCode, LatentOrigin


@dataclass
class GaussianLatent:
    """Diagonal Gaussian (mu, logvar) over the latent space; autodiff tensors."""

    mu: Tensor
    logvar: Tensor

    @property
    def dim(self):
        return int(self.mu.shape[-1])

    def mu_values(self):
        return np.asarray(self.mu.data, dtype=np.float64)

    def logvar_values(self):
        return np.asarray(self.logvar.data, dtype=np.float64)


class ReferenceEncoder(nn.Module):
    """Conv stack + GRU producing a fixed-length reference embedding.

    The input is laid out as (B, C, T, F): images use H as the step axis
    and W as the feature axis, sequences use their natural (T, F) frames.
    Feature and step axes are strided independently so the faithful preset
    can keep full time resolution while compressing features.
    """

    def __init__(self, in_channels, feat_dim, cfg, rng, dtype=np.float32):
        super().__init__()
        convs = []
        c = in_channels
        f = feat_dim
        for ch, fs, ts in zip(cfg.ref_encoder_channels, cfg.ref_encoder_feat_strides, cfg.ref_encoder_time_strides):
            convs.append(nn.Conv2d(c, ch, 3, rng, stride=(ts, fs), padding=(1, 1), dtype=dtype))
            c = ch
            f = (f + 2 - 3) // fs + 1
        self.convs = convs
        self.gru_in = c * f
        self.gru = nn.GRU(self.gru_in, cfg.ref_gru_units, rng, dtype=dtype)

    def __call__(self, x):
        """x: (B, C, T, F) -> (B, ref_gru_units); the final GRU state."""
        for conv in self.convs:
            x = ad.relu(conv(x))
        b, c, t, f = x.shape
        frames = ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, t, c * f))
        _, last = self.gru(frames, return_sequence=False)
        return last


class UniversalTokenLayer(nn.Module):
    """Global token bank + multihead attention over it.

    The bank is shared across all references; each head's context vector is
    a convex combination of that head's value-projected tokens, so the
    output always lies inside their convex hull.
    """

    def __init__(self, query_dim, cfg, rng, dtype=np.float32):
        super().__init__()
        self.n_tokens = cfg.n_tokens
        self.n_heads = cfg.n_heads
        self.token_dim = cfg.token_dim
        self.head_dim = cfg.token_dim // cfg.n_heads
        scale = 1.0 / np.sqrt(cfg.token_dim)
        self.tokens = Tensor((rng.standard_normal((cfg.n_tokens, cfg.token_dim)) * scale).astype(dtype), requires_grad=True)
        self.wq = nn.Linear(query_dim, cfg.token_dim, rng, bias=False, dtype=dtype)
        self.wk = nn.Linear(cfg.token_dim, cfg.token_dim, rng, bias=False, dtype=dtype)
        self.wv = nn.Linear(cfg.token_dim, cfg.token_dim, rng, bias=False, dtype=dtype)

    def head_values(self):
        """Value-projected tokens per head, shape (heads, n_tokens, head_dim)."""
        v = self.wv(self.tokens)
        return ad.transpose(ad.reshape(v, (self.n_tokens, self.n_heads, self.head_dim)), (1, 0, 2))

    def __call__(self, query):
        """query: (B, query_dim) -> (domain embedding (B, token_dim), weights (B, heads, n_tokens))."""
        b = query.shape[0]
        h, d = self.n_heads, self.head_dim
        q = ad.reshape(self.wq(query), (b, h, 1, d))
        k = ad.transpose(ad.reshape(self.wk(self.tokens), (self.n_tokens, h, d)), (1, 2, 0))
        logits = ad.reshape(q @ k, (b, h, self.n_tokens)) * (1.0 / np.sqrt(d))
        weights = ad.softmax(logits, axis=-1)
        v = self.head_values()
        context = ad.reshape(weights, (b, h, 1, self.n_tokens)) @ v
        domain = ad.reshape(context, (b, h * d))
        return domain, weights


class DirectStyleProjection(nn.Module):
    """Ablation replacement for the token layer: a plain linear map."""

    def __init__(self, query_dim, cfg, rng, dtype=np.float32):
        super().__init__()
        self.proj = nn.Linear(query_dim, cfg.token_dim, rng, dtype=dtype)

    def __call__(self, query):
        return ad.tanh(self.proj(query)), None


class GaussianProjection(nn.Module):
    """Affine map from a domain embedding to (mu, logvar); logvar is clamped."""

    def __init__(self, in_dim, latent_dim, rng, clamp=10.0, dtype=np.float32):
        super().__init__()
        self.latent_dim = latent_dim
        self.clamp = clamp
        self.proj = nn.Linear(in_dim, 2 * latent_dim, rng, dtype=dtype)

    def __call__(self, d):
        both = self.proj(d)
        mu = both[:, : self.latent_dim]
        logvar = ad.clip(both[:, self.latent_dim :], -self.clamp, self.clamp)
        return GaussianLatent(mu, logvar)


def reparameterize(g: GaussianLatent, rng):
    """Draw z = mu + exp(logvar/2) * eps with eps ~ N(0, I); differentiable."""
    eps = rng.standard_normal(g.mu.shape).astype(g.mu.dtype)
    return g.mu + ad.exp(g.logvar * 0.5) * eps


def sample_latent(g: GaussianLatent, rng):
    """Reparameterized draw from an encoded Gaussian, tagged with its origin."""
    z = reparameterize(g, rng)
    return LatentCode(values=np.asarray(z.data, dtype=np.float64), origin=LatentOrigin.ENCODED_REFERENCE, node=z)


def sample_prior(dim, rng, batch=None):
    """Standard-normal latent draw."""
    if dim < 1:
        raise ContractError(f"latent dim must be >= 1, got {dim}")
    shape = (dim,) if batch is None else (batch, dim)
    values = rng.standard_normal(shape)
    return LatentCode(values=values, origin=LatentOrigin.SAMPLED_PRIOR)


class AttentionEncoder(nn.Module):
    """Full reference-to-latent pipeline.

    reference encoder -> token layer (or direct projection in the
    ablation) -> Gaussian projection.  With ``kl_pre_utl`` the Gaussian
    constraint moves onto the raw reference embedding instead: the
    embedding is reparameterized before querying the tokens and the
    post-token projection becomes deterministic (zero logvar).
    """

    def __init__(self, in_channels, feat_dim, cfg, rng, build_encoder=True, dtype=np.float32):
        super().__init__()
        self.cfg = cfg
        if build_encoder:
            self.encoder = ReferenceEncoder(in_channels, feat_dim, cfg, rng, dtype=dtype)
        if cfg.use_token_layer:
            self.tokens = UniversalTokenLayer(cfg.ref_gru_units, cfg, rng, dtype=dtype)
        else:
            self.tokens = DirectStyleProjection(cfg.ref_gru_units, cfg, rng, dtype=dtype)
        self.gaussian = GaussianProjection(cfg.token_dim, cfg.latent_dim, rng, clamp=cfg.logvar_clamp, dtype=dtype)
        if cfg.kl_pre_utl:
            self.pre_gaussian = GaussianProjection(cfg.ref_gru_units, cfg.ref_gru_units, rng, clamp=cfg.logvar_clamp, dtype=dtype)

    def encode(self, ref_batch, rng=None):
        """-> (GaussianLatent, attention weights or None).

        ``rng`` is only consumed in the pre-token-KL variant, which needs a
        reparameterized draw before the token layer.
        """
        emb = self.encoder(ref_batch)
        return self.encode_from_embedding(emb, rng)

    def encode_from_embedding(self, emb, rng=None):
        """Same as ``encode`` but starting from a precomputed embedding."""
        if self.cfg.kl_pre_utl:
            pre = self.pre_gaussian(emb)
            query = reparameterize(pre, rng) if rng is not None else pre.mu
            domain, weights = self.tokens(query)
            g = self.gaussian(domain)
            g = GaussianLatent(g.mu, g.logvar * 0.0)
            return g, weights, pre
        domain, weights = self.tokens(emb)
        return self.gaussian(domain), weights, None
