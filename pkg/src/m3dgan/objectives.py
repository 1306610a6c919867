"""Loss terms and their composition into the full training objective.

Two generation paths contribute every step: the reference-encoded path
(adversarial + reconstruction + KL-to-prior) and the prior-sampled path
(adversarial + latent regression), plus a distance regulariser that
rewards output spread per unit of latent distance.  The generator
*maximises* the distance term, so it enters the minimised total with a
negative sign.

All functions accept autodiff tensors (for training) or plain arrays and
return autodiff tensors; take ``float(...)`` for reporting.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .datamodel import ContractError, LossWeights


@dataclass
class LossBreakdown:
    """Per-term values for one step; fields may be floats or tensors."""

    gan_d: object = 0.0
    gan_g_enc: object = 0.0
    gan_g_sam: object = 0.0
    rec: object = 0.0
    kl: object = 0.0
    lat: object = 0.0
    dist: object = 0.0
    total_vae: object = 0.0
    total_lat: object = 0.0
    total: object = 0.0

    def to_floats(self):
        return LossBreakdown(**{k: float(v) if not isinstance(v, float) else v for k, v in self.__dict__.items()})

    CSV_FIELDS = ("gan_d", "gan_g_enc", "gan_g_sam", "rec", "kl", "lat", "dist", "total")

    def csv_values(self):
        return [float(getattr(self, name)) for name in self.CSV_FIELDS]


def _per_sample_mean_norm(a, b, norm):
    """Mean L1 (or squared L2) distance per sample: (B,) for batched input."""
    a, b = ad.as_tensor(a), ad.as_tensor(b)
    if a.shape != b.shape:
        raise ContractError(f"shape mismatch {a.shape} vs {b.shape}")
    diff = a - b
    per_elem = ad.square(diff) if norm == "l2" else ad.absolute(diff)
    if len(a.shape) <= 1:
        return ad.tmean(per_elem)
    return ad.tmean(ad.reshape(per_elem, (a.shape[0], -1)), axis=1)


def _pair_mean_norm(a, b, norm):
    """Per-sample mean distance, then batch mean."""
    return ad.tmean(_per_sample_mean_norm(a, b, norm))


def loss_gan(real_logit, fake_logit, nonsaturating=True):
    """Binary adversarial losses from raw logits.

    Returns (d_loss, g_loss): the discriminator minimises
    -[log sig(real) + log(1 - sig(fake))]; the generator either the
    non-saturating -log sig(fake) (default) or the literal minimax term
    log(1 - sig(fake)).
    """
    real = ad.as_tensor(real_logit)
    fake = ad.as_tensor(fake_logit)
    d_loss = ad.tmean(ad.softplus(-real)) + ad.tmean(ad.softplus(fake))
    if nonsaturating:
        g_loss = ad.tmean(ad.softplus(-fake))
    else:
        g_loss = -ad.tmean(ad.softplus(fake))
    return d_loss, g_loss


def loss_rec(t_hat, t, norm="l1"):
    """Reconstruction distance between generated and ground-truth targets."""
    return _pair_mean_norm(t_hat, t, norm)


def loss_kl(g):
    """KL divergence from a diagonal Gaussian to the standard normal.

    0.5 * sum_i (mu_i^2 + exp(logvar_i) - 1 - logvar_i), batch-averaged.
    """
    mu, logvar = ad.as_tensor(g.mu), ad.as_tensor(g.logvar)
    per_dim = 0.5 * (ad.square(mu) + ad.exp(logvar) - 1.0 - logvar)
    if len(per_dim.shape) == 1:
        return ad.tsum(per_dim)
    return ad.tmean(ad.tsum(per_dim, axis=1))


def loss_latent_regression(z_s, z_hat):
    """Mean absolute error recovering a prior draw from its synthesis."""
    a, b = ad.as_tensor(z_s), ad.as_tensor(z_hat)
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"latent dim mismatch {a.shape} vs {b.shape}")
    return _pair_mean_norm(a, b, "l1")


def loss_distance_reg(t1, t2, z1, z2, eps=1e-6, norm="l1"):
    """Output distance per unit latent distance (collapse penalty).

    The generator maximises this ratio; identical outputs score 0 no
    matter the latents, and ``eps`` keeps the ratio finite when the two
    latent codes coincide.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    num = _per_sample_mean_norm(t1, t2, norm)
    den = _per_sample_mean_norm(z1, z2, "l1")
    ratio = num / (den + eps)
    return ad.tmean(ratio) if len(ratio.shape) else ratio


def compose_total(parts: LossBreakdown, weights: LossWeights):
    """Fill in the composite objectives from per-term values.

    total_vae = gan_enc + l_rec * rec + l_kl * kl
    total_lat = gan_sam + l_lat * lat
    total     = l1 * total_vae + l2 * total_lat - l3 * dist   (generator view)
    """
    out = LossBreakdown(**dict(parts.__dict__))
    out.total_vae = parts.gan_g_enc + weights.lambda_rec * parts.rec + weights.lambda_kl * parts.kl
    out.total_lat = parts.gan_g_sam + weights.lambda_lat * parts.lat
    out.total = weights.lambda_1 * out.total_vae + weights.lambda_2 * out.total_lat - weights.lambda_3 * parts.dist
    return out
