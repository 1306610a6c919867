"""Two-path alternating training, checkpointing and gradient verification.

Every step runs (a) the reference-encoded path (adversarial +
reconstruction + KL), (b) the prior-sampled path (adversarial + latent
regression), (c) the output/latent distance regulariser across the two
paths, then updates the discriminator and the generator side in that
order.  Paths whose loss weights are zero are skipped entirely.

Determinism contract: (seed, config, data) fully determine every
checkpoint byte; the RNG state is serialized with checkpoints so resumed
runs replay the identical stream.
"""

from __future__ import annotations

import os
import shutil
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .archive import read_tensor, write_tensor
from .attention import reparameterize
from .datamodel import (
    ContractError,
    LossWeights,
    Modality,
    ModelConfig,
    TaskSpec,
    load_config,
    lookup_task,
    save_config,
    validate_config,
)
from .model import DataDims, TranslationModel
from .objectives import (
    LossBreakdown,
    compose_total,
    loss_distance_reg,
    loss_gan,
    loss_kl,
    loss_latent_regression,
    loss_rec,
)

CHECKPOINT_FINAL = "checkpoint-final"


class DivergedError(RuntimeError):
    """Too many consecutive non-finite training steps."""


class Adam(object):
    """Adam over a named parameter dict; moments are checkpointable."""

    def __init__(self, params, lr, beta1, beta2, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data = p.data - (self.lr / b1c) * m / (np.sqrt(v / b2c) + self.eps)

    def moment_arrays(self):
        out = {}
        for name in self.params:
            out[f"m.{name}"] = self.m[name]
            out[f"v.{name}"] = self.v[name]
        return out

    def load_moments(self, arrays, t):
        self.t = t
        for name in self.params:
            self.m[name] = arrays[f"m.{name}"].astype(self.m[name].dtype)
            self.v[name] = arrays[f"v.{name}"].astype(self.v[name].dtype)

    def snapshot(self):
        return ({k: p.data.copy() for k, p in self.params.items()}, {k: a.copy() for k, a in self.m.items()}, {k: a.copy() for k, a in self.v.items()}, self.t)

    def restore(self, snap):
        datas, m, v, t = snap
        for k, p in self.params.items():
            p.data = datas[k]
        self.m = m
        self.v = v
        self.t = t


@dataclass
class StepMetrics:
    step: int
    losses: LossBreakdown
    grad_norms: dict = field(default_factory=dict)
    wall_time: float = 0.0
    diverged: bool = False


@dataclass
class TrainState:
    task: TaskSpec
    cfg: ModelConfig
    weights: LossWeights
    dims: DataDims
    model: TranslationModel
    opt_g: Adam
    opt_d: Adam
    rng: np.random.Generator
    step: int = 0
    diverged_streak: int = 0


def init_state(task: TaskSpec, cfg: ModelConfig, dims: DataDims, weights=None, dtype=np.float32):
    errors = validate_config(cfg)
    if errors:
        raise ContractError("invalid config: " + "; ".join(errors))
    weights = weights if weights is not None else cfg.loss_weights
    werrs = weights.validate()
    if werrs:
        raise ContractError("invalid loss weights: " + "; ".join(werrs))
    build_rng = np.random.default_rng([cfg.seed, 1])
    model = TranslationModel(task, cfg, dims, build_rng, dtype=dtype)
    groups = model.param_groups()
    gen_params = {}
    for gname in ("prenets", "e_att", "generator"):
        gen_params.update(groups[gname])
    opt_g = Adam(gen_params, cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2)
    opt_d = Adam(groups["discriminator"], cfg.adam_lr, cfg.adam_beta1, cfg.adam_beta2)
    rng = np.random.default_rng([cfg.seed, 0])
    return TrainState(task, cfg, weights, dims, model, opt_g, opt_d, rng)


def _grad_norm(params):
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    return float(np.sqrt(total))


def train_step(state: TrainState, batch):
    """One alternating update; returns (state, StepMetrics).

    A non-finite loss leaves parameters, moments and the RNG untouched
    and only bumps the diverged streak.
    """
    if not batch:
        raise ContractError("batch must be non-empty")
    for ex in batch:
        if ex.source.modality != state.task.source_modality or ex.target.modality != state.task.target_modality:
            raise ContractError("batch modalities do not match the task")
    t_start = time.perf_counter()
    model, w, cfg = state.model, state.weights, state.cfg
    rng_backup = state.rng.bit_generator.state

    sources = [ex.source for ex in batch]
    targets = [ex.target for ex in batch]
    refs = [ex.reference for ex in batch]
    teacher = None
    if state.task.target_modality == Modality.TEXT:
        teacher = np.stack([t.data for t in targets])

    enc_needed = w.lambda_1 > 0 or w.lambda_3 > 0
    sam_needed = w.lambda_2 > 0 or w.lambda_3 > 0

    s_repr = model.unify_source(sources)
    t_real = model.target_tensor_from_samples(targets)

    g_lat = pre_g = z_r = t_enc = enc_probs = None
    if enc_needed:
        g_lat, _, pre_g = model.encode_reference(refs, state.rng)
        z_r = reparameterize(g_lat, state.rng)
        t_enc = model.generate(s_repr, z_r, teacher_ids=teacher, origin_counter="t_enc")
        enc_probs = model.disc_fake_input(t_enc)
    z_s = t_sam = sam_probs = None
    if sam_needed:
        z_s = ad.as_tensor(state.rng.standard_normal((len(batch), cfg.latent_dim)).astype(model.dtype))
        t_sam = model.generate(s_repr, z_s, teacher_ids=teacher, origin_counter="t_sam")
        sam_probs = model.disc_fake_input(t_sam)

    def bail():
        state.rng.bit_generator.state = rng_backup
        state.diverged_streak += 1
        empty = LossBreakdown()
        return state, StepMetrics(state.step, empty, {}, time.perf_counter() - t_start, diverged=True)

    # ---- discriminator update -----------------------------------------
    d_total = None
    d_real = None
    if w.lambda_1 > 0 or w.lambda_2 > 0:
        d_real = model.discriminate_batch(sources, t_real)
        if w.lambda_1 > 0:
            dl, _ = loss_gan(d_real, model.discriminate_batch(sources, ad.Tensor(enc_probs.data)), cfg.gan_nonsaturating)
            d_total = dl
        if w.lambda_2 > 0:
            dl, _ = loss_gan(d_real, model.discriminate_batch(sources, ad.Tensor(sam_probs.data)), cfg.gan_nonsaturating)
            d_total = dl if d_total is None else d_total + dl
        if not np.isfinite(float(d_total)):
            return bail()

    grad_norms = {}
    d_snapshot = None
    if d_total is not None:
        d_snapshot = state.opt_d.snapshot()
        model.zero_grad()
        ad.backward(d_total)
        grad_norms["discriminator"] = _grad_norm(state.opt_d.params)
        state.opt_d.step()

    # ---- generator / attention-encoder update -------------------------
    model.discriminator.set_requires_grad(False)
    parts = LossBreakdown(gan_d=float(d_total) if d_total is not None else 0.0)
    if w.lambda_1 > 0:
        fake_logit = model.discriminate_batch(sources, enc_probs)
        _, parts.gan_g_enc = loss_gan(ad.Tensor(d_real.data), fake_logit, cfg.gan_nonsaturating)
        if w.lambda_rec > 0:
            parts.rec = loss_rec(enc_probs, t_real, cfg.rec_norm)
        if w.lambda_kl > 0:
            parts.kl = loss_kl(pre_g if cfg.kl_pre_utl else g_lat)
    if w.lambda_2 > 0:
        fake_logit = model.discriminate_batch(sources, sam_probs)
        _, parts.gan_g_sam = loss_gan(ad.Tensor(d_real.data), fake_logit, cfg.gan_nonsaturating)
        if w.lambda_lat > 0:
            z_hat = model.recover_latent(t_sam, state.rng)
            parts.lat = loss_latent_regression(z_s, z_hat)
    if w.lambda_3 > 0:
        parts.dist = loss_distance_reg(sam_probs, enc_probs, z_s, z_r, cfg.dist_eps, cfg.dist_norm)
    breakdown = compose_total(parts, w)
    if not np.isfinite(float(breakdown.total)):
        model.discriminator.set_requires_grad(True)
        if d_snapshot is not None:
            state.opt_d.restore(d_snapshot)
        return bail()

    model.zero_grad()
    ad.backward(breakdown.total)
    groups = model.param_groups()
    for gname in ("prenets", "e_att", "generator"):
        grad_norms[gname] = _grad_norm(groups[gname])
    state.opt_g.step()
    model.discriminator.set_requires_grad(True)
    model.zero_grad()

    state.step += 1
    state.diverged_streak = 0
    metrics = StepMetrics(state.step, breakdown.to_floats(), grad_norms, time.perf_counter() - t_start)
    return state, metrics


# ---------------------------------------------------------------------------
# checkpoints


def _shape_str(arr):
    return "x".join(str(d) for d in arr.shape) if arr.ndim else "scalar"


def save_checkpoint(state: TrainState, out_dir):
    """Write params, optimizer moments, RNG state and config; atomic."""
    tmp = str(out_dir) + ".tmp"
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(tmp)
    tensors = {}
    for name, p in state.model.parameters().items():
        tensors[f"param.{name}"] = p.data
    for prefix, opt in (("adam_g", state.opt_g), ("adam_d", state.opt_d)):
        for name, arr in opt.moment_arrays().items():
            tensors[f"{prefix}.{name}"] = arr
    names = sorted(tensors)
    with open(os.path.join(tmp, "manifest.txt"), "w") as fh:
        fh.write("\n".join(f"{n} {_shape_str(tensors[n])}" for n in names) + "\n")
    for n in names:
        write_tensor(os.path.join(tmp, n + ".m3dt"), tensors[n])
    rng_state = state.rng.bit_generator.state
    lines = [
        f"step = {state.step}",
        f"task = {state.task.name}",
        f"diverged_streak = {state.diverged_streak}",
        f"opt_g_t = {state.opt_g.t}",
        f"opt_d_t = {state.opt_d.t}",
        f"rng_state = {rng_state['state']['state']}",
        f"rng_inc = {rng_state['state']['inc']}",
        f"rng_has_uint32 = {rng_state['has_uint32']}",
        f"rng_uinteger = {rng_state['uinteger']}",
        f"dims_source_image_channels = {state.dims.source_image_channels}",
        f"dims_target_image_channels = {state.dims.target_image_channels}",
        f"dims_source_seq_feat = {state.dims.source_seq_feat}",
        f"dims_target_seq_feat = {state.dims.target_seq_feat}",
        f"dims_image_h = {state.dims.image_size[0]}",
        f"dims_image_w = {state.dims.image_size[1]}",
    ]
    with open(os.path.join(tmp, "state.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    save_config(replace(state.cfg, loss_weights=state.weights), os.path.join(tmp, "config.txt"))
    if os.path.exists(out_dir):
        shutil.rmtree(out_dir)
    os.replace(tmp, out_dir)
    return out_dir


def _read_kv(path):
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line and "=" in line:
                k, v = (part.strip() for part in line.split("=", 1))
                out[k] = v
    return out

def load_checkpoint(ckpt_dir, dtype=np.float32):
    """Rebuild a TrainState whose next step continues the saved run exactly."""
    cfg = load_config(os.path.join(ckpt_dir, "config.txt"))
    meta = _read_kv(os.path.join(ckpt_dir, "state.txt"))
    dims = DataDims(
        source_image_channels=int(meta["dims_source_image_channels"]),
        target_image_channels=int(meta["dims_target_image_channels"]),
        source_seq_feat=int(meta["dims_source_seq_feat"]),
        target_seq_feat=int(meta["dims_target_seq_feat"]),
        image_size=(int(meta["dims_image_h"]), int(meta["dims_image_w"])),
    )
    task = lookup_task(meta["task"])
    state = init_state(task, cfg, dims, cfg.loss_weights, dtype=dtype)
    with open(os.path.join(ckpt_dir, "manifest.txt")) as fh:
        names = [line.split(" ")[0] for line in fh.read().splitlines() if line.strip()]
    arrays = {n: read_tensor(os.path.join(ckpt_dir, n + ".m3dt")) for n in names}
    state.model.load_state({n[len("param.") :]: a for n, a in arrays.items() if n.startswith("param.")})
    state.opt_g.load_moments({n[len("adam_g.") :]: a for n, a in arrays.items() if n.startswith("adam_g.")}, int(meta["opt_g_t"]))
    state.opt_d.load_moments({n[len("adam_d.") :]: a for n, a in arrays.items() if n.startswith("adam_d.")}, int(meta["opt_d_t"]))
    bg = np.random.PCG64()
    bg.state = {
        "bit_generator": "PCG64",
        "state": {"state": int(meta["rng_state"]), "inc": int(meta["rng_inc"])},
        "has_uint32": int(meta["rng_has_uint32"]),
        "uinteger": int(meta["rng_uinteger"]),
    }
    state.rng = np.random.Generator(bg)
    state.step = int(meta["step"])
    state.diverged_streak = int(meta["diverged_streak"])
    return state


def _format_float(x):
    return repr(float(x))


def train(cfg, dataset, weights=None, task=None, out_dir=None, resume_from=None, dtype=np.float32, progress=None):
    """Run the step loop; returns the final checkpoint directory (or state).

    ``dataset`` is anything with ``.examples`` (or a plain example list).
    Emits metrics.csv, a run-config snapshot and periodic checkpoints when
    ``out_dir`` is given.
    """
    examples = dataset.examples if hasattr(dataset, "examples") else list(dataset)
    if not examples:
        raise ContractError("dataset is empty")
    if resume_from is not None:
        state = load_checkpoint(resume_from, dtype=dtype)
    else:
        if task is None:
            task = lookup_task(dataset.task_name) if hasattr(dataset, "task_name") else None
        if task is None:
            raise ContractError("task must be given when the dataset carries no task name")
        state = init_state(task, cfg, DataDims.from_example(examples[0]), weights, dtype=dtype)
    total = state.cfg.total_steps(len(examples))
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        save_config(replace(state.cfg, loss_weights=state.weights), os.path.join(out_dir, "config.txt"))
        metrics_path = os.path.join(out_dir, "metrics.csv")
        mode = "a" if (resume_from is not None and os.path.exists(metrics_path)) else "w"
        metrics_fh = open(metrics_path, mode)
        if mode == "w":
            metrics_fh.write("step," + ",".join(LossBreakdown.CSV_FIELDS) + "\n")
    else:
        metrics_fh = None
    try:
        n = len(examples)
        while state.step < total:
            idx = state.rng.integers(0, n, size=state.cfg.batch_size)
            batch = [examples[int(i)] for i in idx]
            state, metrics = train_step(state, batch)
            if metrics.diverged and state.diverged_streak >= state.cfg.diverged_patience:
                raise DivergedError(f"{state.diverged_streak} consecutive non-finite steps at step {state.step}")
            if metrics_fh is not None and not metrics.diverged:
                row = [str(metrics.step)] + [_format_float(v) for v in metrics.losses.csv_values()]
                metrics_fh.write(",".join(row) + "\n")
            if progress is not None:
                progress(metrics)
            if (
                out_dir is not None
                and state.cfg.checkpoint_every > 0
                and state.step % state.cfg.checkpoint_every == 0
                and state.step < total
            ):
                save_checkpoint(state, os.path.join(out_dir, f"checkpoint-{state.step:06d}"))
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    if out_dir is not None:
        return save_checkpoint(state, os.path.join(out_dir, CHECKPOINT_FINAL))
    return state


def perturb_params(model, scale=0.02, rng=None):
    """Move parameters to a generic point before finite-difference checks.

    Freshly initialised models sit exactly on relu/abs kinks (zero biases
    against constant input regions give pre-activations of exactly zero),
    where one-sided subgradients and central differences legitimately
    disagree.  A small deterministic jitter makes kink hits measure-zero.
    """
    rng = rng if rng is not None else np.random.default_rng(11)
    for p in model.parameters().values():
        p.data = p.data + (scale * rng.standard_normal(p.data.shape)).astype(p.data.dtype)


def objective_closures(state: TrainState, batch, rng=None, noise_dtype=None):
    """Deterministic loss closures for gradient verification.

    Returns (generator_closure, discriminator_closure, param_groups).  All
    noise (reparameterization draw and the prior latent) is frozen once so
    repeated evaluations differ only through the parameters, as central
    differences require.  ``noise_dtype`` pins the noise rounding so a
    float64 twin sees bit-identical values to a float32 model.
    """
    model, w, cfg = state.model, state.weights, state.cfg
    rng = rng if rng is not None else np.random.default_rng([cfg.seed, 2])
    sources = [ex.source for ex in batch]
    targets = [ex.target for ex in batch]
    refs = [ex.reference for ex in batch]
    teacher = None
    if state.task.target_modality == Modality.TEXT:
        teacher = np.stack([t.data for t in targets])
    noise_dtype = noise_dtype or model.dtype
    eps_const = rng.standard_normal((len(batch), cfg.latent_dim)).astype(noise_dtype).astype(model.dtype)
    z_s_const = rng.standard_normal((len(batch), cfg.latent_dim)).astype(noise_dtype).astype(model.dtype)

    def forward():
        s_repr = model.unify_source(sources)
        t_real = model.target_tensor_from_samples(targets)
        g_lat, _, pre_g = model.encode_reference(refs)
        z_r = g_lat.mu + ad.exp(g_lat.logvar * 0.5) * eps_const
        t_enc = model.disc_fake_input(model.generate(s_repr, z_r, teacher_ids=teacher))
        z_s = ad.as_tensor(z_s_const)
        t_sam = model.disc_fake_input(model.generate(s_repr, z_s, teacher_ids=teacher))
        d_real = model.discriminate_batch(sources, t_real)
        d_fake_enc = model.discriminate_batch(sources, t_enc)
        d_fake_sam = model.discriminate_batch(sources, t_sam)
        return t_real, g_lat, pre_g, z_r, t_enc, z_s, t_sam, d_real, d_fake_enc, d_fake_sam

    def generator_closure():
        t_real, g_lat, pre_g, z_r, t_enc, z_s, t_sam, d_real, d_fake_enc, d_fake_sam = forward()
        parts = LossBreakdown()
        _, parts.gan_g_enc = loss_gan(d_real, d_fake_enc, cfg.gan_nonsaturating)
        parts.rec = loss_rec(t_enc, t_real, cfg.rec_norm)
        parts.kl = loss_kl(pre_g if cfg.kl_pre_utl else g_lat)
        _, parts.gan_g_sam = loss_gan(d_real, d_fake_sam, cfg.gan_nonsaturating)
        z_hat = model.recover_latent(t_sam)
        parts.lat = loss_latent_regression(z_s, z_hat)
        parts.dist = loss_distance_reg(t_sam, t_enc, z_s, z_r, cfg.dist_eps, cfg.dist_norm)
        return compose_total(parts, w).total

    def discriminator_closure():
        _, _, _, _, t_enc, _, t_sam, d_real, d_fake_enc, d_fake_sam = forward()
        d1, _ = loss_gan(d_real, d_fake_enc, cfg.gan_nonsaturating)
        d2, _ = loss_gan(d_real, d_fake_sam, cfg.gan_nonsaturating)
        return d1 + d2

    return generator_closure, discriminator_closure, model.param_groups()


GENERATOR_SIDE_GROUPS = ("prenets", "e_att", "generator")


def objective_gradient_report(task, cfg, batch, dtype=np.float64, epsilon=1e-5, n_coords=200, seed=0):
    """Verify the full objective's gradients at the requested precision.

    Builds a model at ``dtype``, moves it to a generic point, and checks
    backprop for the generator side and the discriminator side against
    central differences.  For float32 the numeric side runs on a float64
    twin that holds bit-identical parameter values and noise, because
    differencing a float32 loss would drown in its own rounding error.
    Returns (generator_report, discriminator_report, state).
    """
    dims = DataDims.from_example(batch[0])
    state = init_state(task, cfg, dims, dtype=dtype)
    perturb_params(state.model, rng=np.random.default_rng([seed, 7]))
    noise_dtype = np.float32 if dtype == np.float32 else np.float64
    g_clo, d_clo, groups = objective_closures(state, batch, noise_dtype=noise_dtype)
    rng = np.random.default_rng([seed, 3])
    gen_groups = {k: groups[k] for k in GENERATOR_SIDE_GROUPS}
    disc_groups = {"discriminator": groups["discriminator"]}
    if dtype == np.float64:
        rep_g = grad_check(g_clo, gen_groups, epsilon=epsilon, n_coords=n_coords, rng=rng)
        rep_d = grad_check(d_clo, disc_groups, epsilon=epsilon, n_coords=n_coords, rng=rng)
        return rep_g, rep_d, state
    twin = init_state(task, cfg, dims, dtype=np.float64)
    twin.model.load_state(state.model.state_arrays())
    g64, d64, groups64 = objective_closures(twin, batch, noise_dtype=np.float32)
    rep_g = grad_check(
        g_clo, gen_groups, epsilon=epsilon, n_coords=n_coords, rng=rng,
        fd_closure=g64, fd_groups={k: groups64[k] for k in GENERATOR_SIDE_GROUPS},
    )
    rep_d = grad_check(
        d_clo, disc_groups, epsilon=epsilon, n_coords=n_coords, rng=rng,
        fd_closure=d64, fd_groups={"discriminator": groups64["discriminator"]},
    )
    return rep_g, rep_d, state


# ---------------------------------------------------------------------------
# finite-difference gradient verification


@dataclass
class GradCheckReport:
    per_group: dict
    n_evaluations: int

    @property
    def max_rel_error(self):
        return max(self.per_group.values()) if self.per_group else 0.0


def grad_check(loss_closure, groups, epsilon=1e-5, n_coords=200, rng=None, fd_closure=None, fd_groups=None):
    """Compare analytic gradients against central finite differences.

    ``groups`` maps group names to {param name: Tensor}; a flat
    {name: Tensor} dict is treated as one group per tensor.  Per group the
    error is ``max |analytic - numeric|`` over the sampled coordinates,
    normalized by the largest gradient magnitude seen in the group (so a
    uniformly zero gradient scores zero, not undefined).

    Differencing a float32 objective measures little beyond its own
    rounding noise, so a float32 check should pass ``fd_closure`` /
    ``fd_groups``: a float64 twin holding the identical parameter values,
    on which the numeric side is evaluated instead.

    Coordinates whose first estimate disagrees are re-evaluated at
    epsilon/10 and epsilon/100: truncation error near relu/abs kinks
    shrinks with epsilon, while a genuinely wrong analytic gradient stays
    wrong, so the refinement never masks real defects.
    """
    if epsilon <= 0:
        raise ContractError("epsilon must be positive")
    if groups and all(not isinstance(v, dict) for v in groups.values()):
        groups = {name: {name: p} for name, p in groups.items()}
    rng = rng if rng is not None else np.random.default_rng(0)
    if fd_closure is None:
        fd_closure, fd_groups = loss_closure, groups
    elif fd_groups is None:
        raise ContractError("fd_closure needs fd_groups on the same parameter names")

    all_params = [p for g in groups.values() for p in g.values()]
    for p in all_params:
        p.grad = None
    loss = loss_closure()
    refine = fd_closure().data.dtype == np.float64
    ad.backward(loss)
    analytic = {}
    for gname, group in groups.items():
        for name, p in group.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
                raise ContractError(f"non-finite analytic gradient: {name} flat index {bad}")
            analytic[name] = np.asarray(g, dtype=np.float64).copy()

    n_evals = 0
    per_group = {}
    for gname, group in groups.items():
        sizes = [(name, p.data.size) for name, p in group.items()]
        total = sum(s for _, s in sizes)
        if total == 0:
            per_group[gname] = 0.0
            continue
        take = min(n_coords, total)
        chosen = rng.choice(total, size=take, replace=False)
        chosen.sort()
        scale = max(max(np.abs(analytic[name]).max() for name, _ in sizes), 1e-12)
        worst = 0.0
        bounds = np.cumsum([s for _, s in sizes])
        for flat in chosen:
            gi = int(np.searchsorted(bounds, flat, side="right"))
            name, _ = sizes[gi]
            local = int(flat - (bounds[gi - 1] if gi else 0))
            view = fd_groups[gname][name].data.ravel()
            old = view[local]

            def central(eps):
                view[local] = old + eps
                lp = float(fd_closure().data)
                view[local] = old - eps
                lm = float(fd_closure().data)
                view[local] = old
                return (lp - lm) / (2.0 * eps)

            a_val = float(analytic[name].ravel()[local])
            numeric = central(epsilon)
            n_evals += 2
            if refine and abs(a_val - numeric) > 1e-7 * scale:
                finer = epsilon
                while finer > 1.5e-7:
                    finer /= 10.0
                    refined = central(finer)
                    n_evals += 2
                    if abs(refined - numeric) <= 1e-9 * scale:
                        break
                    numeric = refined
            err = abs(a_val - numeric)
            scale = max(scale, abs(numeric))
            worst = max(worst, err)
        per_group[gname] = worst / scale
    return GradCheckReport(per_group, n_evals)
