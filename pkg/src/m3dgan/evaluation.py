"""Evaluation protocols: diversity, domain transfer, realism, mode
coverage, checkpoint sampling, and the four-variant ablation grid.

Diversity is the mean pairwise mean-L1 distance between samples generated
from the same source under different latent draws, averaged over sources.
Domain/realism/coverage are pure counting metrics against the closed-form
oracles, so they are permutation-invariant and exactly reproducible.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .datamodel import ContractError, Modality, Sample
from .synthdata import PairedDataset, ShapeClassOracle, load_dataset, oracle_for
from .trainer import DivergedError, TrainState, load_checkpoint, train


@dataclass
class DiversityReport:
    per_source: list
    grand_mean: float
    std_error: float
    n_sources: int
    n_samples_per_source: int


def _mean_l1(a, b):
    return float(np.abs(np.asarray(a.data, dtype=np.float64) - np.asarray(b.data, dtype=np.float64)).mean())


def diversity_score(groups):
    """Mean pairwise distance within each source group, then across groups.

    ``groups``: iterable of sample lists, one list per source (or a dict
    keyed by source id).  Every group needs at least two samples.
    """
    if isinstance(groups, dict):
        groups = [groups[k] for k in sorted(groups)]
    groups = [list(g) for g in groups]
    if not groups:
        raise ContractError("diversity needs at least one source group")
    per_source = []
    for g in groups:
        if len(g) < 2:
            raise ContractError("every source group needs >= 2 samples")
        dists = [_mean_l1(g[i], g[j]) for i in range(len(g)) for j in range(i + 1, len(g))]
        per_source.append(float(np.mean(dists)))
    grand = float(np.mean(per_source))
    se = float(np.std(per_source, ddof=1) / np.sqrt(len(per_source))) if len(per_source) > 1 else 0.0
    return DiversityReport(per_source, grand, se, len(groups), len(groups[0]))


@dataclass
class DomainAccuracyResult:
    accuracy: float
    n_unclassified: int
    n_total: int


def domain_accuracy(synthesized, reference_styles, oracle):
    """Fraction of outputs whose oracle style matches the reference style.

    Unclassifiable outputs count as misses and are reported separately.
    """
    if len(synthesized) != len(reference_styles):
        raise ContractError("one reference style per synthesized sample required")
    hits = 0
    unclassified = 0
    for sample, want in zip(synthesized, reference_styles):
        got = oracle.classify(sample)
        if got is None:
            unclassified += 1
        elif got == int(want):
            hits += 1
    n = len(synthesized)
    return DomainAccuracyResult(hits / n if n else 0.0, unclassified, n)


def mode_coverage(synthesized, oracle, k_styles):
    """Number of style modes never produced (#miss)."""
    seen = set()
    for sample in synthesized:
        got = oracle.classify(sample)
        if got is not None and 0 <= got < k_styles:
            seen.add(got)
    return k_styles - len(seen)


def realism_accuracy(synthesized, source_classes, oracle):
    """Fraction of outputs whose content class matches the source's class."""
    if len(synthesized) != len(source_classes):
        raise ContractError("one source class per synthesized sample required")
    if not synthesized:
        return 0.0
    hits = sum(1 for s, want in zip(synthesized, source_classes) if oracle.classify(s) == int(want))
    return hits / len(synthesized)


# ---------------------------------------------------------------------------
# sampling from a trained model


def _to_samples(state, out_tensor):
    tgt = state.task.target_modality
    arr = np.asarray(out_tensor.data)
    if tgt == Modality.TEXT:
        ids = np.argmax(arr, axis=-1).astype(np.int32)
        return [Sample(Modality.TEXT, ids[i]) for i in range(ids.shape[0])]
    if tgt == Modality.IMAGE:
        arr = np.clip(arr, -1.0, 1.0)
    return [Sample(tgt, arr[i]) for i in range(arr.shape[0])]


def generate_from_latents(state, sources, z_values):
    """One generated sample per (source, latent) row; inference mode."""
    with ad.no_grad():
        s_repr = state.model.unify_source(sources)
        z = ad.as_tensor(np.asarray(z_values, dtype=state.model.dtype))
        out = state.model.generate(s_repr, z)
        return _to_samples(state, out)


def encode_reference_mu(state, references):
    """Deterministic encoded latent (posterior mean) for each reference."""
    with ad.no_grad():
        g, weights, _ = state.model.encode_reference(references)
        w = None if weights is None else np.asarray(weights.data, dtype=np.float64)
        return g.mu_values(), w


def sample(checkpoint, source: Sample, mode: str, reference: Sample = None, n: int = 1, seed: int = 0):
    """Synthesize from one source, reference-conditioned or prior-sampled.

    Rejects modes the task registry forbids for this task.
    """
    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)
    task = state.task
    if mode == "reference":
        if not task.t_enc:
            raise ContractError(
                f"task {task.name!r} does not support reference-conditioned synthesis "
                f"(t_enc = × in the task registry)"
            )
        if reference is None:
            raise ContractError("reference mode needs a reference sample")
        mu, _ = encode_reference_mu(state, [reference])
        return generate_from_latents(state, [source], mu)
    if mode == "prior":
        if not task.t_sam:
            raise ContractError(f"task {task.name!r} does not support prior-sampled synthesis (t_sam = ×)")
        if n < 1:
            raise ContractError("n must be >= 1")
        rng = np.random.default_rng([seed, 0x5A11])
        z = rng.standard_normal((n, state.cfg.latent_dim))
        return generate_from_latents(state, [source] * n, z)
    raise ContractError(f"unknown sampling mode {mode!r}; use 'reference' or 'prior'")


# ---------------------------------------------------------------------------
# full evaluation of one trained model against a labelled test split


@dataclass
class EvalSettings:
    n_sources: int = 25
    n_draws: int = 8
    n_domain: int = 500
    seed: int = 0


@dataclass
class EvalResult:
    diversity: DiversityReport
    domain: DomainAccuracyResult
    realism: float
    n_miss: int


def evaluate_model(state, test_ds: PairedDataset, settings: EvalSettings = None):
    """Run the full metric battery on a labelled test split."""
    settings = settings or EvalSettings()
    oracle = oracle_for(test_ds)
    content_oracle = ShapeClassOracle()
    rng = np.random.default_rng([settings.seed, 0xE7A1])
    n_src = min(settings.n_sources, len(test_ds))
    src_idx = rng.choice(len(test_ds), size=n_src, replace=False)

    # prior sampling: diversity, realism, coverage
    groups = []
    flat_samples = []
    flat_classes = []
    for i in src_idx:
        ex = test_ds.examples[int(i)]
        z = rng.standard_normal((settings.n_draws, state.cfg.latent_dim))
        outs = generate_from_latents(state, [ex.source] * settings.n_draws, z)
        groups.append(outs)
        flat_samples.extend(outs)
        flat_classes.extend([int(test_ds.content_labels[int(i)])] * settings.n_draws)
    div = diversity_score(groups)
    realism = realism_accuracy(flat_samples, flat_classes, content_oracle) if test_ds.task_name.endswith("shapes") else 0.0
    k = int(test_ds.spec_fields.get("k_styles", "4"))
    miss = mode_coverage(flat_samples, oracle, k)

    # reference-conditioned domain transfer
    if state.task.t_enc:
        n_dom = min(settings.n_domain, len(test_ds))
        ref_idx = rng.integers(0, len(test_ds), size=n_dom)
        outs = []
        styles = []
        chunk = 50
        for lo in range(0, n_dom, chunk):
            hi = min(lo + chunk, n_dom)
            srcs = [test_ds.examples[j].source for j in range(lo, hi)]
            refs = [test_ds.examples[int(ref_idx[j])].target for j in range(lo, hi)]
            mu, _ = encode_reference_mu(state, refs)
            outs.extend(generate_from_latents(state, srcs, mu))
            styles.extend(int(test_ds.style_labels[int(ref_idx[j])]) for j in range(lo, hi))
        dom = domain_accuracy(outs, styles, oracle)
    else:
        dom = DomainAccuracyResult(0.0, 0, 0)
    return EvalResult(div, dom, realism, miss)


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_VARIANTS = ("L_VAE", "L_VAE+lat", "L_all w/o Att", "L_all")


def variant_config(base_cfg, variant, seed=None):
    """Loss/architecture configuration for one ablation row."""
    if variant not in ABLATION_VARIANTS:
        raise ContractError(f"unknown ablation variant {variant!r}")
    cfg = base_cfg if seed is None else replace(base_cfg, seed=seed)
    w = cfg.loss_weights
    if variant == "L_VAE":
        cfg = replace(cfg, loss_weights=replace(w, lambda_2=0.0, lambda_3=0.0))
    elif variant == "L_VAE+lat":
        cfg = replace(cfg, loss_weights=replace(w, lambda_3=0.0))
    elif variant == "L_all w/o Att":
        cfg = replace(cfg, use_token_layer=False)
    return cfg


@dataclass
class AblationCell:
    variant: str
    seed: int
    diversity: float = 0.0
    domain_accuracy: float = 0.0
    realism: float = 0.0
    n_miss: int = 0
    diverged: bool = False


@dataclass
class AblationReport:
    cells: list
    medians: dict = field(default_factory=dict)

    METRICS = ("diversity", "domain_accuracy", "realism", "n_miss")

    def compute_medians(self):
        self.medians = {}
        for variant in ABLATION_VARIANTS:
            ok = [c for c in self.cells if c.variant == variant and not c.diverged]
            self.medians[variant] = {
                m: float(np.median([getattr(c, m) for c in ok])) if ok else float("nan") for m in self.METRICS
            }
        return self.medians

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["variant", "seed"] + list(self.METRICS) + ["diverged"])
            for c in self.cells:
                writer.writerow([c.variant, c.seed] + [repr(float(getattr(c, m))) for m in self.METRICS] + [int(c.diverged)])
            for variant in ABLATION_VARIANTS:
                med = self.medians.get(variant, {})
                writer.writerow([variant, "median"] + [repr(float(med.get(m, float("nan")))) for m in self.METRICS] + [""])

    def to_svg(self, path):
        """Small dependency-free bar chart: diversity and domain accuracy."""
        width, height, pad = 640, 300, 40
        panel_w = (width - 3 * pad) / 2
        bars = []

        def panel(x0, title, values, fmt):
            vmax = max(max(values), 1e-9)
            n = len(values)
            bw = panel_w / (n * 1.5)
            parts = [f'<text x="{x0 + panel_w / 2:.0f}" y="{pad - 14}" text-anchor="middle" font-size="13">{title}</text>']
            for i, (name, v) in enumerate(zip(ABLATION_VARIANTS, values)):
                h = (height - 2 * pad) * (v / vmax)
                x = x0 + i * 1.5 * bw
                y = height - pad - h
                parts.append(f'<rect x="{x:.1f}" y="{y:.1f}" width="{bw:.1f}" height="{h:.1f}" fill="#4878a8"/>')
                parts.append(f'<text x="{x + bw / 2:.1f}" y="{height - pad + 12}" text-anchor="middle" font-size="8">{name}</text>')
                parts.append(f'<text x="{x + bw / 2:.1f}" y="{y - 3:.1f}" text-anchor="middle" font-size="9">{fmt % v}</text>')
            return parts

        div_vals = [self.medians[v]["diversity"] for v in ABLATION_VARIANTS]
        acc_vals = [self.medians[v]["domain_accuracy"] for v in ABLATION_VARIANTS]
        bars += panel(pad, "diversity (mean pairwise L1)", div_vals, "%.4f")
        bars += panel(2 * pad + panel_w, "domain accuracy", acc_vals, "%.3f")
        svg = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">'
            '<rect width="100%" height="100%" fill="white"/>' + "".join(bars) + "</svg>"
        )
        with open(path, "w") as fh:
            fh.write(svg)


def _run_cell(args):
    variant, seed, base_cfg, train_dir, test_dir, settings, out_dir = args
    train_ds = load_dataset(train_dir)
    test_ds = load_dataset(test_dir)
    cfg = variant_config(base_cfg, variant, seed=seed)
    cell_dir = None
    if out_dir is not None:
        cell_dir = os.path.join(out_dir, "cells", f"{variant.replace(' ', '_').replace('/', '-')}-seed{seed}")
    try:
        result = train(cfg, train_ds, out_dir=cell_dir)
        state = result if isinstance(result, TrainState) else load_checkpoint(result)
    except DivergedError:
        return AblationCell(variant, seed, diverged=True)
    ev = evaluate_model(state, test_ds, settings)
    return AblationCell(
        variant,
        seed,
        diversity=ev.diversity.grand_mean,
        domain_accuracy=ev.domain.accuracy,
        realism=ev.realism,
        n_miss=ev.n_miss,
    )


def run_cells(jobs, workers=1):
    """Train/evaluate independent cells, optionally in parallel processes."""
    if workers > 1:
        import multiprocessing as mp

        # keep worker BLAS single-threaded; each cell is one process
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        os.environ.setdefault("OMP_NUM_THREADS", "1")
        with mp.get_context("spawn").Pool(workers) as pool:
            return pool.map(_run_cell, jobs)
    return [_run_cell(job) for job in jobs]


def run_ablation(base_cfg, train_dir, test_dir, seeds, out_dir=None, workers=1, settings: EvalSettings = None):
    """Train and evaluate the four loss variants over the given seeds.

    Datasets are passed as directories so worker processes can load them
    independently; cells are fully independent and may run in parallel.
    """
    if len(seeds) < 3:
        raise ContractError("ablation needs >= 3 seeds for stable medians")
    settings = settings or EvalSettings()
    jobs = [(variant, seed, base_cfg, train_dir, test_dir, settings, out_dir) for variant in ABLATION_VARIANTS for seed in seeds]
    cells = run_cells(jobs, workers)
    report = AblationReport(cells)
    report.compute_medians()
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        report.to_csv(os.path.join(out_dir, "ablation.csv"))
        report.to_svg(os.path.join(out_dir, "ablation.svg"))
    return report
