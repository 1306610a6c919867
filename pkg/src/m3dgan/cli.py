"""Command-line entry point.

One binary, subcommand style: gen-data, train, sample, eval, ablate,
gradcheck, inspect-tokens.  Exit codes: 0 success, 1 contract/usage
error, 2 I/O error, 3 diverged run.  Every command finishes with a
machine-readable ``RESULT key=value ...`` line.  ``--seed`` falls back to
the M3D_SEED environment variable, then to 0.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import os
import sys

import numpy as np

from . import evaluation, synthdata
from .archive import ArchiveError, write_tensor
from .datamodel import (
    ContractError,
    Modality,
    PRESETS,
    load_config,
    lookup_task,
    validate_config,
)
from .trainer import (
    DivergedError,
    load_checkpoint,
    objective_gradient_report,
    train,
)

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_DIVERGED = 3


class UsageError(ContractError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _result(**kv):
    print("RESULT " + " ".join(f"{k}={v}" for k, v in kv.items()))


def _seed_from(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("M3D_SEED")
    return int(env) if env else 0


def _load_cfg(args, default_preset="desk"):
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        preset = getattr(args, "preset", None) or default_preset
        cfg = PRESETS[preset]() if preset != "paper" else PRESETS[preset](getattr(args, "task", "image→image") or "image→image")
    cfg = dataclasses.replace(cfg, seed=_seed_from(args))
    if getattr(args, "steps", None):
        cfg = dataclasses.replace(cfg, steps=args.steps, epochs=0)
    errors = validate_config(cfg)
    if errors:
        raise ContractError("invalid config: " + "; ".join(errors))
    return cfg


_SPEC_TYPES = {
    "shapes": synthdata.ShapeStyleSpec,
    "captions": synthdata.CaptionImageSpec,
    "sequences": synthdata.SequenceStyleSpec,
}


def _load_spec(kind, path, seed):
    cls = _SPEC_TYPES[kind]
    kwargs = {}
    if path:
        fields = {f.name: f for f in dataclasses.fields(cls)}
        with open(path) as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ContractError(f"{path}:{lineno}: expected key = value")
                key, raw = (p.strip() for p in line.split("=", 1))
                if key not in fields:
                    raise ContractError(f"{path}:{lineno}: unknown spec key {key!r} for kind {kind}")
                ftype = fields[key].type
                kwargs[key] = float(raw) if ftype in ("float", float) else int(raw)
    if seed is not None:
        kwargs["seed"] = seed
    return cls(**kwargs)


def cmd_gen_data(args):
    seed = _seed_from(args) if (args.seed is not None or os.environ.get("M3D_SEED")) else None
    spec = _load_spec(args.kind, args.spec, seed)
    gen = {"shapes": synthdata.gen_colored_shapes, "captions": synthdata.gen_toy_captions, "sequences": synthdata.gen_sequence_styles}[args.kind]
    ds = gen(spec)
    synthdata.save_dataset(ds, args.out)
    _result(cmd="gen-data", kind=args.kind, n=len(ds), out=args.out)
    return EXIT_OK


def cmd_train(args):
    ds = synthdata.load_dataset(args.data)
    if args.resume_from:
        cfg = load_config(os.path.join(args.resume_from, "config.txt"))
    else:
        cfg = _load_cfg(args)
    task = lookup_task(args.task) if args.task else lookup_task(ds.task_name)
    ckpt = train(cfg, ds, task=task, out_dir=args.out, resume_from=args.resume_from)
    _result(cmd="train", checkpoint=ckpt, steps=cfg.total_steps(len(ds)))
    return EXIT_OK


def cmd_sample(args):
    task = lookup_task(args.task) if args.task else None
    if task is not None:
        if args.mode == "reference" and not task.t_enc:
            raise ContractError(
                f"task {task.name!r} does not support reference-conditioned synthesis (t_enc = × in the task registry)"
            )
        if args.mode == "prior" and not task.t_sam:
            raise ContractError(f"task {task.name!r} does not support prior-sampled synthesis (t_sam = ×)")
    state = load_checkpoint(args.checkpoint)
    ds = synthdata.load_dataset(args.data)
    source = ds.examples[args.source_index].source
    reference = ds.examples[args.reference_index].target if args.reference_index is not None else None
    outs = evaluation.sample(state, source, args.mode, reference=reference, n=args.n, seed=_seed_from(args))
    os.makedirs(args.out, exist_ok=True)
    for i, s in enumerate(outs):
        write_tensor(os.path.join(args.out, f"sample_{i:03d}.m3dt"), s.data)
        if s.modality == Modality.IMAGE:
            synthdata.export_ppm(s, os.path.join(args.out, f"sample_{i:03d}.ppm"))
    _result(cmd="sample", mode=args.mode, n=len(outs), out=args.out)
    return EXIT_OK


def cmd_eval(args):
    state = load_checkpoint(args.checkpoint)
    ds = synthdata.load_dataset(args.dataset)
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    known = {"diversity", "domain", "realism", "coverage"}
    unknown = set(wanted) - known
    if unknown:
        raise ContractError(f"unknown metrics {sorted(unknown)}; available: {sorted(known)}")
    settings = evaluation.EvalSettings(seed=_seed_from(args), n_domain=args.n_domain, n_sources=args.n_sources, n_draws=args.n_draws)
    res = evaluation.evaluate_model(state, ds, settings)
    rows = {
        "diversity": res.diversity.grand_mean,
        "domain": res.domain.accuracy,
        "realism": res.realism,
        "coverage": res.n_miss,
    }
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name in wanted:
            writer.writerow([name, repr(float(rows[name]))])
    _result(cmd="eval", out=args.out, **{k: rows[k] for k in wanted})
    return EXIT_OK


def cmd_ablate(args):
    cfg = _load_cfg(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    report = evaluation.run_ablation(
        cfg,
        args.data,
        args.test_data,
        seeds,
        out_dir=args.out,
        workers=args.workers,
        settings=evaluation.EvalSettings(seed=_seed_from(args)),
    )
    med = report.medians
    _result(
        cmd="ablate",
        out=args.out,
        **{f"div_{v.replace(' ', '_')}": f"{med[v]['diversity']:.6f}" for v in evaluation.ABLATION_VARIANTS},
    )
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = dataclasses.replace(PRESETS[args.preset](), seed=_seed_from(args))
    dtype = np.float64 if args.precision == 64 else np.float32
    spec = synthdata.ShapeStyleSpec(resolution=16, k_styles=2, n_examples=max(cfg.batch_size, 2), seed=cfg.seed)
    ds = synthdata.gen_colored_shapes(spec)
    task = lookup_task("shapes→shapes")
    batch = ds.examples[: cfg.batch_size]
    rep_g, rep_d, state = objective_gradient_report(
        task, cfg, batch, dtype=dtype, epsilon=args.epsilon, seed=cfg.seed
    )
    worst = max(rep_g.max_rel_error, rep_d.max_rel_error)
    for name, err in {**rep_g.per_group, **rep_d.per_group}.items():
        print(f"group {name}: rel error {err:.3e}")
    _result(cmd="gradcheck", precision=args.precision, params=state.model.num_params(), max_rel_error=f"{worst:.3e}")
    return EXIT_OK


def cmd_inspect_tokens(args):
    state = load_checkpoint(args.checkpoint)
    if not state.cfg.use_token_layer:
        raise ContractError("checkpoint was trained without the token layer; nothing to inspect")
    ds = synthdata.load_dataset(args.data)
    n = min(args.n, len(ds))
    refs = [ds.examples[i].reference for i in range(n)]
    _, weights = evaluation.encode_reference_mu(state, refs)
    mean_w = weights.mean(axis=1)  # average over heads
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["reference"] + [f"token_{j}" for j in range(mean_w.shape[1])])
        for i in range(n):
            writer.writerow([i] + [repr(float(x)) for x in mean_w[i]])
    _result(cmd="inspect-tokens", n_refs=n, n_tokens=mean_w.shape[1], out=args.out)
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="m3dgan", description="Multi-modal multi-domain translation GAN toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[], help="generate a synthetic paired dataset")
    p.add_argument("--kind", required=True, choices=sorted(_SPEC_TYPES))
    p.add_argument("--spec", help="key=value spec file; omitted keys use defaults")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="generation seed (fallback: M3D_SEED)")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train one translation task")
    p.add_argument("--task", help="task name from the registry (default: the dataset's task)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--config", help="config file (overrides --preset)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named config preset")
    p.add_argument("--seed", type=int, help="training seed (fallback: M3D_SEED)")
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics.csv")
    p.add_argument("--resume-from", help="checkpoint directory to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sample", help="synthesize from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", help="validate the mode against this registry task before loading")
    p.add_argument("--data", required=True, help="dataset directory supplying sources/references")
    p.add_argument("--mode", required=True, choices=("reference", "prior"))
    p.add_argument("--source-index", type=int, default=0)
    p.add_argument("--reference-index", type=int)
    p.add_argument("--n", type=int, default=1, help="number of prior draws")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="output directory for samples")
    p.set_defaults(fn=cmd_sample)

    p = sub.add_parser("eval", help="run metrics against a labelled dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--metrics", default="diversity,domain,realism,coverage")
    p.add_argument("--n-domain", type=int, default=500)
    p.add_argument("--n-sources", type=int, default=25)
    p.add_argument("--n-draws", type=int, default=8)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and score the four loss variants")
    p.add_argument("--config", help="base config file")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--data", required=True, help="training dataset directory")
    p.add_argument("--test-data", required=True, help="held-out dataset directory")
    p.add_argument("--seeds", required=True, help="comma-separated seeds (>= 3)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, help="evaluation seed")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full objective")
    p.add_argument("--preset", default="micro", choices=sorted(PRESETS))
    p.add_argument("--precision", type=int, default=64, choices=(32, 64))
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("inspect-tokens", help="dump attention weights over the token bank")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory supplying references")
    p.add_argument("--n", type=int, default=32, help="number of references")
    p.add_argument("--out", required=True, help="CSV path (rows = references, cols = tokens)")
    p.set_defaults(fn=cmd_inspect_tokens)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        code = args.fn(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        _result(status="usage-error")
        code = EXIT_CONTRACT
    except (ContractError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        _result(status="contract-error")
        code = EXIT_CONTRACT
    except DivergedError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        _result(status="diverged")
        code = EXIT_DIVERGED
    except (ArchiveError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        _result(status="io-error")
        code = EXIT_IO
    return code


if __name__ == "__main__":
    sys.exit(main())
