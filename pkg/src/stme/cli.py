"""Command-line entry points: data synthesis, the three training stages,
generation, editing, evaluation, and the quantizer ablation.

Exit codes: 0 success, 1 usage error, 2 runtime failure. STME_THREADS caps
worker (and BLAS) threads; the default of 1 is the fully deterministic mode.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import load_config
from .generation import edit_motion, generate_motion
from .metrics import FeatureExtractor, build_feature_set, evaluate
from .motion import LabelTableProvider, read_mgrid, synth_motion, write_mgrid
from .parallel import thread_count
from .rng import make_rng
from .train import (build_datasets, load_mask_model, load_residual_model,
                    load_vq_model, run_ablation, synth_dataset,
                    train_mask_transformer, train_residual_transformer, train_vqvae)

_BLAS_LIMIT = None


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    parser = _Parser(prog="stme", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic labeled dataset as .mgrd files")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--clips", type=int, required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--joints", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--fps", type=int, default=20)
    p.add_argument("--out", required=True)

    for name in ("train-vq", "train-mask", "train-res", "ablate"):
        p = sub.add_parser(name)
        p.add_argument("config")
        p.add_argument("--resume", default=None)
        p.add_argument("--log-every", type=int, default=50)

    p = sub.add_parser("generate", help="sample one motion clip from a trained run")
    p.add_argument("--ckpt", required=True, help="run directory with vq/mask/res checkpoints")
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--joints", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--cfg-scale", type=float, default=None)
    p.add_argument("--temperature", type=float, default=None)

    p = sub.add_parser("edit", help="regenerate only the masked region of a clip")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--label", type=int, required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="metric suite over generated vs reference clips")
    p.add_argument("--gen", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--repeats", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-feat", type=int, default=64)
    p.add_argument("--out", default=None, help="prefix for report.json/.csv")
    p.add_argument("--svg", action="store_true")
    return parser


def _read_dir(path) -> list:
    names = sorted(n for n in os.listdir(path) if n.endswith(".mgrd"))
    if not names:
        raise ValueError(f"no .mgrd files in {path}")
    return [read_mgrid(os.path.join(path, n)) for n in names]


def _load_run(ckpt_dir):
    vq, vq_meta = load_vq_model(os.path.join(ckpt_dir, "vq.stck"))
    mask_model, mask_meta = load_mask_model(os.path.join(ckpt_dir, "mask.stck"))
    res_path = os.path.join(ckpt_dir, "res.stck")
    res_model = None
    if os.path.exists(res_path):
        res_model, _ = load_residual_model(res_path)
    provider = LabelTableProvider(mask_meta["classes"], mask_meta["transformer"]["d_text"],
                                  seed=mask_meta["provider_seed"])
    return vq, vq_meta, mask_model, res_model, provider


def _schedule_from(meta: dict, args) -> "GenerationSchedule":
    from .generation import GenerationSchedule

    gen = meta.get("config", {}).get("generation", {})
    return GenerationSchedule(
        iterations=args.iterations if getattr(args, "iterations", None) else gen.get("iterations", 10),
        cfg_scale=args.cfg_scale if getattr(args, "cfg_scale", None) is not None else gen.get("cfg_scale", 4.0),
        temperature=args.temperature if getattr(args, "temperature", None) else gen.get("temperature", 1.0),
        confidence_noise=gen.get("confidence_noise", False),
    )


def cmd_synth(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    grids = synth_dataset(args.classes, args.clips, args.frames, args.joints,
                          args.seed, "cli", args.fps)
    for i, grid in enumerate(grids):
        write_mgrid(grid, os.path.join(args.out, f"clip{i:05d}.mgrd"))
    print(f"wrote {len(grids)} clips to {args.out}")
    return 0


def cmd_train_vq(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    train, _ = build_datasets(cfg)
    out = os.path.join(cfg.out_dir, "vq.stck")
    _, history, _ = train_vqvae(cfg, train, resume=args.resume, out_path=out,
                                log_every=args.log_every)
    print(f"final loss {history[-1]:.5f}; checkpoint at {out}")
    return 0


def cmd_train_mask(args) -> int:
    cfg = load_config(args.config)
    train, _ = build_datasets(cfg)
    vq, _ = load_vq_model(os.path.join(cfg.out_dir, "vq.stck"))
    out = os.path.join(cfg.out_dir, "mask.stck")
    _, history, _ = train_mask_transformer(cfg, vq, train, resume=args.resume,
                                           out_path=out, log_every=args.log_every)
    print(f"final loss {history[-1]:.5f}; checkpoint at {out}")
    return 0


def cmd_train_res(args) -> int:
    cfg = load_config(args.config)
    train, _ = build_datasets(cfg)
    vq, _ = load_vq_model(os.path.join(cfg.out_dir, "vq.stck"))
    out = os.path.join(cfg.out_dir, "res.stck")
    _, history, _ = train_residual_transformer(cfg, vq, train, resume=args.resume,
                                               out_path=out, log_every=args.log_every)
    print(f"final loss {history[-1]:.5f}; checkpoint at {out}")
    return 0


def cmd_generate(args) -> int:
    vq, vq_meta, mask_model, res_model, provider = _load_run(args.ckpt)
    schedule = _schedule_from(vq_meta, args)
    joints = args.joints if args.joints is not None else vq_meta["joints"]
    cond = provider.embed(args.label).vector
    rng = make_rng(args.seed, "generate")
    grid = generate_motion(vq, mask_model, res_model, cond, args.frames, joints,
                           schedule, rng, label=args.label)
    write_mgrid(grid, args.out)
    print(f"wrote {grid.frames}x{grid.joints} clip to {args.out}")
    return 0


def cmd_edit(args) -> int:
    vq, vq_meta, mask_model, res_model, provider = _load_run(args.ckpt)
    schedule = _schedule_from(vq_meta, args)
    grid = read_mgrid(args.input)
    cond = provider.embed(args.label).vector
    rng = make_rng(args.seed, "edit")
    edited, _, _ = edit_motion(grid, args.mask, cond, schedule, vq, mask_model,
                               res_model, rng)
    write_mgrid(edited, args.out)
    print(f"wrote edited clip to {args.out}")
    return 0


def cmd_eval(args) -> int:
    gen = _read_dir(args.gen)
    ref = _read_dir(args.ref)
    if gen[0].joints != ref[0].joints:
        raise ValueError("generated and reference joint counts differ")
    labels = {g.label for g in gen + ref}
    if None in labels:
        raise ValueError("all clips need labels for evaluation")
    provider = LabelTableProvider(max(labels) + 1, seed=args.seed)
    extractor = FeatureExtractor(ref[0].joints, d_feat=args.d_feat, seed=args.seed)
    ref_labels = [g.label for g in ref]
    extractor.calibrate_conditions(ref, ref_labels, provider)
    gen_set = build_feature_set(extractor, gen, provider)
    ref_set = build_feature_set(extractor, ref, provider)
    report = evaluate(gen_set, ref_set, repeats=args.repeats, seed=args.seed)
    for name, stat in report.metrics.items():
        print(f"{name:>10}: {stat['mean']:.4f} +/- {stat['ci95']:.4f}")
    if args.out:
        with open(args.out + ".json", "w") as fh:
            fh.write(report.to_json())
        with open(args.out + ".csv", "w") as fh:
            fh.write(report.to_csv())
        if args.svg:
            with open(args.out + ".svg", "w") as fh:
                fh.write(report.to_svg())
        print(f"reports written to {args.out}.json/.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    os.makedirs(cfg.out_dir, exist_ok=True)
    rows, csv_text, wins = run_ablation(cfg, log_every=args.log_every)
    out = os.path.join(cfg.out_dir, "ablation.csv")
    with open(out, "w") as fh:
        fh.write(csv_text)
    print(csv_text)
    print(f"joint2d wins {wins}/{cfg.ablation.seeds}; report at {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train-vq": cmd_train_vq,
    "train-mask": cmd_train_mask,
    "train-res": cmd_train_res,
    "generate": cmd_generate,
    "edit": cmd_edit,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def _limit_blas_threads():
    global _BLAS_LIMIT
    try:
        import threadpoolctl

        _BLAS_LIMIT = threadpoolctl.threadpool_limits(thread_count())
    except Exception:
        pass


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    _limit_blas_threads()
    try:
        return _COMMANDS[args.command](args)
    except Exception as err:  # runtime failure contract: exit code 2
        print(f"stme: {type(err).__name__}: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
