"""Command-line interface.

Subcommands: gen-data, train, reconstruct, score, classify, eval, mesh-info.
Exit codes: 0 success, 2 usage/input error, 3 numerical fault.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import pipeline
from .config import ConfigError, load_config, profile_json
from .errors import NumericalFault
from .icosphere import build_icosphere
from .normative import kfold_cv
from .synthdata import gen_cohort


def _add_common(parser):
    parser.add_argument("--config", type=Path, default=None,
                        help="JSON run config (defaults to the desk profile)")
    parser.add_argument("--profile", default="desk", choices=("desk", "paper"),
                        help="base profile when no config file is given")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--workers", type=int, default=1,
                        help="parallel subjects for reconstruct/eval "
                             "(outputs are worker-count invariant)")


def _load(args):
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    return load_config(args.config, profile=args.profile, overrides=overrides)


def cmd_gen_data(args) -> int:
    cfg = _load(args)
    rows = gen_cohort(cfg.cohort, args.out)
    sizes = cfg.cohort.group_sizes()
    print(f"wrote {len(rows)} subjects to {args.out} "
          f"(order {cfg.cohort.order}, seed {cfg.cohort.seed})")
    for group, count in sizes.items():
        print(f"  {group}: {count}")
    return 0


def cmd_train(args) -> int:
    cfg = _load(args)
    dataset = pipeline.load_dataset(args.data)
    if dataset.atlas.order != cfg.mesh_order:
        print(f"error: dataset order {dataset.atlas.order} != config mesh_order "
              f"{cfg.mesh_order}", file=sys.stderr)
        return 2
    log_path = args.log or Path(str(args.out) + ".log")
    model, losses = pipeline.train_from_config(
        cfg, dataset, args.out, no_mask=args.no_mask, log_path=log_path
    )
    print(f"trained {cfg.optimizer.epochs} epochs; "
          f"first-epoch loss {losses[0]:.4f}, final {losses[-1]:.4f}")
    print(f"checkpoint: {args.out}")
    return 0


def _resolve_subjects(dataset, spec: str):
    if spec == "test":
        return [s.subject_id for s in dataset.by_group(*pipeline.TEST_GROUPS)]
    if spec == "all":
        return [s.subject_id for s in dataset.subjects]
    ids = [tok for tok in spec.split(",") if tok]
    for sid in ids:
        dataset.get(sid)  # raises KeyError for unknown ids
    return ids


def cmd_reconstruct(args) -> int:
    cfg = _load(args)
    model, metadata, sched = pipeline.open_checkpoint(args.checkpoint)
    dataset = pipeline.load_dataset(args.data)
    if model.config.base_order != dataset.atlas.order:
        print(f"error: checkpoint order {model.config.base_order} != dataset "
              f"order {dataset.atlas.order}", file=sys.stderr)
        return 2
    subject_ids = _resolve_subjects(dataset, args.subjects)
    sampler = cfg.sampler
    if args.t_noise is not None:
        sampler.t_noise = args.t_noise
    if args.n_samples is not None:
        sampler.n_samples = args.n_samples
    pipeline.reconstruct_subjects(
        model, sched, dataset, subject_ids, sampler, args.out,
        no_mask=bool(metadata.get("no_mask")), workers=max(1, args.workers),
    )
    print(f"wrote {sampler.n_samples} reconstructions for "
          f"{len(subject_ids)} subjects to {args.out}")
    return 0


def cmd_score(args) -> int:
    dataset = pipeline.load_dataset(args.data)
    subject_ids = _resolve_subjects(dataset, args.subjects)
    rows, skipped = pipeline.score_dataset(
        dataset, args.samples, subject_ids,
        template_baseline=args.template_baseline,
    )
    for sid, why in skipped:
        print(f"warning: skipped {sid}: {why}", file=sys.stderr)
    if skipped:
        print(f"warning: {len(skipped)} subject(s) excluded", file=sys.stderr)
    pipeline.write_score_table(rows, args.out)
    summary = pipeline.score_summary(rows)
    print(f"scores: {args.out} ({len(rows)} subjects, "
          f"{len(rows[0]['scores'])} ROIs)")
    for group, st in summary["groups"].items():
        print(f"  {group}: mean|z| {st['mean_abs_z']:.3f} +/- {st['sd']:.3f} "
              f"(n={st['n']})")
    for name, p in summary["p_values"].items():
        print(f"  welch {name}: p = {p:.3e}")
    return 0


def cmd_classify(args) -> int:
    rows = pipeline.read_score_table(args.scores)
    seed = args.seed if args.seed is not None else 0
    for contrast in ("mci", "ad"):
        if not any(r["group"] == contrast for r in rows):
            continue
        feats, labels = pipeline.classification_features(rows, contrast)
        report = kfold_cv(feats, labels, k=args.folds, seed=seed,
                          invert_split=args.invert_split)
        print(f"cn_test vs {contrast}: accuracy {report.accuracy:.4f} "
              f"precision {report.precision:.4f} recall {report.recall:.4f}")
    return 0


def cmd_eval(args) -> int:
    dataset = pipeline.load_dataset(args.data)
    subject_ids = _resolve_subjects(dataset, args.subjects)
    stats = pipeline.evaluate_reconstructions(
        dataset, args.samples, subject_ids, workers=max(1, args.workers)
    )
    print(f"reconstruction quality over {stats['n_subjects']} subjects:")
    print(f"  SI SSIM   : {stats['si_ssim']['mean']:.4f} +/- {stats['si_ssim']['sd']:.4f}")
    print(f"  CT SSIM   : {stats['ct_ssim']['mean']:.4f} +/- {stats['ct_ssim']['sd']:.4f}")
    print(f"  CT MSE(mm): {stats['ct_mse_mm']['mean']:.4f} +/- {stats['ct_mse_mm']['sd']:.4f}")
    return 0


def cmd_mesh_info(args) -> int:
    mesh = build_icosphere(args.order)
    n_edges = np.vstack([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]],
                         mesh.faces[:, [2, 0]]])
    n_edges = len(np.unique(np.sort(n_edges, axis=1), axis=0))
    degrees = (mesh.neighbors[:, :6] != mesh.neighbors[:, [0]]).sum(axis=1) + 1
    pentagons = int((degrees == 5).sum())
    euler = mesh.n_vertices - n_edges + len(mesh.faces)
    print(f"order {mesh.order}: V={mesh.n_vertices} E={n_edges} "
          f"F={len(mesh.faces)} euler={euler} pentagons={pentagons}")
    return 0


def cmd_show_config(args) -> int:
    print(profile_json(args.profile))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="icodiff",
        description="Conditional surface diffusion for cortical normative modeling",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    _add_common(p)
    p.add_argument("--out", type=Path, required=True, help="dataset directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the conditional model on CN-train")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, default=None, help="epoch log path")
    p.add_argument("--no-mask", action="store_true",
                   help="ablation: zero the segmentation mask channels")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="partial-noise reconstructions")
    _add_common(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="samples directory")
    p.add_argument("--subjects", default="test",
                   help='"test", "all", or comma-separated subject ids')
    p.add_argument("--t-noise", type=int, default=None)
    p.add_argument("--n-samples", type=int, default=None)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("score", help="per-ROI abnormal z-scores")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="score table path")
    p.add_argument("--subjects", default="test")
    p.add_argument("--template-baseline", action="store_true",
                   help="score against age-nearest CN-train subjects instead")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("classify", help="k-fold SVM on score vectors")
    _add_common(p)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--folds", type=int, default=10)
    p.add_argument("--invert-split", action="store_true",
                   help="train on 1 fold, test on k-1")
    p.set_defaults(func=cmd_classify)

    p = sub.add_parser("eval", help="SSIM/MSE of reconstructions vs originals")
    _add_common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--samples", type=Path, required=True)
    p.add_argument("--subjects", default="test")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("mesh-info", help="print mesh counts for an order")
    p.add_argument("--order", type=int, required=True)
    p.set_defaults(func=cmd_mesh_info)

    p = sub.add_parser("show-config", help="print a profile's JSON config")
    p.add_argument("--profile", default="desk", choices=("desk", "paper"))
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalFault as exc:
        print(f"numerical fault: {exc}", file=sys.stderr)
        return 3
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
