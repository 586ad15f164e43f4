"""Command-line entry point: ``qgface <subcommand> ...``.

Subcommands: synth-data, train, eval, preview-aug, diagnose.  The only
environment variable consulted is ``QGFACE_OUT_DIR``, the default output
directory when ``--out`` is omitted.
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

OUT_ENV = "QGFACE_OUT_DIR"


def _default_out(sub):
    return Path(os.environ.get(OUT_ENV, "qgface-out")) / sub


def _parse_level(text):
    # "0.3" or "0.3:50" (downscale factor, optional jpeg quality)
    scale, _, quality = text.partition(":")
    return (float(scale), int(quality)) if quality else float(scale)


def cmd_synth_data(args):
    from .data import synth_generate, write_dataset, write_manifest

    levels = [_parse_level(t) for t in args.levels.split(",")]
    tiers = args.tiers.split(",") if args.tiers else None
    if tiers is not None and len(tiers) != len(levels):
        raise SystemExit(_usage_error(f"--tiers has {len(tiers)} names for {len(levels)} levels"))
    train, manifest = synth_generate(args.ids, args.per_id, levels, (args.size, args.size), seed=args.seed,
                                     probes_per_id=args.probes_per_id, tier_names=tiers)
    out = Path(args.out or _default_out("synth"))
    write_dataset(train, out / "train")
    write_manifest(manifest, out / "eval" / "manifest.txt")
    print(f"wrote {len(train)} training images ({train.n_identities} identities) to {out / 'train'}")
    print(f"wrote manifest with {len(manifest.gallery)} gallery, {len(manifest.probe)} probe images "
          f"and {len(manifest.verification_pairs)} pairs to {out / 'eval' / 'manifest.txt'}")
    return 0


def cmd_train(args):
    from .config import TrainConfig, load_config
    from .data import load_dataset
    from .train import fit

    config = load_config(args.config) if args.config else TrainConfig()
    overrides = dict(_parse_set(s) for s in args.set or [])
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        config = config.replace(**overrides)
    index = load_dataset(args.data)
    out = Path(args.out or _default_out("train"))
    state = fit(config, index, out_dir=out, resume=args.resume)
    print(f"trained {state.epoch} epochs ({state.step} steps); checkpoint at {out / 'checkpoint.pt'}")
    return 0


def _parse_set(text):
    import yaml

    key, sep, value = text.partition("=")
    if not sep or not key:
        raise SystemExit(_usage_error(f"--set expects key=value, got {text!r}"))
    return key.strip(), yaml.safe_load(value)


def cmd_eval(args):
    from .data import load_manifest
    from .diagnostics import write_rows
    from .encoder import embed_images
    from .errors import ProtocolError
    from .evaluation import (identification_by_tier, pair_scores, similarity_gap, tar_at_far,
                             verification_accuracy_from_scores)
    from .train import load_checkpoint

    state = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    manifest = load_manifest(args.manifest)
    emb = embed_images(state.encoder, manifest.load_images(size=state.config.image_size))
    out = Path(args.out or _default_out("eval"))
    out.mkdir(parents=True, exist_ok=True)

    if args.protocol == "verification":
        if not manifest.verification_pairs:
            raise ProtocolError(f"manifest {args.manifest} has no verification pairs")
        scores, same = pair_scores(emb, manifest.verification_pairs)
        acc = verification_accuracy_from_scores(scores, same, folds=args.folds)
        tar = tar_at_far(scores, same, args.far)
        write_rows(out / "verification_scores.csv", ["pair", "index_a", "index_b", "same", "score"],
                   [{"pair": i, "index_a": a, "index_b": b, "same": int(s), "score": float(sc)}
                    for i, ((a, b, s), sc) in enumerate(zip(manifest.verification_pairs, scores))])
        write_rows(out / "verification.csv", ["n_pairs", "folds", "accuracy", "far", "tar"],
                   [{"n_pairs": len(scores), "folds": args.folds, "accuracy": acc, "far": args.far, "tar": tar}])
        print(f"verification: {len(scores)} pairs, {args.folds}-fold accuracy {acc:.4f}, "
              f"TAR@FAR={args.far:g} {tar:.4f}")
    elif args.protocol == "identification":
        report = identification_by_tier(emb, manifest, k=args.k)
        rows = [{"tier": t, "n_probes": r["n_probes"], "k": args.k, "rank_k": r["rank_k"]}
                for t, r in report.items()]
        write_rows(out / "identification.csv", ["tier", "n_probes", "k", "rank_k"], rows)
        for r in rows:
            print(f"identification tier {r['tier']}: rank-{args.k} {r['rank_k']:.4f} ({r['n_probes']} probes)")
    else:
        g_idx = np.array([i for i, _ in manifest.gallery])
        g_lab = np.array([y for _, y in manifest.gallery])
        rows = []
        for tier in manifest.tiers:
            probes = manifest.probes_in(tier)
            p_idx = np.array([i for i, _ in probes])
            p_lab = np.array([y for _, y in probes])
            res = similarity_gap(emb[g_idx], g_lab, emb[p_idx], p_lab)
            res.write_csv(out / f"gap_{tier}.csv", p_lab)
            rows.append({"tier": tier, "n_probes": len(probes), "mean_matched": res.mean_matched,
                         "mean_best_unmatched": res.mean_best_unmatched, "gap": res.summary})
            print(f"gap tier {tier}: mean matched {res.mean_matched:.4f}, "
                  f"mean best unmatched {res.mean_best_unmatched:.4f}, gap {res.summary:.4f}")
        write_rows(out / "gap_summary.csv", ["tier", "n_probes", "mean_matched", "mean_best_unmatched", "gap"],
                   rows)
    return 0


def cmd_preview_aug(args):
    from PIL import Image

    from .augment import make_pair_batch, pair_grid
    from .config import TrainConfig, load_config
    from .data import load_dataset

    config = load_config(args.config) if args.config else TrainConfig()
    index = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    pick = np.sort(rng.choice(len(index), size=min(args.n, len(index)), replace=False))
    images = index.load_images(pick, size=config.image_size)
    originals, augmented = make_pair_batch(images, config.augment_config(), rng)
    out = Path(args.out or _default_out("preview") / "pairs.png")
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pair_grid(originals, augmented, columns=args.columns)).save(out)
    print(f"wrote {len(pick)} original/augmented pairs to {out}")
    return 0


def cmd_diagnose(args):
    from .data import load_dataset, load_manifest
    from .diagnostics import diagnose
    from .train import load_checkpoint

    state = load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    images = labels = manifest = None
    if args.data:
        index = load_dataset(args.data)
        rng = np.random.default_rng(args.seed)
        pick = np.sort(rng.choice(len(index), size=min(args.max_images, len(index)), replace=False))
        images = index.load_images(pick, size=state.config.image_size)
        labels = index.labels[pick]
    if args.manifest:
        manifest = load_manifest(args.manifest)
    run_dir = args.run_dir or Path(args.checkpoint).parent
    out = Path(args.out or _default_out("diagnose"))
    written = diagnose(state, out, images, labels, manifest, run_dir=run_dir, seed=args.seed,
                       plots=not args.no_plots)
    for path in written:
        print(path)
    return 0


def _existing(path, what):
    from .errors import IngestionError

    if not Path(path).is_file():
        raise IngestionError(f"{what} {path} does not exist")
    return path


def _usage_error(msg):
    print(f"qgface: error: {msg}", file=sys.stderr)
    return 2


def build_parser():
    p = argparse.ArgumentParser(prog="qgface", description="Quality-guided joint training for face recognition.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth-data", help="generate a synthetic mixed-quality dataset")
    s.add_argument("--ids", type=int, default=50)
    s.add_argument("--per-id", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--size", type=int, default=48, help="square image side in pixels")
    s.add_argument("--levels", default="1.0,0.5:75,0.3:50,0.18:30",
                   help="comma-separated probe degradations, scale[:jpeg_quality]")
    s.add_argument("--tiers", default="hq,d3,d2,d1", help="comma-separated tier names, one per level")
    s.add_argument("--probes-per-id", type=int, default=3)
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--config", help="YAML config file (defaults apply when omitted)")
    s.add_argument("--data", required=True, help="dataset root: <root>/<identity>/<image>")
    s.add_argument("--out")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--seed", type=int, help="override the config seed")
    s.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set quality.b=0.3 (repeatable)")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--protocol", choices=["verification", "identification", "gap"], required=True)
    s.add_argument("--far", type=float, default=1e-4)
    s.add_argument("--k", type=int, default=1)
    s.add_argument("--folds", type=int, default=10)
    s.add_argument("--seed", type=int, default=0, help="accepted for uniformity; evaluation draws no randomness")
    s.add_argument("--out")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("preview-aug", help="write a grid of original/augmented pairs")
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--n", type=int, default=16)
    s.add_argument("--columns", type=int, default=4)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help="output PNG path")
    s.set_defaults(func=cmd_preview_aug)

    s = sub.add_parser("diagnose", help="write diagnostic CSVs and plots for a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", help="training root, enables GST and quality histograms")
    s.add_argument("--manifest", help="evaluation manifest, enables similarity-gap histograms")
    s.add_argument("--run-dir", help="training output dir holding contrastive.csv (default: checkpoint dir)")
    s.add_argument("--max-images", type=int, default=512)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--no-plots", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_diagnose)
    return p


def main(argv=None):
    from .errors import QGFaceError

    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (QGFaceError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"qgface: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
