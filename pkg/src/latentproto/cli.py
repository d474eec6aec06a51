"""Command-line pipeline: synth -> mine -> train -> eval -> visualize."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import core, synthdata
from .core import load_dataset, sample_episodes
from .encoder import EncoderConfig, build_encoder, encoder_fingerprint, load_checkpoint, restore_encoder
from .evaluator import EvalConfig, palette_legend, predict_episode, render_panel, run_eval
from .miner import (
    annotate_dataset,
    build_rep_set,
    collect_prototypes,
    save_rep_set,
)
from .rectifier import bank_path_for, build_region_bank, load_region_bank, save_region_bank
from .trainer import TrainConfig, run_training


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="latentproto")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted latent classes")
    p.add_argument("--out", required=True)
    p.add_argument("--base", type=int, default=2)
    p.add_argument("--latent", type=int, default=2)
    p.add_argument("--images", type=int, default=60)
    p.add_argument("--size", type=int, default=96)
    p.add_argument("--distractors", type=int, default=0)
    _add_seed(p)

    p = sub.add_parser("mine", help="build the representative set and pseudo-annotate images")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--clusters", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--unlabeled-dir", default=None)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--checkpoint", default=None,
                   help="mine with this trained encoder instead of a fresh one")
    _add_seed(p)

    p = sub.add_parser("train", help="joint episodic + pseudo-mask training")
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--pseudo", default=None, help="pseudo-mask directory from `mine`")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--no-mine", action="store_true", help="disable the pseudo branch")
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--pairs", type=int, default=None)
    p.add_argument("--pseudo-batch", type=int, default=None)
    p.add_argument("--crop", type=int, default=None)
    p.add_argument("--shots", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--channels", type=int, default=None)
    p.add_argument("--ema-decay", type=float, default=None)
    p.add_argument("--bg-momentum", type=float, default=None)
    _add_seed(p)

    p = sub.add_parser("eval", help="episode-based mIoU evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    p.add_argument("--rectify-fg", action="store_true")
    p.add_argument("--rectify-bg", action="store_true")
    p.add_argument("--no-ema", action="store_true")
    p.add_argument("--bank", default=None, help="region bank path (default: next to checkpoint)")
    p.add_argument("--out", required=True, help="report prefix; writes .json and .txt")

    p = sub.add_parser("bank", help="build the region bank sidecar for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--pseudo", required=True)
    p.add_argument("--out", default=None)

    p = sub.add_parser("visualize", help="write support/query/gt/prediction panels")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", default=None)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--shots", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--pseudo", default=None, help="also render pseudo masks with a legend strip")
    _add_seed(p)
    return parser


def _load(args):
    splits = args.splits or str(Path(args.data) / "splits.json")
    dataset = load_dataset(args.data, splits)
    if args.fold == -1:  # no held-out class: every class trains (mining whole D_tr)
        from .core import FoldSplit

        fold = FoldSplit(fold_index=-1, train_classes=tuple(sorted(dataset.universe)),
                         test_classes=())
    else:
        fold = dataset.folds[args.fold]
    return dataset, fold


def cmd_synth(args):
    cfg = synthdata.SynthConfig(
        num_base_classes=args.base, num_latent_classes=args.latent,
        images=args.images, image_size=args.size, seed=args.seed,
        distractors=args.distractors,
    )
    ids = synthdata.generate(cfg, args.out)
    print(f"wrote {len(ids)} images to {args.out}")
    return 0


def cmd_mine(args):
    core.configure_determinism()
    import torch

    torch.manual_seed(args.seed)
    dataset, fold = _load(args)
    if args.checkpoint:
        # mine with an encoder already trained on the labeled base classes;
        # the frozen mining encoder is its EMA copy
        payload = load_checkpoint(args.checkpoint)
        model = restore_encoder(payload, use_ema=True)
    else:
        model = build_encoder(EncoderConfig(feature_channels=args.channels))
    model.eval()
    p_fg, p_bg = collect_prototypes(dataset, fold, model)
    rep = build_rep_set(p_fg, p_bg, args.clusters, args.seed,
                        fingerprint=encoder_fingerprint(model))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_rep_set(rep, out / "repset.pkl")
    manifest = annotate_dataset(dataset, model, rep, out, seed=args.seed,
                                extra_unlabeled=args.unlabeled_dir)
    # the mining encoder is reused by `train`/`bank`; persist its weights
    import pickle

    weights = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    with open(out / "mining_encoder.pkl", "wb") as f:
        f.write(pickle.dumps({"channels": model.config.feature_channels,
                              "state": weights}, protocol=4))
    print(f"annotated {len(manifest['entries'])} images (k={rep.k}) under {args.out}")
    return 0


def cmd_train(args):
    overrides = {
        "total_steps": args.iters,
        "pairs_per_batch": args.pairs,
        "pseudo_per_batch": args.pseudo_batch,
        "crop": args.crop,
        "shots": args.shots,
        "lr": args.lr,
        "seed": args.seed,
        "feature_channels": args.channels,
        "param_ema_decay": args.ema_decay,
        "bg_proto_momentum": args.bg_momentum,
    }
    if args.config:
        config = TrainConfig.from_file(args.config, **overrides)
    else:
        config = TrainConfig(**{k: v for k, v in overrides.items() if v is not None})
    if args.no_mine:
        config.pseudo_per_batch = 0
    dataset, fold = _load(args)
    pseudo = None if args.no_mine else args.pseudo
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    run_training(dataset, pseudo, fold, config, out, log_path=out.with_suffix(".log"))
    print(f"checkpoint written to {out}")
    return 0


def cmd_bank(args):
    core.configure_determinism()
    dataset, fold = _load(args)
    payload = load_checkpoint(args.checkpoint)
    model = restore_encoder(payload, use_ema=True)
    bank = build_region_bank(dataset, fold, args.pseudo, model)
    out = args.out or bank_path_for(args.checkpoint)
    save_region_bank(bank, out)
    print(f"region bank with {len(bank)} images written to {out}")
    return 0


def cmd_eval(args):
    dataset, fold = _load(args)
    config = EvalConfig(
        episodes=args.episodes, seeds=tuple(args.seeds), shots=args.shots,
        rectify_fg=args.rectify_fg, rectify_bg=args.rectify_bg,
        use_ema_params=not args.no_ema,
    )
    bank = None
    if args.rectify_fg:
        bank_path = args.bank or bank_path_for(args.checkpoint)
        bank = load_region_bank(bank_path)
    report = run_eval(args.checkpoint, dataset, fold, config, bank=bank)
    Path(f"{args.out}.json").write_text(report.to_json() + "\n")
    Path(f"{args.out}.txt").write_text(report.to_text() + "\n")
    print(report.to_text())
    return 0


def cmd_visualize(args):
    core.configure_determinism()
    dataset, fold = _load(args)
    payload = load_checkpoint(args.checkpoint)
    model = restore_encoder(payload, use_ema=True)
    episodes = sample_episodes(dataset, fold, args.shots, args.count, args.seed,
                               use_test_classes=True)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, ep in enumerate(episodes):
        pred = predict_episode(model, ep, payload["global_bg"])
        panel = render_panel(ep, pred)
        Image.fromarray(panel).save(out / f"panel_{i:03d}.png")
    if args.pseudo:
        from .evaluator import colorize_labels
        from .miner import load_manifest, load_pseudo_mask

        manifest = load_manifest(args.pseudo)
        k = manifest["k"]
        Image.fromarray(palette_legend(k)).save(out / "pseudo_legend.png")
        for e in manifest["entries"][: args.count]:
            pm = load_pseudo_mask(args.pseudo, e["id"])
            Image.fromarray(colorize_labels(pm, k)).save(out / f"pseudo_{e['id']}.png")
    print(f"wrote {len(episodes)} panels to {out}")
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "mine": cmd_mine,
    "train": cmd_train,
    "bank": cmd_bank,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
