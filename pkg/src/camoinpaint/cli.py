"""Command line entry point.

Exit codes: 0 success, 2 config error, 3 data error, 4 checkpoint error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import Ablation, RunConfig, load_config
from .data import DatasetManifest
from .errors import ConfigError, CamoError


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _manifest(path) -> DatasetManifest:
    return DatasetManifest.read(path)


def cmd_train_vqvae(args):
    from .pipeline import reconstruction_mse, train_vqvae

    cfg = _config(args)
    m = _manifest(args.data)
    pairs = m.load("train", cfg.image_size)
    model, path = train_vqvae(cfg, pairs, args.out, resume=args.resume, max_steps=args.max_steps)
    print(f"wrote {path} (train reconstruction MSE {reconstruction_mse(model, pairs[:256]):.5f})")


def cmd_train_ldm(args):
    from .checkpoint import file_hash
    from .diffusion import encode_pairs
    from .pipeline import load_autoencoder, train_ldm

    cfg = _config(args)
    ablation = Ablation.parse(args.ablation) if args.ablation else cfg.ablation
    cfg = cfg.replace(use_bkrm=ablation.bkrm, use_rcem=ablation.rcem, use_lmp=ablation.lmp)
    ae, _ = load_autoencoder(args.autoencoder, cfg)
    pairs = _manifest(args.data).load("train", cfg.image_size)
    latents = encode_pairs(ae, pairs, cfg)
    _, path, records = train_ldm(cfg, ablation, ae, latents, args.out, file_hash(args.autoencoder),
                                 resume=args.resume, max_steps=args.max_steps)
    last = records[-1] if records else None
    msg = f" (step {last.step}: L_diff {last.L_diff:.4f} L_bgrec {last.L_bgrec:.4f})" if last else ""
    print(f"wrote {path} [{ablation.name}]{msg}")


def cmd_generate(args):
    from .pipeline import generate

    m = _manifest(args.data)
    cfg = load_config(args.config) if args.config else None
    size = cfg.image_size if cfg else _ckpt_size(args.checkpoint)
    pairs = m.load(args.split if args.split != "all" else None, size)
    paths = generate(args.checkpoint, args.autoencoder, pairs, args.out, seed=args.seed or 0,
                     steps=args.steps, debug_dir=args.debug_dir, config=cfg, allow_mismatch=args.allow_mismatch)
    print(f"wrote {len(paths)} images to {args.out}")


def _ckpt_size(path):
    from .checkpoint import Checkpoint

    return Checkpoint.load(path).config["image_size"]


def cmd_evaluate(args):
    from .evaluation import evaluate

    cfg = _config(args)
    out = args.out or Path(args.generated) / "metrics.json"
    report = evaluate(args.generated, args.reference, config=cfg, out_path=out,
                      claim_published_comparable=args.published_comparable)
    print(report.summary())


def cmd_ablate(args):
    from .pipeline import ablate

    cfg = _config(args)
    seeds = tuple(int(s) for s in args.seeds.split(","))
    report_dir = Path(args.out)
    ablate(cfg, _manifest(args.data), report_dir, seeds, progress=print)
    print((report_dir / "ablation.txt").read_text(), end="")


def cmd_make_toy(args):
    from .toy import make_toy_dataset

    m = make_toy_dataset(args.out, args.n, args.test_fraction, args.seed or 0, args.size)
    print(f"wrote {len(m)} pairs to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="camoinpaint", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="flat key = value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=sp.prog.split()[-1] != "evaluate")
        if data:
            sp.add_argument("--data", required=True, help="dataset root or manifest file")
        return sp

    sp = common(sub.add_parser("train-vqvae", help="train the autoencoder"))
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train_vqvae)

    sp = common(sub.add_parser("train-ldm", help="train the diffusion model"))
    sp.add_argument("--autoencoder", required=True)
    sp.add_argument("--ablation", help="base, bkrm, bkrm+rcem, bkrm+rcem+lmp (default: from config)")
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--max-steps", type=int)
    sp.set_defaults(func=cmd_train_ldm)

    sp = common(sub.add_parser("generate", help="generate camouflaged images"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--autoencoder", required=True)
    sp.add_argument("--split", default="test", choices=("train", "test", "all"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--debug-dir", help="dump superpixel label images and attention matrices here")
    sp.add_argument("--allow-mismatch", action="store_true", help="load despite a config hash mismatch")
    sp.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_generate)

    sp = common(sub.add_parser("evaluate", help="FID/KID between two image directories"), data=False)
    sp.add_argument("--generated", required=True)
    sp.add_argument("--reference", required=True)
    sp.add_argument("--published-comparable", action="store_true",
                    help="label the report comparable to published numbers (refused for the desk extractor)")
    sp.set_defaults(func=cmd_evaluate)

    sp = common(sub.add_parser("ablate", help="run the four-row module ablation"))
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--resume", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("make-toy", help="write a synthetic camouflage dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--test-fraction", type=float, default=0.25)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_make_toy)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        args.func(args)
    except CamoError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
