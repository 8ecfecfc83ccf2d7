"""Command-line entry point: prep, train, eval, ablate, generate."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import torch

from . import __version__, evaluation, generation, training
from .config import ConfigError, config_hash, load_config
from .corpus import CorpusError, DatasetCache, ingest_directory
from .model import CheckpointError, load_checkpoint, read_checkpoint_header

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_TRAIN = 3


def _write_manifest(out_dir: Path, command: str, cfg: dict, seed: int) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_hash": config_hash(cfg),
        "seed": seed,
        "version": __version__,
        "config": cfg,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _common(parser):
    parser.add_argument("--config", type=Path, default=None, help="YAML config file")
    parser.add_argument("--override", action="append", default=[], metavar="K=V",
                        help="dotted config override, repeatable")
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--out", type=Path, required=True, help="output directory")
    parser.add_argument("--deterministic", action="store_true")


def build_parser():
    parser = argparse.ArgumentParser(prog="phrasevae")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("prep", help="build the dataset cache from a MIDI directory")
    p.add_argument("midi_dir", type=Path)
    _common(p)

    p = sub.add_parser("train", help="run the training pipeline or one phase")
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--phase", choices=list(training.PHASE_PREREQS), default=None)
    _common(p)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--which", choices=["acc", "probe", "curves"], required=True)
    p.add_argument("--records-dir", type=Path, default=None, help="for --which curves")
    _common(p)

    p = sub.add_parser("ablate", help="train and score the ablation table")
    p.add_argument("--cache", type=Path, required=True)
    _common(p)

    p = sub.add_parser("generate", help="latent-space generation to MIDI")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--cache", type=Path, required=True)
    p.add_argument("--operation", choices=["swap", "interpolate", "variate"], required=True)
    p.add_argument("--phrase-a", type=int, default=0, help="phrase index in the cache")
    p.add_argument("--phrase-b", type=int, default=1)
    p.add_argument("--weights", type=float, nargs="+", default=[0.0, 0.25, 0.5, 0.75, 1.0])
    p.add_argument("--sigma", type=float, default=0.5)
    p.add_argument("--n-samples", type=int, default=3)
    p.add_argument("--tempo", type=float, default=120.0)
    _common(p)
    return parser


def _setup(args):
    cfg = load_config(args.config, args.override)
    if args.seed is not None:
        cfg["train"]["seed"] = args.seed
        cfg["data"]["seed"] = args.seed
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    return cfg


def cmd_prep(args) -> int:
    cfg = _setup(args)
    cache, report = ingest_directory(
        args.midi_dir,
        hop_bars=cfg["data"]["hop_bars"],
        split_ratio=cfg["data"]["split_ratio"],
        seed=cfg["data"]["seed"],
    )
    args.out.mkdir(parents=True, exist_ok=True)
    cache.save(args.out / "cache.npz")
    (args.out / "ingestion_report.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    _write_manifest(args.out, "prep", cfg, cfg["data"]["seed"])
    print(f"cache: {len(cache.melodies)} phrases from {len(report['kept'])} songs "
          f"({len(report['dropped'])} dropped), hash {cache.content_hash()[:12]}")
    return 0


def cmd_train(args) -> int:
    cfg = _setup(args)
    cache = DatasetCache.load(args.cache)
    _write_manifest(args.out, "train", cfg, cfg["train"]["seed"])
    if args.phase:
        record, ckpt = training.run_phase(cfg, args.phase, cache, args.out)
        print(f"{args.phase}: {len(record.epochs)} epochs, "
              f"final acc {record.epochs[-1]['recon_acc']:.3f}, checkpoint {ckpt}")
    else:
        records, ckpt = training.run_pipeline(cfg, cache, args.out)
        for phase, record in records.items():
            print(f"{phase}: {len(record.epochs)} epochs, final acc {record.epochs[-1]['recon_acc']:.3f}")
        print(f"final checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _setup(args)
    cache = DatasetCache.load(args.cache)
    _write_manifest(args.out, "eval", cfg, cfg["train"]["seed"])
    if args.which == "curves":
        records_dir = args.records_dir or args.checkpoint.parent
        records = {
            path.stem.replace(".record", ""): training.RunRecord.load(path)
            for path in sorted(records_dir.glob("*.record.json"))
        }
        table = evaluation.emit_curves(records)
        (args.out / "curves.tsv").write_text(table)
        print(f"wrote {args.out / 'curves.tsv'}")
        return 0

    model, header = load_checkpoint(args.checkpoint)
    idx = cache.subset(cache.split.test) if len(cache.split.test) else cache.subset(cache.split.train)
    phrases = torch.from_numpy(cache.melodies[idx]).long()
    if args.which == "acc":
        acc = evaluation.reconstruction_accuracy(model, phrases)
        (args.out / "accuracy.tsv").write_text(
            "recon_acc\trhythm_acc\tn_sequences\tn_steps\n"
            f"{acc.recon_acc:.6f}\t{acc.rhythm_acc:.6f}\t{acc.n_sequences}\t{acc.n_steps}\n"
        )
        print(f"recon_acc={acc.recon_acc:.4f} rhythm_acc={acc.rhythm_acc:.4f}")
    else:
        probe = evaluation.disentanglement_probe(model, phrases)
        lines = ["semitones\tdelta_zp\tdelta_zr"]
        for i, dp, dr in zip(probe.semitones, probe.delta_zp, probe.delta_zr):
            lines.append(f"{i}\t{dp:.6f}\t{dr:.6f}")
        (args.out / "probe.tsv").write_text("\n".join(lines) + "\n")
        print(f"probe over {probe.n_probe} phrases ({probe.n_excluded} excluded); "
              f"wrote {args.out / 'probe.tsv'}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _setup(args)
    cache = DatasetCache.load(args.cache)
    _write_manifest(args.out, "ablate", cfg, cfg["train"]["seed"])
    rows = evaluation.run_ablations(cfg, cache, args.out)
    for row in rows:
        print(f"{row['variant']}: recon {row['recon_acc']:.3f} rhythm {row['rhythm_acc']:.3f}")
    return 0


def cmd_generate(args) -> int:
    cfg = _setup(args)
    cache = DatasetCache.load(args.cache)
    model, header = load_checkpoint(args.checkpoint)
    args.out.mkdir(parents=True, exist_ok=True)
    seed = cfg["train"]["seed"]
    phrase_a = torch.from_numpy(cache.melodies[args.phrase_a]).long()
    phrase_b = torch.from_numpy(cache.melodies[args.phrase_b]).long()

    outputs = []
    if args.operation == "swap":
        piece_c, piece_d = generation.style_transfer(phrase_a, phrase_b, model)
        outputs = [("swap_c.mid", piece_c), ("swap_d.mid", piece_d)]
    elif args.operation == "interpolate":
        pieces = generation.interpolate_rhythm(phrase_a, phrase_b, args.weights, model)
        outputs = [(f"interp_{t:g}.mid", piece) for t, piece in zip(args.weights, pieces)]
    else:
        pieces = generation.theme_variation(phrase_a, args.sigma, args.n_samples, seed, model)
        outputs = [(f"variate_{k}.mid", piece) for k, piece in enumerate(pieces)]

    for name, tokens in outputs:
        generation.export_midi(tokens, args.out / name, tempo_bpm=args.tempo)
    manifest = {
        "operation": args.operation,
        "checkpoint": str(args.checkpoint),
        "checkpoint_stage": header["stage"],
        "seed": seed,
        "parameters": {
            "phrase_a": args.phrase_a,
            "phrase_b": args.phrase_b,
            "weights": args.weights,
            "sigma": args.sigma,
            "n_samples": args.n_samples,
            "tempo": args.tempo,
        },
        "files": [name for name, _ in outputs],
        "config_hash": config_hash(cfg),
    }
    (args.out / "generation_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    print(f"wrote {len(outputs)} MIDI files to {args.out}")
    return 0


COMMANDS = {
    "prep": cmd_prep,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "generate": cmd_generate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else 0
    try:
        return COMMANDS[args.verb](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except training.TrainingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
