"""Evaluation: teacher-forced reconstruction accuracy, training curves,
the transposition disentanglement probe, and the ablation table."""

from __future__ import annotations

import json
import shutil
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .corpus import HOLD, DatasetCache, derive_rhythm
from .model import HierModel, LatentPair


class EvaluationError(Exception):
    pass


@dataclass
class AccuracyResult:
    recon_acc: float
    rhythm_acc: float
    n_sequences: int
    n_steps: int


@dataclass
class ProbeResult:
    semitones: list[int]
    delta_zp: list[float]
    delta_zr: list[float]
    n_probe: int
    n_excluded: int


@torch.no_grad()
def reconstruction_accuracy(model, melodies: torch.Tensor, batch_size: int = 64) -> AccuracyResult:
    """Per-step argmax accuracy under teacher forcing, melody and rhythm
    scored separately. Posterior means are used as the latent."""
    if melodies.shape[-1] != model.steps:
        raise EvaluationError(f"{melodies.shape[-1]}-step data does not match a {model.steps}-step model")
    mel_hits = rhy_hits = total = 0
    for lo in range(0, melodies.shape[0], batch_size):
        batch = melodies[lo : lo + batch_size].long()
        rhythm = torch.from_numpy(np.stack([derive_rhythm(m.numpy()) for m in batch])).long()
        post = model.encode(batch)
        z = LatentPair(post.mean_p, post.mean_r)
        out = model.decode(z, teacher_melody=batch, teacher_rhythm=rhythm)
        mel_logits, rhy_logits = out[-2], out[-1]
        mel_hits += int((mel_logits.argmax(-1) == batch).sum())
        rhy_hits += int((rhy_logits.argmax(-1) == rhythm).sum())
        total += batch.numel()
    return AccuracyResult(mel_hits / total, rhy_hits / total, melodies.shape[0], total)


@torch.no_grad()
def disentanglement_probe(model, melodies: torch.Tensor, semitones: list[int] | None = None) -> ProbeResult:
    """Transpose each probe melody up by i semitones, re-encode, and report
    the probe-set mean of sum(|delta posterior mean|) per factor."""
    semitones = semitones or list(range(1, 13))
    max_up = max(semitones)
    keep = []
    for i in range(melodies.shape[0]):
        mel = melodies[i]
        pitched = mel < HOLD
        if pitched.any() and int(mel[pitched].max()) + max_up <= 127:
            keep.append(i)
    excluded = melodies.shape[0] - len(keep)
    if not keep:
        raise EvaluationError("no probe melody survives transposition filtering")
    probe = melodies[keep].long()

    base = model.encode(probe)
    delta_zp, delta_zr = [], []
    for shift in semitones:
        shifted = probe.clone()
        pitched = shifted < HOLD
        shifted[pitched] += shift
        post = model.encode(shifted)
        delta_zp.append(float((post.mean_p - base.mean_p).abs().sum(dim=-1).mean()))
        delta_zr.append(float((post.mean_r - base.mean_r).abs().sum(dim=-1).mean()))
    return ProbeResult(semitones, delta_zp, delta_zr, len(keep), excluded)


def emit_curves(records: dict[str, "RunRecord"]) -> str:  # noqa: F821
    """Per-epoch accuracy series per variant as a TSV table."""
    lines = ["variant\tepoch\trecon_acc\trhythm_acc"]
    for variant, record in records.items():
        for entry in record.epochs:
            lines.append(f"{variant}\t{entry['epoch']}\t{entry['recon_acc']:.6f}\t{entry['rhythm_acc']:.6f}")
    return "\n".join(lines) + "\n"


def epochs_to_threshold(record, threshold: float) -> int | None:
    """First epoch whose test reconstruction accuracy meets the threshold."""
    for entry in record.epochs:
        if entry["recon_acc"] >= threshold:
            return entry["epoch"]
    return None


def run_ablations(cfg: dict, cache: DatasetCache, outdir) -> list[dict]:
    """Train and score the five ablation variants. Pretrain checkpoints
    are shared with the full run where configurations coincide."""
    from . import training  # deferred: training imports this module

    outdir = Path(outdir)
    eval_split = cfg["train"]["eval_on"]
    test_idx = cache.subset(cache.split.test if eval_split == "test" else cache.split.train)
    test_phrases = torch.from_numpy(cache.melodies[test_idx]).long()
    rows = []

    def score(model, label):
        model.eval()
        acc = reconstruction_accuracy(model, test_phrases)
        rows.append(
            {
                "variant": label,
                "recon_acc": acc.recon_acc,
                "rhythm_acc": acc.rhythm_acc,
                "seed": cfg["train"]["seed"],
            }
        )

    from .model import load_checkpoint

    full_dir = outdir / "full"
    training.run_pipeline(cfg, cache, full_dir)

    base_dir = outdir / "baseline"
    training.run_phase(cfg, "baseline8", cache, base_dir)
    score(load_checkpoint(base_dir / "baseline8.pt")[0], "baseline")
    score(load_checkpoint(full_dir / "pretrain8.pt")[0], "long")
    score(load_checkpoint(full_dir / "finetune2.pt")[0], "full")

    def variant_pipeline(name, ablation_key):
        vdir = outdir / name
        vdir.mkdir(parents=True, exist_ok=True)
        if ablation_key != "no_contrastive":
            # pretrain checkpoints are identical; reuse the full run's
            for phase in ("pretrain2", "pretrain4", "pretrain8"):
                for suffix in (".pt", ".pt.json", ".record.json", ".metrics.jsonl"):
                    src = full_dir / f"{phase}{suffix}"
                    if src.exists():
                        shutil.copy(src, vdir / src.name)
        vcfg = json.loads(json.dumps(cfg))
        vcfg["ablation"][ablation_key] = True
        training.run_pipeline(vcfg, cache, vdir)
        return load_checkpoint(vdir / "finetune2.pt")[0]

    score(variant_pipeline("no_cl", "no_contrastive"), "no_cl")
    score(variant_pipeline("no_fixed", "no_fixed"), "no_fixed")

    table = ["variant\trecon_acc\trhythm_acc\tseed"]
    for row in rows:
        table.append(f"{row['variant']}\t{row['recon_acc']:.6f}\t{row['rhythm_acc']:.6f}\t{row['seed']}")
    (outdir / "ablations.tsv").write_text("\n".join(table) + "\n")
    return rows
