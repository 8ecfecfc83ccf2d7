"""Training phases and pipeline orchestration.

Five phases: pretrain2 (2-bar ELBO), pretrain4 (4-bar ELBO + cross-scale
contrastive vs frozen 2-bar), pretrain8 (same vs frozen 4-bar), finetune1
(hierarchical decoder with frozen encoder + per-level contrastive), finetune2
(whole network + cross-scale contrastive + phrase-level KL).
"""

from __future__ import annotations

import json
import math
import random
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import evaluation
from .config import PHASE_ORDER, config_hash
from .corpus import HOLD, STEPS_PER_BAR, DatasetCache, derive_rhythm
from .losses import (
    LatentBank,
    LossReport,
    SimilarityHead,
    build_positives,
    fill_bank,
    infonce,
    kl_normal,
    normalize,
    recon_losses,
    structured_infonce,
)
from .model import (
    FlatModel,
    HierModel,
    LatentPair,
    freeze,
    group_hash,
    load_checkpoint,
    save_checkpoint,
)


class TrainingError(Exception):
    pass


class DependencyError(TrainingError):
    pass


PHASE_PREREQS = {
    "baseline8": [],
    "pretrain2": [],
    "pretrain4": ["pretrain2"],
    "pretrain8": ["pretrain4"],
    "finetune1": ["pretrain8", "pretrain4", "pretrain2"],
    "finetune2": ["finetune1", "pretrain8", "pretrain4", "pretrain2"],
}

# loss-term sets per phase (contrastive terms subject to the ablation flag)
PHASE_TERMS = {
    "baseline8": {"recon", "rhythm", "kl"},
    "pretrain2": {"recon", "rhythm", "kl"},
    "pretrain4": {"recon", "rhythm", "kl", "structured_infonce"},
    "pretrain8": {"recon", "rhythm", "kl", "structured_infonce"},
    "finetune1": {"recon", "rhythm", "infonce"},
    "finetune2": {"recon", "rhythm", "infonce", "structured_infonce", "kl_phrase"},
}


@dataclass
class TrainPlan:
    phase: str
    frozen_groups: list[str]
    loss_terms: set[str]
    K: int
    tau: float
    beta: float
    batch_size: int
    lr_start: float
    lr_end: float
    lr_horizon_steps: int
    max_epochs: int
    seed: int
    kl_weight: float = 0.1
    kl_warmup_frac: float = 0.1
    patience: int = 10
    advance_accuracy: float = 0.8
    cross_factor_negatives: bool = True
    eval_on: str = "test"


@dataclass
class RunRecord:
    phase: str
    seed: int
    config_hash: str
    epochs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.__dict__, indent=2))

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text()))


def plan_for_phase(cfg: dict, phase: str, no_contrastive: bool = False) -> TrainPlan:
    if phase not in PHASE_TERMS:
        raise TrainingError(f"unknown phase {phase!r}")
    terms = set(PHASE_TERMS[phase])
    if no_contrastive or cfg["ablation"]["no_contrastive"]:
        terms -= {"infonce", "structured_infonce"}
    t = cfg["train"]
    p = cfg["phases"].get(phase, cfg["phases"]["pretrain8"] if phase == "baseline8" else None)
    if p is None:
        raise TrainingError(f"no phase config for {phase!r}")
    return TrainPlan(
        phase=phase,
        frozen_groups=["encoder"] if phase == "finetune1" else [],
        loss_terms=terms,
        K=p["K"],
        tau=t["tau"],
        beta=t["beta"],
        batch_size=p["batch_size"],
        lr_start=t["lr_start"],
        lr_end=t["lr_end"],
        lr_horizon_steps=t["lr_horizon_steps"],
        max_epochs=p["max_epochs"],
        seed=t["seed"],
        kl_weight=t["kl_weight"],
        kl_warmup_frac=t["kl_warmup_frac"],
        patience=t["patience"],
        advance_accuracy=t["advance_accuracy"],
        cross_factor_negatives=t["cross_factor_negatives"],
        eval_on=t["eval_on"],
    )


def lr_at(plan: TrainPlan, step: int) -> float:
    """Exponential decay from lr_start to lr_end over the horizon, then flat."""
    if step >= plan.lr_horizon_steps:
        return plan.lr_end
    frac = step / plan.lr_horizon_steps
    return plan.lr_start * (plan.lr_end / plan.lr_start) ** frac


def _phrases_of(cache: DatasetCache, split: str) -> torch.Tensor:
    ids = cache.split.train if split == "train" else cache.split.test
    idx = cache.subset(ids)
    return torch.from_numpy(cache.melodies[idx]).long()


def _augment(batch: torch.Tensor, max_shift: int, rng: random.Random) -> torch.Tensor:
    if max_shift <= 0:
        return batch
    out = batch.clone()
    for i in range(out.shape[0]):
        mel = out[i]
        pitched = mel < HOLD
        if not pitched.any():
            continue
        lo, hi = int(mel[pitched].min()), int(mel[pitched].max())
        feasible = [s for s in range(-max_shift, max_shift + 1) if lo + s >= 0 and hi + s <= 127]
        shift = rng.choice(feasible) if feasible else 0
        mel[pitched] += shift
    return out


def _rhythms(batch: torch.Tensor) -> torch.Tensor:
    return torch.from_numpy(np.stack([derive_rhythm(m.numpy()) for m in batch])).long()


def _windows(phrases: torch.Tensor, bars: int, hop_bars: int = 1):
    """All bars-sized windows of every phrase. Returns (windows, phrase_ids)."""
    win = bars * STEPS_PER_BAR
    hop = hop_bars * STEPS_PER_BAR
    chunks, ids = [], []
    for start in range(0, phrases.shape[1] - win + 1, hop):
        chunks.append(phrases[:, start : start + win])
        ids.extend(range(phrases.shape[0]))
    return torch.cat(chunks, dim=0), np.array(ids)


def _load_prereq(workdir: Path, phase: str):
    path = workdir / f"{phase}.pt"
    if not path.exists():
        raise DependencyError(f"phase prerequisite checkpoint missing: {path}")
    model, _ = load_checkpoint(path)
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def run_phase(cfg: dict, phase: str, cache: DatasetCache, workdir, no_contrastive: bool = False):
    """Train one phase; returns (RunRecord, best-checkpoint path)."""
    workdir = Path(workdir)
    workdir.mkdir(parents=True, exist_ok=True)
    plan = plan_for_phase(cfg, phase, no_contrastive)
    torch.manual_seed(plan.seed)
    rng = random.Random(plan.seed)
    sample_gen = torch.Generator().manual_seed(plan.seed)

    mcfg = cfg["model"]
    prereqs = {}
    if phase == "finetune2" and cfg["ablation"]["no_fixed"]:
        prereq_names = ["pretrain8", "pretrain4", "pretrain2"]
    else:
        prereq_names = PHASE_PREREQS[phase]
    for name in prereq_names:
        prereqs[name] = _load_prereq(workdir, name)

    # model under training
    if phase in ("baseline8", "pretrain8"):
        model = FlatModel(8, mcfg["d"], mcfg["hidden"], mcfg["chord_dim"])
    elif phase == "pretrain2":
        model = FlatModel(2, mcfg["d"], mcfg["hidden"], mcfg["chord_dim"])
    elif phase == "pretrain4":
        model = FlatModel(4, mcfg["d"], mcfg["hidden"], mcfg["chord_dim"])
    elif phase == "finetune1":
        model = HierModel(mcfg["d"], mcfg["hidden"], mcfg["expander_hidden"], mcfg["chord_dim"])
        model.encoder.load_state_dict(prereqs["pretrain8"].encoder.state_dict())
        model.leaf.load_state_dict(prereqs["pretrain2"].decoder.state_dict())
    elif phase == "finetune2":
        if cfg["ablation"]["no_fixed"]:
            model = HierModel(mcfg["d"], mcfg["hidden"], mcfg["expander_hidden"], mcfg["chord_dim"])
            model.encoder.load_state_dict(prereqs["pretrain8"].encoder.state_dict())
            model.leaf.load_state_dict(prereqs["pretrain2"].decoder.state_dict())
        else:
            model, _ = load_checkpoint(workdir / "finetune1.pt")
            for p in model.parameters():
                p.requires_grad_(True)
    else:
        raise TrainingError(f"unknown phase {phase!r}")
    model.train()
    if plan.frozen_groups:
        freeze(model, plan.frozen_groups)

    heads = {}
    if "structured_infonce" in plan.loss_terms or "infonce" in plan.loss_terms:
        for site in ("structured", "level"):
            for f in ("p", "r"):
                heads[f"{site}_{f}"] = SimilarityHead(mcfg["d"], plan.tau, f)

    params = [p for p in model.parameters() if p.requires_grad]
    for head in heads.values():
        params += list(head.parameters())
    opt = torch.optim.Adam(params, lr=plan.lr_start)

    train_phrases = _phrases_of(cache, "train")
    eval_phrases = _phrases_of(cache, plan.eval_on)
    if len(eval_phrases) == 0:
        eval_phrases = train_phrases

    record = RunRecord(phase=phase, seed=plan.seed, config_hash=config_hash(cfg))
    metrics_path = workdir / f"{phase}.metrics.jsonl"
    best_path = workdir / f"{phase}.pt"
    last_path = workdir / f"{phase}.last.pt"
    best_acc = -1.0
    epochs_since_best = 0
    global_step = 0
    total_steps = 0  # rough horizon for KL warm-up
    started = time.time()

    augment = cfg["data"]["augment_transpose"]
    scale_bars = {"pretrain2": 2, "pretrain4": 4}.get(phase, 8)
    windows, phrase_ids = _windows(train_phrases, scale_bars, cfg["data"]["hop_bars"])
    steps_per_epoch = max(1, math.ceil(windows.shape[0] / plan.batch_size))
    warmup_steps = max(1, int(plan.kl_warmup_frac * steps_per_epoch * plan.max_epochs))

    short_model = None
    if "structured_infonce" in plan.loss_terms:
        short_model = prereqs["pretrain2"] if phase == "pretrain4" else prereqs["pretrain4"]

    with open(metrics_path, "a") as metrics_fh:
        for epoch in range(plan.max_epochs):
            epoch_rng = random.Random(plan.seed * 100003 + epoch)
            order = list(range(windows.shape[0]))
            epoch_rng.shuffle(order)

            banks = _build_banks(plan, phase, prereqs, train_phrases, epoch_rng)

            sums: dict[str, float] = {}
            n_batches = 0
            for lo in range(0, len(order), plan.batch_size):
                idx = order[lo : lo + plan.batch_size]
                batch = _augment(windows[idx], augment, epoch_rng)
                batch_phrase_ids = phrase_ids[idx]
                report = _loss_step(
                    plan, phase, model, heads, prereqs, short_model, banks,
                    batch, batch_phrase_ids, sample_gen, epoch_rng, global_step, warmup_steps,
                )
                if not math.isfinite(report["total"].item()):
                    save_checkpoint(model, last_path, stage=phase, seed=plan.seed)
                    raise TrainingError(
                        f"{phase}: non-finite loss at step {global_step}; last-good checkpoint at {best_path}"
                    )
                opt.zero_grad()
                report["total"].backward()
                lr = lr_at(plan, global_step)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.step()
                global_step += 1
                n_batches += 1
                for key, value in report.items():
                    sums[key] = sums.get(key, 0.0) + float(value.detach())

            model.eval()
            acc = evaluation.reconstruction_accuracy(
                model, eval_phrases if scale_bars == 8 else _windows(eval_phrases, scale_bars)[0]
            )
            model.train()
            entry = {
                "epoch": epoch,
                "lr": lr_at(plan, global_step),
                "recon_acc": acc.recon_acc,
                "rhythm_acc": acc.rhythm_acc,
                "encoder_hash": group_hash(model, "encoder"),
            }
            entry.update({k: v / n_batches for k, v in sums.items()})
            record.epochs.append(entry)
            metrics_fh.write(json.dumps(entry) + "\n")
            metrics_fh.flush()

            if acc.recon_acc > best_acc:
                best_acc = acc.recon_acc
                epochs_since_best = 0
                save_checkpoint(model, best_path, stage=phase, seed=plan.seed)
            else:
                epochs_since_best += 1
            if phase == "finetune1" and acc.recon_acc >= plan.advance_accuracy:
                break
            if epochs_since_best > plan.patience:
                break

    save_checkpoint(model, last_path, stage=phase, seed=plan.seed)
    record.wall_time = time.time() - started
    record.save(workdir / f"{phase}.record.json")
    return record, best_path


def _build_banks(plan, phase, prereqs, train_phrases, rng):
    banks = {}
    if "structured_infonce" in plan.loss_terms:
        scale = 2 if phase == "pretrain4" else 4
        bank = LatentBank(plan.cross_factor_negatives)
        fill_bank(bank, prereqs[f"pretrain{scale}"], train_phrases)
        banks[scale] = bank
    if "infonce" in plan.loss_terms:
        for scale in (2, 4):
            bank = LatentBank(plan.cross_factor_negatives)
            fill_bank(bank, prereqs[f"pretrain{scale}"], train_phrases)
            banks[scale] = bank
    return banks


def _contrastive_mean(head, anchors, positives, bank, phrase_ids, K, rng, multi_pos):
    """Mean single-anchor loss over the batch; anchors (B,d), positives (B,d)
    or (B,n,d) when multi_pos."""
    losses = []
    for i in range(anchors.shape[0]):
        negs = bank.draw(int(phrase_ids[i]), head.factor, K, rng)
        if multi_pos:
            losses.append(structured_infonce(head, anchors[i], positives[i], negs))
        else:
            losses.append(infonce(head, anchors[i], positives[i], negs))
    return torch.stack(losses).mean()


def _loss_step(plan, phase, model, heads, prereqs, short_model, banks,
               batch, batch_phrase_ids, sample_gen, rng, step, warmup_steps):
    rhythm = _rhythms(batch)
    report: dict[str, torch.Tensor] = {}
    post = model.encode(batch)

    if isinstance(model, HierModel):
        z = LatentPair(post.mean_p, post.mean_r) if phase == "finetune1" else post.sample(generator=sample_gen)
        intermediate, bar_pairs, mel_logits, rhy_logits = model.decode(
            z, teacher_melody=batch, teacher_rhythm=rhythm
        )
    else:
        z = post.sample(generator=sample_gen)
        mel_logits, rhy_logits = model.decode(z, teacher_melody=batch, teacher_rhythm=rhythm)
        intermediate = bar_pairs = None

    recon_ce, rhythm_ce = recon_losses(mel_logits, rhy_logits, batch, rhythm)
    total = recon_ce + rhythm_ce
    report["recon_ce"] = recon_ce
    report["rhythm_ce"] = rhythm_ce

    if "kl" in plan.loss_terms:
        kl = kl_normal(post)
        weight = plan.kl_weight * min(1.0, step / warmup_steps)
        total = total + weight * kl
        report["kl"] = kl
    if "kl_phrase" in plan.loss_terms:
        kl = kl_normal(post)
        total = total + plan.beta * kl
        report["kl"] = kl

    if "structured_infonce" in plan.loss_terms:
        positives = build_positives(batch, short_model)
        anchors = {"p": normalize(post.mean_p), "r": normalize(post.mean_r)}
        bank = banks[short_model.bars]
        term = sum(
            _contrastive_mean(
                heads[f"structured_{f}"], anchors[f], positives[f], bank,
                batch_phrase_ids, plan.K, rng, multi_pos=True,
            )
            for f in ("p", "r")
        )
        total = total + term
        report["structured_infonce"] = term

    if "infonce" in plan.loss_terms and intermediate is not None:
        term = batch.new_zeros((), dtype=torch.float32)
        for scale, pairs in ((4, intermediate), (2, bar_pairs)):
            frozen = prereqs[f"pretrain{scale}"]
            steps = frozen.steps
            for slot, pair in enumerate(pairs):
                seg = batch[:, slot * steps : (slot + 1) * steps]
                with torch.no_grad():
                    seg_post = frozen.encode(seg)
                targets = {"p": normalize(seg_post.mean_p), "r": normalize(seg_post.mean_r)}
                anchors = {"p": normalize(pair.z_p), "r": normalize(pair.z_r)}
                for f in ("p", "r"):
                    term = term + _contrastive_mean(
                        heads[f"level_{f}"], anchors[f], targets[f], banks[scale],
                        batch_phrase_ids, plan.K, rng, multi_pos=False,
                    ) / len(pairs)
        total = total + term
        report["infonce"] = term

    report["total"] = total
    return report


def loss_report_from(report: dict, beta: float) -> LossReport:
    return LossReport(
        recon_ce=float(report.get("recon_ce", 0.0)),
        rhythm_ce=float(report.get("rhythm_ce", 0.0)),
        kl=float(report.get("kl", 0.0)),
        infonce=float(report.get("infonce", 0.0)),
        structured_infonce=float(report.get("structured_infonce", 0.0)),
        total=float(report.get("total", 0.0)),
        weights={"beta": beta},
    )


def run_pipeline(cfg: dict, cache: DatasetCache, workdir, resume: bool = True):
    """Run all five phases in order; completed phases are skipped on resume."""
    workdir = Path(workdir)
    records = {}
    phases = list(PHASE_ORDER)
    if cfg["ablation"]["no_fixed"]:
        phases.remove("finetune1")
    for phase in phases:
        marker = workdir / f"{phase}.record.json"
        if resume and marker.exists() and (workdir / f"{phase}.pt").exists():
            records[phase] = RunRecord.load(marker)
            continue
        record, _ = run_phase(cfg, phase, cache, workdir)
        records[phase] = record
    return records, workdir / f"{phases[-1]}.pt"
