"""Loss terms: reconstruction, KL, InfoNCE variants, similarity head, and the
positive/negative sample machinery for the contrastive constraints."""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import STEPS_PER_BAR
from .model import FlatModel, GaussianPosterior, LatentPair

# overlapping positive windows, in bar offsets
POSITIVE_OFFSETS = {8: (0, 2, 4), 4: (0, 1, 2)}


class ContrastiveError(Exception):
    pass


class SimilarityHead(nn.Module):
    """Bilinear similarity a^T W b / tau; one head per factor."""

    def __init__(self, d: int, tau: float = 1.0, factor: str = "p"):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"temperature must be positive, got {tau}")
        self.W = nn.Parameter(torch.eye(d))
        self.tau = tau
        self.factor = factor

    def logits(self, anchor: torch.Tensor, candidates: torch.Tensor) -> torch.Tensor:
        # anchor (d,), candidates (n, d) -> (n,)
        return candidates @ (self.W @ anchor) / self.tau


def normalize(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    norm = torch.linalg.vector_norm(v, dim=dim, keepdim=True)
    if torch.any(norm == 0):
        raise ContrastiveError("cannot normalize a zero vector")
    return v / norm


def infonce(head: SimilarityHead, anchor: torch.Tensor, positive: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
    """-ln softmax of the positive logit against K negative logits."""
    if negatives.ndim != 2 or negatives.shape[0] < 1:
        raise ContrastiveError("need at least one negative sample")
    pos_logit = head.logits(anchor, positive[None])
    neg_logits = head.logits(anchor, negatives)
    all_logits = torch.cat([pos_logit, neg_logits])
    if not torch.isfinite(all_logits).all():
        raise ContrastiveError(f"non-finite similarity logits: {all_logits}")
    return torch.logsumexp(all_logits, dim=0) - pos_logit[0]


def structured_infonce(head: SimilarityHead, anchor: torch.Tensor, positives: torch.Tensor, negatives: torch.Tensor) -> torch.Tensor:
    """Cross-scale InfoNCE; the loss is averaged over the positive windows."""
    if positives.ndim != 2 or positives.shape[0] < 1:
        raise ContrastiveError("need at least one positive sample")
    losses = [infonce(head, anchor, pos, negatives) for pos in positives]
    return torch.stack(losses).mean()


def kl_normal(post: GaussianPosterior) -> torch.Tensor:
    """KL(q || N(0, I)) summed over both factors, averaged over the batch."""
    total = post.mean_p.new_zeros(())
    for mean, logvar in ((post.mean_p, post.logvar_p), (post.mean_r, post.logvar_r)):
        kl = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar).sum(dim=-1)
        total = total + kl.mean()
    return total


def recon_losses(melody_logits: torch.Tensor, rhythm_logits: torch.Tensor, melody_targets: torch.Tensor, rhythm_targets: torch.Tensor):
    """Mean per-step cross-entropies for the 130-way and 3-way streams."""
    if melody_logits.shape[:-1] != melody_targets.shape or rhythm_logits.shape[:-1] != rhythm_targets.shape:
        raise ValueError("logit/target shape mismatch")
    recon_ce = F.cross_entropy(melody_logits.reshape(-1, melody_logits.shape[-1]), melody_targets.reshape(-1))
    rhythm_ce = F.cross_entropy(rhythm_logits.reshape(-1, rhythm_logits.shape[-1]), rhythm_targets.reshape(-1))
    return recon_ce, rhythm_ce


@dataclass
class LossReport:
    recon_ce: float = 0.0
    rhythm_ce: float = 0.0
    kl: float = 0.0
    infonce: float = 0.0
    structured_infonce: float = 0.0
    total: float = 0.0
    weights: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(self.__dict__)


@torch.no_grad()
def build_positives(phrase: torch.Tensor, short_model: FlatModel, chord: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Encode the overlapping sub-windows of a long window with a frozen
    shorter-scale model; returns normalized posterior means per factor,
    shape (B, 3, d) each."""
    long_steps = phrase.shape[-1]
    if long_steps != 2 * short_model.steps:
        raise ContrastiveError(
            f"phrase of {long_steps} steps does not pair with a {short_model.bars}-bar model"
        )
    offsets = POSITIVE_OFFSETS[2 * short_model.bars]
    if phrase.ndim == 1:
        phrase = phrase[None]
    B = phrase.shape[0]
    windows, chords = [], []
    for off in offsets:
        lo = off * STEPS_PER_BAR
        windows.append(phrase[:, lo : lo + short_model.steps])
        if chord is not None:
            chords.append(chord[:, lo : lo + short_model.steps])
    stacked = torch.cat(windows, dim=0)
    post = short_model.encode(stacked, torch.cat(chords, dim=0) if chords else None)
    mean_p = normalize(post.mean_p).view(len(offsets), B, -1).transpose(0, 1)
    mean_r = normalize(post.mean_r).view(len(offsets), B, -1).transpose(0, 1)
    return {"p": mean_p, "r": mean_r}


class LatentBank:
    """Pool of normalized short-scale latents used as negatives.

    Refreshed between epochs by a single writer; draws exclude any entry from
    the anchor's own phrase with the anchor's factor. Cross-factor entries of
    the same phrase count as negatives when enabled.
    """

    def __init__(self, cross_factor: bool = True):
        self.cross_factor = cross_factor
        self.vectors: list[torch.Tensor] = []
        self.phrase_ids: list[int] = []
        self.factors: list[str] = []

    def __len__(self):
        return len(self.vectors)

    def add(self, vectors: torch.Tensor, phrase_id: int, factor: str) -> None:
        for v in vectors.detach():
            self.vectors.append(v)
            self.phrase_ids.append(phrase_id)
            self.factors.append(factor)

    def draw(self, anchor_phrase: int, anchor_factor: str, K: int, rng: random.Random) -> torch.Tensor:
        eligible = [
            i
            for i in range(len(self.vectors))
            if not (self.phrase_ids[i] == anchor_phrase and self.factors[i] == anchor_factor)
            and (self.cross_factor or self.factors[i] == anchor_factor)
        ]
        if len(eligible) < K:
            raise ContrastiveError(f"negative pool has {len(eligible)} eligible entries, need {K}")
        picked = rng.sample(eligible, K)
        return torch.stack([self.vectors[i] for i in picked])


def draw_negatives(bank: LatentBank, anchor_phrase: int, anchor_factor: str, K: int, seed: int) -> torch.Tensor:
    return bank.draw(anchor_phrase, anchor_factor, K, random.Random(seed))


@torch.no_grad()
def fill_bank(bank: LatentBank, short_model: FlatModel, phrases: torch.Tensor, chords: torch.Tensor | None = None, hop_bars: int = 1) -> None:
    """Populate the bank with normalized posterior means of every hop-spaced
    short window of every phrase."""
    steps = short_model.steps
    hop = hop_bars * STEPS_PER_BAR
    for start in range(0, phrases.shape[1] - steps + 1, hop):
        window = phrases[:, start : start + steps]
        chord = chords[:, start : start + steps] if chords is not None else None
        post = short_model.encode(window, chord)
        mean_p, mean_r = normalize(post.mean_p), normalize(post.mean_r)
        for i in range(phrases.shape[0]):
            bank.add(mean_p[i : i + 1], i, "p")
            bank.add(mean_r[i : i + 1], i, "r")
