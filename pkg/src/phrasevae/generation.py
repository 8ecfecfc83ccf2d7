"""Latent-space generation: factor swapping, SLERP rhythm interpolation,
posterior-noise theme variation, and MIDI export."""

from __future__ import annotations

import math

import torch

from .corpus import detokenize
from .midifile import MidiData, MidiNote, write_midi
from .model import LatentPair


class GenerationError(Exception):
    pass


@torch.no_grad()
def _encode_mean(model, melody: torch.Tensor, chord=None) -> LatentPair:
    if melody.ndim == 1:
        melody = melody[None]
    post = model.encode(melody.long(), chord)
    return LatentPair(post.mean_p, post.mean_r)


@torch.no_grad()
def _decode_tokens(model, z: LatentPair, chord=None) -> torch.Tensor:
    out = model.decode(z, chord=chord)
    melody = out[-2] if isinstance(out, tuple) and len(out) == 4 else out[0]
    return melody


@torch.no_grad()
def style_transfer(phrase_a: torch.Tensor, phrase_b: torch.Tensor, model, chord_a=None, chord_b=None):
    """Cross-swap pitch and rhythm factors of two phrases.

    Returns (piece_c, piece_d): C carries A's pitch factor with B's rhythm,
    D the reverse. The chord stream follows the pitch-factor phrase.
    """
    za = _encode_mean(model, phrase_a, chord_a)
    zb = _encode_mean(model, phrase_b, chord_b)
    piece_c = _decode_tokens(model, LatentPair(za.z_p, zb.z_r), chord_a)
    piece_d = _decode_tokens(model, LatentPair(zb.z_p, za.z_r), chord_b)
    return piece_c[0], piece_d[0]


def slerp(a: torch.Tensor, b: torch.Tensor, t: float) -> torch.Tensor:
    """Spherical interpolation along the great-circle arc between a and b.

    Colinear inputs fall back to linear interpolation. Endpoints are exact.
    """
    if t == 0.0:
        return a.clone()
    if t == 1.0:
        return b.clone()
    na, nb = a.norm(), b.norm()
    if na == 0 or nb == 0:
        raise GenerationError("cannot slerp a zero vector")
    cos = torch.clamp((a * b).sum() / (na * nb), -1.0, 1.0)
    omega = torch.arccos(cos)
    if float(omega) < 1e-6 or abs(float(omega) - math.pi) < 1e-6:
        return (1 - t) * a + t * b
    denom = torch.sin(omega)
    return (torch.sin((1 - t) * omega) / denom) * a + (torch.sin(t * omega) / denom) * b


@torch.no_grad()
def interpolate_rhythm(phrase_a: torch.Tensor, phrase_b: torch.Tensor, weights: list[float], model, chord=None):
    """Decode with A's pitch factor and slerp(z_r_a, z_r_b, t) per weight."""
    za = _encode_mean(model, phrase_a, chord)
    zb = _encode_mean(model, phrase_b)
    pieces = []
    for t in weights:
        if not 0.0 <= t <= 1.0:
            raise GenerationError(f"interpolation weight {t} outside [0,1]")
        z_r = slerp(za.z_r[0], zb.z_r[0], t)[None]
        pieces.append(_decode_tokens(model, LatentPair(za.z_p, z_r), chord)[0])
    return pieces


@torch.no_grad()
def theme_variation(phrase: torch.Tensor, sigma: float, n_samples: int, seed: int, model, chord=None):
    """Decode (z_p, z_r + eps) with eps ~ N(0, sigma^2 I); keeps the pitch
    factor fixed. sigma=0 reproduces the reconstruction."""
    if sigma < 0:
        raise GenerationError(f"noise scale must be non-negative, got {sigma}")
    z = _encode_mean(model, phrase, chord)
    gen = torch.Generator().manual_seed(seed)
    pieces = []
    for _ in range(n_samples):
        eps = sigma * torch.randn(z.z_r.shape, generator=gen) if sigma > 0 else torch.zeros_like(z.z_r)
        pieces.append(_decode_tokens(model, LatentPair(z.z_p, z.z_r + eps), chord)[0])
    return pieces


def export_midi(tokens, path, tempo_bpm: float = 120.0, ticks_per_beat: int = 480) -> None:
    """Write a token sequence as a single-track MIDI file; 16th-step grid."""
    if hasattr(tokens, "numpy"):
        tokens = tokens.numpy()
    ticks_per_step = ticks_per_beat // 4
    notes = [
        MidiNote(ev.pitch, ev.onset * ticks_per_step, (ev.onset + ev.duration) * ticks_per_step)
        for ev in detokenize(tokens)
    ]
    midi = MidiData(
        ticks_per_beat=ticks_per_beat,
        notes=notes,
        tempo_us_per_beat=round(60_000_000 / tempo_bpm),
    )
    write_midi(path, midi)
