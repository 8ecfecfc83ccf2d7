"""Flat 2/4/8-bar encoder/decoder networks and the hierarchical phrase decoder.

All models consume one-hot token streams (130-way melody, 3-way rhythm) plus
an optional 12-dim chord chroma channel. The latent is split into a pitch
factor z_p and a rhythm factor z_r of equal dimension; the rhythm decoder
sees only z_r, the melody decoder sees z_p plus the rhythm stream.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .corpus import N_MELODY_TOKENS, N_RHYTHM_TOKENS, STEPS_PER_BAR

CHECKPOINT_FORMAT_VERSION = 1


class ModelError(Exception):
    pass


class CheckpointError(Exception):
    pass


@dataclass
class LatentPair:
    z_p: torch.Tensor  # (B, d)
    z_r: torch.Tensor  # (B, d)

    @property
    def d(self) -> int:
        return self.z_p.shape[-1]


@dataclass
class GaussianPosterior:
    mean_p: torch.Tensor
    logvar_p: torch.Tensor
    mean_r: torch.Tensor
    logvar_r: torch.Tensor

    def sample(self, mode: str = "sample", generator: torch.Generator | None = None) -> LatentPair:
        if mode == "mean":
            return LatentPair(self.mean_p, self.mean_r)
        if mode != "sample":
            raise ValueError(f"unknown sampling mode {mode!r}")
        eps_p = torch.randn(self.mean_p.shape, generator=generator, dtype=self.mean_p.dtype)
        eps_r = torch.randn(self.mean_r.shape, generator=generator, dtype=self.mean_r.dtype)
        return LatentPair(
            self.mean_p + torch.exp(0.5 * self.logvar_p) * eps_p,
            self.mean_r + torch.exp(0.5 * self.logvar_r) * eps_r,
        )


def _one_hot(tokens: torch.Tensor, n: int) -> torch.Tensor:
    return F.one_hot(tokens.long(), n).float()


def _shift_right(onehot: torch.Tensor) -> torch.Tensor:
    # start-of-sequence is the all-zero vector
    return torch.cat([torch.zeros_like(onehot[:, :1]), onehot[:, :-1]], dim=1)


class SequenceEncoder(nn.Module):
    """Bi-GRU over one-hot melody (+ chord) -> factorized Gaussian posterior."""

    def __init__(self, d: int, hidden: int, chord_dim: int = 0):
        super().__init__()
        self.d = d
        self.chord_dim = chord_dim
        self.gru = nn.GRU(N_MELODY_TOKENS + chord_dim, hidden, batch_first=True, bidirectional=True)
        self.to_mean = nn.Linear(2 * hidden, 2 * d)
        self.to_logvar = nn.Linear(2 * hidden, 2 * d)

    def forward(self, melody: torch.Tensor, chord: torch.Tensor | None = None) -> GaussianPosterior:
        x = _one_hot(melody, N_MELODY_TOKENS)
        if self.chord_dim:
            if chord is None:
                chord = torch.zeros(*melody.shape, self.chord_dim)
            x = torch.cat([x, chord.float()], dim=-1)
        _, h = self.gru(x)
        h = torch.cat([h[0], h[1]], dim=-1)
        mean = self.to_mean(h)
        logvar = self.to_logvar(h)
        d = self.d
        return GaussianPosterior(mean[:, :d], logvar[:, :d], mean[:, d:], logvar[:, d:])


class FlatDecoder(nn.Module):
    """Rhythm GRU from z_r, then melody GRU from (z_p, rhythm stream, chord)."""

    def __init__(self, d: int, hidden: int, chord_dim: int = 0):
        super().__init__()
        self.d = d
        self.chord_dim = chord_dim
        self.rhythm_init = nn.Linear(d, hidden)
        self.rhythm_gru = nn.GRU(N_RHYTHM_TOKENS + d, hidden, batch_first=True)
        self.rhythm_out = nn.Linear(hidden, N_RHYTHM_TOKENS)
        mel_in = N_MELODY_TOKENS + N_RHYTHM_TOKENS + d + chord_dim
        self.melody_init = nn.Linear(d, hidden)
        self.melody_gru = nn.GRU(mel_in, hidden, batch_first=True)
        self.melody_out = nn.Linear(hidden, N_MELODY_TOKENS)

    def _chord(self, chord, B, T):
        if not self.chord_dim:
            return None
        if chord is None:
            return torch.zeros(B, T, self.chord_dim)
        return chord.float()

    def forward(self, z: LatentPair, T: int, teacher_melody: torch.Tensor, teacher_rhythm: torch.Tensor, chord: torch.Tensor | None = None):
        """Teacher-forced pass; returns (melody_logits, rhythm_logits)."""
        B = z.z_p.shape[0]
        rhy_onehot = _one_hot(teacher_rhythm, N_RHYTHM_TOKENS)
        rhy_in = torch.cat([_shift_right(rhy_onehot), z.z_r[:, None].expand(B, T, self.d)], dim=-1)
        h0 = torch.tanh(self.rhythm_init(z.z_r))[None]
        rhy_h, _ = self.rhythm_gru(rhy_in, h0)
        rhythm_logits = self.rhythm_out(rhy_h)

        mel_prev = _shift_right(_one_hot(teacher_melody, N_MELODY_TOKENS))
        parts = [mel_prev, rhy_onehot, z.z_p[:, None].expand(B, T, self.d)]
        chord = self._chord(chord, B, T)
        if chord is not None:
            parts.append(chord)
        h0 = torch.tanh(self.melody_init(z.z_p))[None]
        mel_h, _ = self.melody_gru(torch.cat(parts, dim=-1), h0)
        return self.melody_out(mel_h), rhythm_logits

    @torch.no_grad()
    def greedy(self, z: LatentPair, T: int, chord: torch.Tensor | None = None):
        """Free-running argmax decode; returns (melody_tokens, rhythm_tokens)."""
        B = z.z_p.shape[0]
        h = torch.tanh(self.rhythm_init(z.z_r))[None]
        prev = torch.zeros(B, 1, N_RHYTHM_TOKENS)
        rhythm = []
        for _ in range(T):
            out, h = self.rhythm_gru(torch.cat([prev, z.z_r[:, None]], dim=-1), h)
            tok = self.rhythm_out(out[:, 0]).argmax(-1)
            rhythm.append(tok)
            prev = _one_hot(tok, N_RHYTHM_TOKENS)[:, None]
        rhythm = torch.stack(rhythm, dim=1)

        chord = self._chord(chord, B, T)
        rhy_onehot = _one_hot(rhythm, N_RHYTHM_TOKENS)
        h = torch.tanh(self.melody_init(z.z_p))[None]
        prev = torch.zeros(B, 1, N_MELODY_TOKENS)
        melody = []
        for t in range(T):
            parts = [prev, rhy_onehot[:, t : t + 1], z.z_p[:, None]]
            if chord is not None:
                parts.append(chord[:, t : t + 1])
            out, h = self.melody_gru(torch.cat(parts, dim=-1), h)
            tok = self.melody_out(out[:, 0]).argmax(-1)
            melody.append(tok)
            prev = _one_hot(tok, N_MELODY_TOKENS)[:, None]
        return torch.stack(melody, dim=1), rhythm


class FlatModel(nn.Module):
    """One-scale encoder/decoder (2, 4 or 8 bars)."""

    def __init__(self, bars: int, d: int = 32, hidden: int = 256, chord_dim: int = 0):
        super().__init__()
        if bars not in (2, 4, 8):
            raise ValueError(f"unsupported scale {bars} bars")
        self.bars = bars
        self.steps = bars * STEPS_PER_BAR
        self.d = d
        self.config = {"kind": "flat", "bars": bars, "d": d, "hidden": hidden, "chord_dim": chord_dim}
        self.encoder = SequenceEncoder(d, hidden, chord_dim)
        self.decoder = FlatDecoder(d, hidden, chord_dim)

    def encode(self, melody: torch.Tensor, chord: torch.Tensor | None = None) -> GaussianPosterior:
        if melody.shape[-1] != self.steps:
            raise ModelError(f"expected {self.steps}-step input, got {melody.shape[-1]}")
        if melody.ndim == 1:
            melody = melody[None]
        return self.encoder(melody, chord)

    def decode(self, z: LatentPair, chord=None, teacher_melody=None, teacher_rhythm=None):
        if z.d != self.d:
            raise ModelError(f"latent dim {z.d} != model d {self.d}")
        if teacher_melody is not None:
            if teacher_melody.shape[-1] != self.steps:
                raise ModelError(f"teacher length {teacher_melody.shape[-1]} != {self.steps}")
            return self.decoder(z, self.steps, teacher_melody, teacher_rhythm, chord)
        return self.decoder.greedy(z, self.steps, chord)

    def param_groups(self) -> dict[str, list[nn.Module]]:
        return {
            "encoder": [self.encoder],
            "rhythm_decoder": [self.decoder.rhythm_init, self.decoder.rhythm_gru, self.decoder.rhythm_out],
            "global_decoder": [self.decoder.melody_init, self.decoder.melody_gru, self.decoder.melody_out],
        }


class Expander(nn.Module):
    """2-layer GRU that maps one latent pair to two half-range child pairs."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.d = d
        self.init = nn.Linear(2 * d, 2 * hidden)
        self.gru = nn.GRU(2 * d, hidden, num_layers=2, batch_first=True)
        self.out = nn.Linear(hidden, 2 * d)

    def forward(self, parent: LatentPair) -> list[LatentPair]:
        z = torch.cat([parent.z_p, parent.z_r], dim=-1)
        h0 = torch.tanh(self.init(z)).view(-1, 2, self.gru.hidden_size).transpose(0, 1).contiguous()
        out, _ = self.gru(z[:, None].expand(-1, 2, -1), h0)
        children = self.out(out)
        d = self.d
        return [LatentPair(children[:, i, :d], children[:, i, d:]) for i in range(2)]


class HierModel(nn.Module):
    """8-bar encoder + 3-layer hierarchical decoder with a shared 2-bar leaf."""

    def __init__(self, d: int = 32, hidden: int = 256, expander_hidden: int = 128, chord_dim: int = 0):
        super().__init__()
        self.d = d
        self.steps = 8 * STEPS_PER_BAR
        self.leaf_steps = 2 * STEPS_PER_BAR
        self.config = {
            "kind": "hier",
            "d": d,
            "hidden": hidden,
            "expander_hidden": expander_hidden,
            "chord_dim": chord_dim,
        }
        self.encoder = SequenceEncoder(d, hidden, chord_dim)
        self.expander_mid = Expander(d, expander_hidden)
        self.expander_bar = Expander(d, expander_hidden)
        self.leaf = FlatDecoder(d, hidden, chord_dim)

    def encode(self, melody: torch.Tensor, chord: torch.Tensor | None = None) -> GaussianPosterior:
        if melody.shape[-1] != self.steps:
            raise ModelError(f"expected {self.steps}-step input, got {melody.shape[-1]}")
        if melody.ndim == 1:
            melody = melody[None]
        return self.encoder(melody, chord)

    def decode(self, z_phrase: LatentPair, chord=None, teacher_melody=None, teacher_rhythm=None):
        """Returns (intermediate pairs, bar pairs, melody logits, rhythm logits).

        The four leaf decodes share one parameter set; logits cover 128 steps.
        With no teacher, logits are replaced by greedily decoded tokens.
        """
        if z_phrase.d != self.d:
            raise ModelError(f"latent dim {z_phrase.d} != model d {self.d}")
        intermediate = self.expander_mid(z_phrase)
        bar_pairs = [child for mid in intermediate for child in self.expander_bar(mid)]
        mel_parts, rhy_parts = [], []
        for i, pair in enumerate(bar_pairs):
            lo, hi = i * self.leaf_steps, (i + 1) * self.leaf_steps
            window_chord = chord[:, lo:hi] if chord is not None else None
            if teacher_melody is not None:
                mel, rhy = self.leaf(
                    pair, self.leaf_steps, teacher_melody[:, lo:hi], teacher_rhythm[:, lo:hi], window_chord
                )
            else:
                mel, rhy = self.leaf.greedy(pair, self.leaf_steps, window_chord)
            mel_parts.append(mel)
            rhy_parts.append(rhy)
        return intermediate, bar_pairs, torch.cat(mel_parts, dim=1), torch.cat(rhy_parts, dim=1)

    def param_groups(self) -> dict[str, list[nn.Module]]:
        return {
            "encoder": [self.encoder],
            "expanders": [self.expander_mid, self.expander_bar],
            "leaf_decoder": [self.leaf],
        }


def build_model(config: dict) -> nn.Module:
    kind = config.get("kind")
    kwargs = {k: v for k, v in config.items() if k != "kind"}
    if kind == "flat":
        return FlatModel(**kwargs)
    if kind == "hier":
        return HierModel(**kwargs)
    raise CheckpointError(f"unknown model kind {kind!r}")


def freeze(model: nn.Module, groups: list[str]) -> None:
    _set_grad(model, groups, False)


def unfreeze(model: nn.Module, groups: list[str]) -> None:
    _set_grad(model, groups, True)


def _set_grad(model, groups, flag):
    known = model.param_groups()
    for name in groups:
        if name not in known:
            raise ModelError(f"unknown parameter group {name!r}; have {sorted(known)}")
        for module in known[name]:
            for p in module.parameters():
                p.requires_grad_(flag)


def group_hash(model: nn.Module, group: str) -> str:
    h = hashlib.sha256()
    for module in model.param_groups()[group]:
        for p in module.parameters():
            h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: nn.Module, path, stage: str = "", seed: int = 0, extra_state: dict | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {"model": model.state_dict()}
    if extra_state:
        state.update(extra_state)
    torch.save(state, path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "config": model.config,
        "stage": stage,
        "seed": seed,
        "sha256": digest,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(header, indent=2, sort_keys=True))


def read_checkpoint_header(path) -> dict:
    header_path = Path(str(path) + ".json")
    if not header_path.exists():
        raise CheckpointError(f"missing checkpoint header {header_path}")
    return json.loads(header_path.read_text())


def load_checkpoint(path, expected_config: dict | None = None):
    """Rebuild the model from its header config; returns (model, header)."""
    path = Path(path)
    header = read_checkpoint_header(path)
    if header["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format {header['format_version']} unsupported")
    if hashlib.sha256(path.read_bytes()).hexdigest() != header["sha256"]:
        raise CheckpointError(f"{path}: integrity hash mismatch")
    if expected_config is not None and expected_config != header["config"]:
        raise CheckpointError(
            f"config mismatch: checkpoint has {header['config']}, expected {expected_config}"
        )
    model = build_model(header["config"])
    state = torch.load(path, weights_only=True)
    model.load_state_dict(state["model"])
    model.eval()
    return model, header
