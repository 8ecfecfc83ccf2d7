"""Token formats, MIDI ingestion, windowing, splits and the dataset cache.

A melody is a per-16th-step sequence over 130 symbols: MIDI pitches 0-127,
HOLD (128) to sustain the previous note, REST (129). Rhythm is the 3-symbol
reduction onset/hold/rest. All meters other than 4/4 are rejected.
"""

from __future__ import annotations

import hashlib
import json
import random
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .midifile import MidiData, MidiError, MidiNote, read_midi

HOLD = 128
REST = 129
N_MELODY_TOKENS = 130
N_RHYTHM_TOKENS = 3
RHYTHM_ONSET, RHYTHM_HOLD, RHYTHM_REST = 0, 1, 2
STEPS_PER_BAR = 16  # 16th-note steps, 4/4 only
PHRASE_BARS = 8
PHRASE_STEPS = PHRASE_BARS * STEPS_PER_BAR
CACHE_FORMAT_VERSION = 1


class CorpusError(Exception):
    pass


class IngestionError(CorpusError):
    pass


class EmptyMelodyError(CorpusError):
    pass


class MeterError(CorpusError):
    pass


class PitchRangeError(CorpusError):
    pass


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: int
    duration: int

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0,127]")
        if self.onset < 0:
            raise ValueError(f"negative onset {self.onset}")
        if self.duration < 1:
            raise ValueError(f"duration {self.duration} < 1")


@dataclass(frozen=True)
class PhraseSample:
    melody: np.ndarray  # (128,) int
    rhythm: np.ndarray  # (128,) int
    chord: np.ndarray | None  # (128, 12) or None
    song_id: str
    bar_offset: int


@dataclass
class CorpusSplit:
    train: list[str]
    test: list[str]


def validate_melody(tokens: np.ndarray) -> None:
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or len(tokens) % STEPS_PER_BAR != 0:
        raise CorpusError(f"melody length {tokens.shape} not a whole number of bars")
    if tokens.min(initial=0) < 0 or tokens.max(initial=0) > REST:
        raise CorpusError("melody token outside [0,129]")
    if len(tokens) and tokens[0] == HOLD:
        raise CorpusError("hold token at step 0")
    prev = tokens[:-1]
    cur = tokens[1:]
    if np.any((cur == HOLD) & (prev == REST)):
        raise CorpusError("hold token directly after rest")


def tokenize_melody(events: list[NoteEvent], T: int) -> np.ndarray:
    """Render sorted monophonic note events onto a T-step token grid."""
    tokens = np.full(T, REST, dtype=np.int64)
    truncated = False
    for ev in events:
        if ev.onset >= T:
            truncated = True
            continue
        end = ev.onset + ev.duration
        if end > T:
            truncated = True
            end = T
        tokens[ev.onset] = ev.pitch
        tokens[ev.onset + 1 : end] = HOLD
    if truncated:
        warnings.warn("note events extend past the token grid; truncated", stacklevel=2)
    return tokens


def derive_rhythm(melody: np.ndarray) -> np.ndarray:
    melody = np.asarray(melody)
    rhythm = np.full(len(melody), RHYTHM_ONSET, dtype=np.int64)
    rhythm[melody == HOLD] = RHYTHM_HOLD
    rhythm[melody == REST] = RHYTHM_REST
    return rhythm


def detokenize(melody: np.ndarray) -> list[NoteEvent]:
    events: list[NoteEvent] = []
    for step, token in enumerate(np.asarray(melody)):
        if token < HOLD:
            events.append(NoteEvent(int(token), step, 1))
        elif token == HOLD:
            last = events[-1]
            events[-1] = NoteEvent(last.pitch, last.onset, last.duration + 1)
    return events


def segment(tokens: np.ndarray, bars: int, hop_bars: int = 1) -> list[tuple[int, np.ndarray]]:
    """Sliding (bar_offset, window) pairs of `bars` whole bars."""
    if bars not in (2, 4, 8):
        raise ValueError(f"unsupported window size {bars} bars")
    win = bars * STEPS_PER_BAR
    hop = hop_bars * STEPS_PER_BAR
    tokens = np.asarray(tokens)
    out = []
    for start in range(0, len(tokens) - win + 1, hop):
        out.append((start // STEPS_PER_BAR, tokens[start : start + win]))
    return out


def transpose(melody: np.ndarray, semitones: int) -> np.ndarray:
    if not -12 <= semitones <= 12:
        raise ValueError(f"transposition {semitones} outside [-12,12]")
    melody = np.asarray(melody)
    pitched = melody < HOLD
    shifted = melody.copy()
    shifted[pitched] += semitones
    if pitched.any() and (shifted[pitched].min() < 0 or shifted[pitched].max() > 127):
        raise PitchRangeError(f"transposition by {semitones} leaves pitch range")
    return shifted


def split_corpus(song_ids: list[str], ratio: float = 0.9, seed: int = 0) -> CorpusSplit:
    """Song-level split; train size is round(ratio * n) clamped to [1, n-1]."""
    if len(song_ids) < 2:
        raise CorpusError("need at least 2 songs to split")
    ids = sorted(song_ids)
    random.Random(seed).shuffle(ids)
    n_train = min(max(round(ratio * len(ids)), 1), len(ids) - 1)
    return CorpusSplit(train=sorted(ids[:n_train]), test=sorted(ids[n_train:]))


# --- MIDI ingestion -------------------------------------------------------


def quantize_step(tick: float, ticks_per_step: float) -> int:
    # nearest-16th with ties rounding up
    return int(np.floor(tick / ticks_per_step + 0.5))


def parse_midi(path) -> tuple[list[NoteEvent], np.ndarray | None]:
    """Extract a quantized monophonic melody (highest simultaneous note wins).

    Chords come from an optional `<stem>.chords` sidecar, one 12-char chroma
    bitstring per 16th step.
    """
    path = Path(path)
    try:
        midi = read_midi(path)
    except (OSError, MidiError) as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if midi.time_signature != (4, 4):
        raise MeterError(f"{path}: only 4/4 meter is supported, got {midi.time_signature}")
    events = melody_from_notes(midi.notes, midi.ticks_per_beat / 4)
    if not events:
        raise EmptyMelodyError(f"{path}: no notes after quantization")
    sidecar = path.with_suffix(".chords")
    chord = load_chord_sidecar(sidecar) if sidecar.exists() else None
    return events, chord


def melody_from_notes(notes: list[MidiNote], ticks_per_step: float) -> list[NoteEvent]:
    # paint the grid per step, highest pitch on top, then re-extract events
    if not notes:
        return []
    steps: dict[int, tuple[int, int]] = {}  # step -> (pitch, note serial)
    for serial, note in enumerate(notes):
        on = quantize_step(note.onset_tick, ticks_per_step)
        off = max(quantize_step(note.off_tick, ticks_per_step), on + 1)
        for step in range(on, off):
            held = steps.get(step)
            if held is None or note.pitch > held[0]:
                steps[step] = (note.pitch, serial)
    events: list[NoteEvent] = []
    for step in sorted(steps):
        pitch, serial = steps[step]
        prev = steps.get(step - 1)
        if events and prev is not None and prev == (pitch, serial):
            last = events[-1]
            events[-1] = NoteEvent(last.pitch, last.onset, last.duration + 1)
        else:
            events.append(NoteEvent(pitch, step, 1))
    return events


def load_chord_sidecar(path) -> np.ndarray:
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if len(line) != 12 or set(line) - {"0", "1"}:
            raise IngestionError(f"{path}: bad chroma line {line!r}")
        rows.append([int(c) for c in line])
    return np.array(rows, dtype=np.float32)


# --- Dataset cache --------------------------------------------------------


@dataclass
class DatasetCache:
    """Phrase windows plus the song-level split, serializable to disk."""

    melodies: np.ndarray  # (N, 128)
    song_ids: list[str]  # per window
    bar_offsets: np.ndarray  # (N,)
    chords: np.ndarray | None  # (N, 128, 12) or None
    split: CorpusSplit
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for mel in self.melodies:
            validate_melody(mel)

    @property
    def rhythms(self) -> np.ndarray:
        return np.stack([derive_rhythm(m) for m in self.melodies])

    def subset(self, song_ids: list[str]) -> np.ndarray:
        wanted = set(song_ids)
        return np.array([i for i, s in enumerate(self.song_ids) if s in wanted])

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = {
            "melodies": self.melodies.astype(np.int16),
            "bar_offsets": self.bar_offsets.astype(np.int32),
        }
        if self.chords is not None:
            arrays["chords"] = self.chords.astype(np.int8)
        np.savez_compressed(path, **arrays)
        manifest = {
            "format_version": CACHE_FORMAT_VERSION,
            "bars": PHRASE_BARS,
            "steps_per_bar": STEPS_PER_BAR,
            "song_ids": self.song_ids,
            "split": {"train": self.split.train, "test": self.split.test},
            "meta": self.meta,
        }
        path.with_suffix(".json").write_text(json.dumps(manifest, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DatasetCache":
        path = Path(path)
        manifest = json.loads(path.with_suffix(".json").read_text())
        if manifest["format_version"] != CACHE_FORMAT_VERSION:
            raise CorpusError(f"cache format {manifest['format_version']} unsupported")
        data = np.load(path)
        return cls(
            melodies=data["melodies"].astype(np.int64),
            song_ids=manifest["song_ids"],
            bar_offsets=data["bar_offsets"].astype(np.int64),
            chords=data["chords"].astype(np.float32) if "chords" in data else None,
            split=CorpusSplit(**manifest["split"]),
            meta=manifest.get("meta", {}),
        )

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.melodies.astype(np.int64).tobytes())
        h.update(json.dumps(self.song_ids).encode())
        h.update(json.dumps([self.split.train, self.split.test]).encode())
        return h.hexdigest()


def build_cache(
    songs: dict[str, np.ndarray],
    hop_bars: int = 1,
    split_ratio: float = 0.9,
    seed: int = 0,
    chords: dict[str, np.ndarray] | None = None,
) -> DatasetCache:
    """Window whole-song token sequences into 8-bar phrases and split by song."""
    split = split_corpus(list(songs), ratio=split_ratio, seed=seed)
    melodies, ids, offsets, chord_rows = [], [], [], []
    for song_id in sorted(songs):
        tokens = songs[song_id]
        chord = (chords or {}).get(song_id)
        for bar_offset, window in segment(tokens, PHRASE_BARS, hop_bars):
            melodies.append(window)
            ids.append(song_id)
            offsets.append(bar_offset)
            if chord is not None:
                start = bar_offset * STEPS_PER_BAR
                chord_rows.append(chord[start : start + PHRASE_STEPS])
    if not melodies:
        raise CorpusError("no song is long enough for an 8-bar phrase")
    return DatasetCache(
        melodies=np.stack(melodies),
        song_ids=ids,
        bar_offsets=np.array(offsets),
        chords=np.stack(chord_rows) if chord_rows and len(chord_rows) == len(melodies) else None,
        split=split,
        meta={"hop_bars": hop_bars, "split_ratio": split_ratio, "seed": seed},
    )


def ingest_directory(midi_dir, hop_bars: int = 1, split_ratio: float = 0.9, seed: int = 0):
    """Parse every .mid/.midi under midi_dir. Returns (cache, report)."""
    midi_dir = Path(midi_dir)
    songs: dict[str, np.ndarray] = {}
    chords: dict[str, np.ndarray] = {}
    report = {"kept": [], "dropped": {}}
    for path in sorted(midi_dir.rglob("*.mid")) + sorted(midi_dir.rglob("*.midi")):
        song_id = path.stem
        try:
            events, chord = parse_midi(path)
            last = events[-1]
            n_bars = -(-(last.onset + last.duration) // STEPS_PER_BAR)
            tokens = tokenize_melody(events, n_bars * STEPS_PER_BAR)
            if n_bars < PHRASE_BARS:
                report["dropped"][song_id] = f"only {n_bars} bars, need {PHRASE_BARS}"
                continue
            songs[song_id] = tokens
            if chord is not None:
                chords[song_id] = chord
            report["kept"].append(song_id)
        except CorpusError as exc:
            report["dropped"][song_id] = str(exc)
    if not songs:
        raise IngestionError(f"no usable MIDI files under {midi_dir}")
    if len(songs) < 2:
        raise CorpusError("need at least 2 usable songs for a train/test split")
    cache = build_cache(songs, hop_bars, split_ratio, seed, chords or None)
    return cache, report
