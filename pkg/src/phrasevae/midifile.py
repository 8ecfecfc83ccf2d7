"""Minimal standard MIDI file (SMF) reader/writer.

Only the events this project needs are interpreted: note on/off, tempo and
time-signature meta events. Everything else is parsed (so running status and
track lengths stay consistent) and discarded.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field


class MidiError(Exception):
    pass


@dataclass
class MidiNote:
    pitch: int
    onset_tick: int
    off_tick: int
    velocity: int = 90


@dataclass
class MidiData:
    ticks_per_beat: int
    notes: list[MidiNote] = field(default_factory=list)
    tempo_us_per_beat: int = 500000
    time_signature: tuple[int, int] = (4, 4)


def _read_varint(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    while True:
        if pos >= len(data):
            raise MidiError("truncated variable-length quantity")
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def _write_varint(value: int) -> bytes:
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def read_midi(path) -> MidiData:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 14 or raw[:4] != b"MThd":
        raise MidiError(f"{path}: not a standard MIDI file")
    header_len, fmt, ntracks, division = struct.unpack(">IHHH", raw[4:14])
    if division & 0x8000:
        raise MidiError("SMPTE time division is not supported")
    midi = MidiData(ticks_per_beat=division)

    pos = 8 + header_len
    for _ in range(ntracks):
        if raw[pos : pos + 4] != b"MTrk":
            raise MidiError("missing MTrk chunk")
        (track_len,) = struct.unpack(">I", raw[pos + 4 : pos + 8])
        track = raw[pos + 8 : pos + 8 + track_len]
        pos += 8 + track_len
        _read_track(track, midi)
    if not midi.notes:
        # caller decides whether an empty file is an error
        pass
    midi.notes.sort(key=lambda n: (n.onset_tick, -n.pitch))
    return midi


def _read_track(track: bytes, midi: MidiData) -> None:
    tick = 0
    tpos = 0
    status = 0
    open_notes: dict[tuple[int, int], MidiNote] = {}
    while tpos < len(track):
        delta, tpos = _read_varint(track, tpos)
        tick += delta
        byte = track[tpos]
        if byte & 0x80:
            status = byte
            tpos += 1
        elif status == 0:
            raise MidiError("data byte without running status")
        if status == 0xFF:
            meta_type = track[tpos]
            length, dpos = _read_varint(track, tpos + 1)
            data = track[dpos : dpos + length]
            tpos = dpos + length
            if meta_type == 0x51 and length == 3:
                midi.tempo_us_per_beat = int.from_bytes(data, "big")
            elif meta_type == 0x58 and length >= 2:
                midi.time_signature = (data[0], 1 << data[1])
            elif meta_type == 0x2F:
                break
        elif status in (0xF0, 0xF7):
            length, dpos = _read_varint(track, tpos)
            tpos = dpos + length
        else:
            kind = status & 0xF0
            channel = status & 0x0F
            n_data = 1 if kind in (0xC0, 0xD0) else 2
            data = track[tpos : tpos + n_data]
            tpos += n_data
            if kind == 0x90 and data[1] > 0:
                note = MidiNote(data[0], tick, tick, data[1])
                open_notes[(channel, data[0])] = note
                midi.notes.append(note)
            elif kind == 0x80 or (kind == 0x90 and data[1] == 0):
                note = open_notes.pop((channel, data[0]), None)
                if note is not None:
                    note.off_tick = tick
    # notes missing an off event end at the final tick seen
    for note in open_notes.values():
        note.off_tick = max(note.off_tick, tick)


def write_midi(path, midi: MidiData) -> None:
    events: list[tuple[int, int, bytes]] = []
    events.append((0, 0, b"\xff\x51\x03" + midi.tempo_us_per_beat.to_bytes(3, "big")))
    num, denom = midi.time_signature
    events.append((0, 0, bytes([0xFF, 0x58, 0x04, num, denom.bit_length() - 1, 24, 8])))
    for note in midi.notes:
        events.append((note.onset_tick, 1, bytes([0x90, note.pitch, note.velocity])))
        events.append((note.off_tick, 0, bytes([0x80, note.pitch, 0])))
    events.sort(key=lambda e: (e[0], e[1]))

    chunks = []
    last_tick = 0
    for tick, _, payload in events:
        chunks.append(_write_varint(tick - last_tick) + payload)
        last_tick = tick
    chunks.append(b"\x00\xff\x2f\x00")
    track = b"".join(chunks)

    with open(path, "wb") as fh:
        fh.write(b"MThd" + struct.pack(">IHHH", 6, 0, 1, midi.ticks_per_beat))
        fh.write(b"MTrk" + struct.pack(">I", len(track)) + track)
