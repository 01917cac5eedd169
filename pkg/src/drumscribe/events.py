"""Drum event data model: sparse note lists, dense model-space grids, MIDI I/O."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional

import numpy as np

N_COMPONENTS = 7

# Component vocabulary: kick, snare, tom, hi-hat, crash, ride, bell.
COMPONENT_NAMES = ("kick", "snare", "tom", "hihat", "crash", "ride", "bell")

# General MIDI percussion pitches for the 7-component vocabulary.
GM_PITCHES = {0: 36, 1: 38, 2: 48, 3: 42, 4: 49, 5: 51, 6: 53}

DEFAULT_FRAME_RATE = 100.0

# MIDI timing constants used by the exporter: 480 PPQ at 120 BPM
# gives 960 ticks per second (~1.04 ms resolution).
PPQ = 480
TEMPO_BPM = 120
TICKS_PER_SECOND = PPQ * TEMPO_BPM / 60.0
NOTE_GATE_SECONDS = 0.1  # fixed gate for exported percussion hits


class Note(NamedTuple):
    time: float
    component: int
    velocity: int


class EventError(ValueError):
    pass


class MidiParseError(ValueError):
    """Raised on malformed MIDI input; carries the failing byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


@dataclass
class NoteList:
    """Sparse drum events, kept sorted by (time, component)."""

    entries: list[Note] = field(default_factory=list)

    def __post_init__(self):
        checked = []
        for e in self.entries:
            e = Note(float(e[0]), int(e[1]), int(e[2]))
            if e.time < 0:
                raise EventError(f"negative onset time {e.time}")
            if not 0 <= e.velocity <= 127:
                raise EventError(f"velocity {e.velocity} outside [0, 127]")
            if e.component < 0:
                raise EventError(f"negative component {e.component}")
            checked.append(e)
        self.entries = sorted(checked, key=lambda n: (n.time, n.component))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __eq__(self, other):
        if not isinstance(other, NoteList):
            return NotImplemented
        return self.entries == other.entries

    def to_text(self) -> str:
        """Line-oriented `time_sec component velocity` fixture format."""
        return "".join(f"{n.time:.6f} {n.component} {n.velocity}\n" for n in self.entries)

    @classmethod
    def from_text(cls, text: str) -> "NoteList":
        notes = []
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            t, c, v = line.split()
            notes.append(Note(float(t), int(c), int(v)))
        return cls(notes)


@dataclass
class Grid:
    """Dense (N, D, 2) model-space array; channel 0 = onset, channel 1 = velocity."""

    values: np.ndarray
    frame_rate: float = DEFAULT_FRAME_RATE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 2:
            raise EventError(f"grid shape {self.values.shape} is not (N, D, 2)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_components(self) -> int:
        return self.values.shape[1]


def velocity_to_model(v: int) -> float:
    """Map integer velocity 0..127 onto [-1, 1]."""
    return 2.0 * (v / 127.0) - 1.0


def velocity_from_model(x: float) -> int:
    v = int(round(127.0 * (x + 1.0) / 2.0))
    return max(0, min(127, v))


def grid_from_notes(
    notes: NoteList,
    frame_rate: float = DEFAULT_FRAME_RATE,
    n_frames: int = 500,
    n_components: int = N_COMPONENTS,
) -> Grid:
    """Rasterize sparse notes onto a dense model-space grid.

    Onset channel is +1 at hit frames, -1 elsewhere; velocity channel is the
    normalized velocity at hit frames, -1 elsewhere. Two notes rounding to
    the same (frame, component) cell keep the louder hit.
    """
    values = np.full((n_frames, n_components, 2), -1.0, dtype=np.float64)
    for note in notes:
        if note.component >= n_components:
            raise EventError(f"component {note.component} >= {n_components}")
        # round half up so a hit exactly between frames lands on the later one
        frame = int(math.floor(note.time * frame_rate + 0.5))
        if frame >= n_frames:
            raise EventError(
                f"note at t={note.time}s maps to frame {frame} >= {n_frames}"
            )
        vel = velocity_to_model(note.velocity)
        if values[frame, note.component, 0] > 0 and values[frame, note.component, 1] >= vel:
            continue  # collision: keep the louder hit
        values[frame, note.component, 0] = 1.0
        values[frame, note.component, 1] = vel
    return Grid(values, frame_rate)


def notes_from_grid(grid: Grid, onset_threshold: float = 0.0) -> NoteList:
    """Decode a model-space grid back to sparse notes.

    A note is emitted wherever the onset channel exceeds the threshold
    (default 0.0, the midpoint of the {-1, +1} encoding).
    """
    if not np.all(np.isfinite(grid.values)):
        raise EventError("grid contains non-finite values")
    notes = []
    hit_frames, hit_comps = np.nonzero(grid.values[:, :, 0] > onset_threshold)
    for frame, comp in zip(hit_frames.tolist(), hit_comps.tolist()):
        vel = velocity_from_model(grid.values[frame, comp, 1])
        notes.append(Note(frame / grid.frame_rate, comp, vel))
    return NoteList(notes)


@dataclass
class ComponentMap:
    """Total map from source component index to target index (None = drop)."""

    table: dict[int, Optional[int]]

    def __post_init__(self):
        targets = sorted({t for t in self.table.values() if t is not None})
        if targets and targets != list(range(len(targets))):
            raise EventError(f"targets {targets} are not contiguous from 0")

    @property
    def n_targets(self) -> int:
        return len({t for t in self.table.values() if t is not None})

    def apply(self, component: int) -> Optional[int]:
        if component not in self.table:
            raise EventError(f"component {component} missing from map")
        return self.table[component]


IDENTITY_MAP = ComponentMap({i: i for i in range(N_COMPONENTS)})

# 5-hit setting: kick, snare, tom, hi-hat, cymbal (crash/ride/bell merged).
MAP_7_TO_5 = ComponentMap({0: 0, 1: 1, 2: 2, 3: 3, 4: 4, 5: 4, 6: 4})

# 3-hit setting: kick, snare, everything else.
MAP_7_TO_3 = ComponentMap({0: 0, 1: 1, 2: 2, 3: 2, 4: 2, 5: 2, 6: 2})

REMAP_PRESETS = {"none": IDENTITY_MAP, "5": MAP_7_TO_5, "3": MAP_7_TO_3}


def remap(notes: NoteList, cmap: ComponentMap) -> NoteList:
    """Relabel components; merged simultaneous hits keep the max velocity."""
    merged: dict[tuple[float, int], int] = {}
    for note in notes:
        target = cmap.apply(note.component)
        if target is None:
            continue
        key = (note.time, target)
        if key not in merged or note.velocity > merged[key]:
            merged[key] = note.velocity
    return NoteList([Note(t, c, v) for (t, c), v in merged.items()])


# --- Standard MIDI File (format 0) export/import -------------------------


def _vlq(value: int) -> bytes:
    """Encode a variable-length quantity."""
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def midi_export(notes: NoteList, pitch_map: Optional[dict[int, int]] = None) -> bytes:
    """Write a format-0 SMF: channel-10 percussion, fixed 100 ms gates."""
    pitch_map = GM_PITCHES if pitch_map is None else pitch_map
    gate_ticks = int(round(NOTE_GATE_SECONDS * TICKS_PER_SECOND))
    events = []  # (tick, order, status, pitch, velocity)
    for note in notes:
        if note.component not in pitch_map:
            raise EventError(f"no pitch mapping for component {note.component}")
        tick = int(round(note.time * TICKS_PER_SECOND))
        pitch = pitch_map[note.component]
        events.append((tick, 1, 0x99, pitch, note.velocity))
        events.append((tick + gate_ticks, 0, 0x89, pitch, 0))
    events.sort()

    track = bytearray()
    # tempo meta-event: microseconds per quarter note
    track += _vlq(0) + bytes([0xFF, 0x51, 0x03])
    track += int(60_000_000 / TEMPO_BPM).to_bytes(3, "big")
    last_tick = 0
    for tick, _, status, pitch, velocity in events:
        track += _vlq(tick - last_tick) + bytes([status, pitch, velocity])
        last_tick = tick
    track += _vlq(0) + bytes([0xFF, 0x2F, 0x00])  # end of track

    header = b"MThd" + (6).to_bytes(4, "big")
    header += (0).to_bytes(2, "big") + (1).to_bytes(2, "big") + PPQ.to_bytes(2, "big")
    return bytes(header + b"MTrk" + len(track).to_bytes(4, "big") + track)


def _read_vlq(data: bytes, pos: int) -> tuple[int, int]:
    value = 0
    start = pos
    while True:
        if pos >= len(data):
            raise MidiParseError("truncated variable-length quantity", start)
        byte = data[pos]
        pos += 1
        value = (value << 7) | (byte & 0x7F)
        if not byte & 0x80:
            return value, pos


def midi_import(data: bytes, pitch_map: Optional[dict[int, int]] = None) -> NoteList:
    """Parse a format-0 SMF produced by :func:`midi_export`."""
    pitch_map = GM_PITCHES if pitch_map is None else pitch_map
    inverse = {pitch: comp for comp, pitch in pitch_map.items()}
    if len(data) < 14 or data[:4] != b"MThd":
        raise MidiParseError("missing MThd chunk", 0)
    header_len = int.from_bytes(data[4:8], "big")
    division = int.from_bytes(data[12:14], "big")
    if division & 0x8000:
        raise MidiParseError("SMPTE divisions unsupported", 12)
    pos = 8 + header_len
    if pos + 8 > len(data) or data[pos : pos + 4] != b"MTrk":
        raise MidiParseError("missing MTrk chunk", pos)
    track_len = int.from_bytes(data[pos + 4 : pos + 8], "big")
    pos += 8
    end = pos + track_len
    if end > len(data):
        raise MidiParseError("truncated track", pos)

    us_per_quarter = 60_000_000 / TEMPO_BPM
    notes = []
    tick = 0
    status = 0
    while pos < end:
        delta, pos = _read_vlq(data, pos)
        tick += delta
        if data[pos] & 0x80:
            status = data[pos]
            pos += 1
        if status == 0xFF:  # meta event
            if pos + 1 > end:
                raise MidiParseError("truncated meta event", pos)
            meta_type = data[pos]
            length, pos = _read_vlq(data, pos + 1)
            payload = data[pos : pos + length]
            pos += length
            if meta_type == 0x51:
                us_per_quarter = int.from_bytes(payload, "big")
            if meta_type == 0x2F:
                break
        elif status & 0xF0 in (0x90, 0x80):
            if pos + 2 > end:
                raise MidiParseError("truncated note event", pos)
            pitch, velocity = data[pos], data[pos + 1]
            pos += 2
            # our writer emits explicit note-offs on 0x8n, so a velocity-0
            # note-on is a real (silent) hit, preserving round-trips
            if status & 0xF0 == 0x90:
                seconds = tick * us_per_quarter / (division * 1_000_000)
                if pitch in inverse:
                    notes.append(Note(seconds, inverse[pitch], velocity))
        else:
            raise MidiParseError(f"unsupported status byte 0x{status:02x}", pos - 1)
    return NoteList(notes)
