"""Closed-loop synthetic corpus: patterns -> audio -> conditioning features.

Stands in for a real drum dataset and a large pretrained audio encoder at
desk scale: procedural 16th-note patterns are synthesized to 44.1 kHz audio,
then reduced to a 100 Hz log-mel spectrogram and a frozen random-projection
"semantic" stream at ~75 Hz.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .events import (DEFAULT_FRAME_RATE, Grid, Note, NoteList, grid_from_notes,
                     notes_from_grid)

SAMPLE_RATE = 44100
STFT_WINDOW = 2048
STFT_HOP = 441          # 10 ms frames at 44.1 kHz
N_MEL_BANDS = 128
MEL_FLOOR = 1e-5
SEM_FRAME_RATE = 75.0
SEM_HOP = 588           # 44100 / 75
SEM_WINDOW = 1176
SEM_DIM = 64


@dataclass
class ComponentTimbre:
    freq: float        # tonal center frequency, Hz
    decay: float       # exponential decay time constant, seconds
    noise_mix: float   # 0 = pure tone, 1 = pure band-filtered noise
    bandwidth: float   # noise band half-width, Hz


# Spectrally separable but with overlapping cymbal classes on purpose.
DEFAULT_TIMBRES = (
    ComponentTimbre(60.0, 0.25, 0.1, 40.0),     # kick
    ComponentTimbre(200.0, 0.15, 0.6, 800.0),   # snare
    ComponentTimbre(120.0, 0.20, 0.2, 80.0),    # tom
    ComponentTimbre(8000.0, 0.06, 0.95, 3000.0),  # hi-hat
    ComponentTimbre(5000.0, 0.60, 0.9, 2500.0),   # crash
    ComponentTimbre(4000.0, 0.30, 0.8, 1500.0),   # ride
    ComponentTimbre(2500.0, 0.40, 0.3, 400.0),    # bell
)


@dataclass
class ClipSpec:
    duration: float = 5.0
    tempo: float = 120.0
    style_seed: int = 0
    timbres: tuple[ComponentTimbre, ...] = DEFAULT_TIMBRES
    kick_prob: float = 0.9
    snare_prob: float = 0.85
    hihat_prob: float = 0.8
    fill_prob: float = 0.06

    def __post_init__(self):
        if not 60.0 <= self.tempo <= 200.0:
            raise ValueError(f"tempo {self.tempo} outside [60, 200] BPM")
        n_frames = self.duration * DEFAULT_FRAME_RATE
        if abs(n_frames - round(n_frames)) > 1e-9:
            raise ValueError(f"duration {self.duration}s is not a whole number of frames")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * DEFAULT_FRAME_RATE))


def perturb_timbres(timbres: tuple[ComponentTimbre, ...], rng: np.random.Generator,
                    amount: float = 0.25) -> tuple[ComponentTimbre, ...]:
    """Jitter timbre parameters multiplicatively; used for held-out domain shift."""
    out = []
    for t in timbres:
        f = lambda: float(np.exp(rng.uniform(-amount, amount)))
        out.append(ComponentTimbre(t.freq * f(), t.decay * f(),
                                   min(1.0, t.noise_mix * f()), t.bandwidth * f()))
    return tuple(out)


def _velocity(rng: np.random.Generator, accent: bool) -> int:
    v = rng.normal(90.0, 15.0) + (15.0 if accent else 0.0)
    return int(np.clip(round(v), 20, 127))


def generate_pattern(spec: ClipSpec, rng: np.random.Generator) -> NoteList:
    """Procedural groove on a 16th-note grid at the clip tempo.

    Kick on strong beats, snare on backbeats, hi-hat eighths, sparse
    tom/cymbal fills; velocities ~ clamp(N(90, 15), 20, 127) with an
    accent boost on bar downbeats.
    """
    step = 60.0 / spec.tempo / 4.0  # 16th-note duration
    n_steps = int(spec.duration / step)
    notes = []
    for i in range(n_steps):
        t = i * step
        if round(t * DEFAULT_FRAME_RATE) >= spec.n_frames:
            break
        sixteenth = i % 16          # position within a 4/4 bar
        downbeat = sixteenth == 0
        if sixteenth in (0, 8) and rng.random() < spec.kick_prob:
            notes.append(Note(t, 0, _velocity(rng, downbeat)))
        if sixteenth in (4, 12) and rng.random() < spec.snare_prob:
            notes.append(Note(t, 1, _velocity(rng, False)))
        if sixteenth % 2 == 0 and rng.random() < spec.hihat_prob:
            notes.append(Note(t, 3, _velocity(rng, downbeat)))
        if rng.random() < spec.fill_prob:
            comp = int(rng.choice([2, 4, 5, 6]))
            notes.append(Note(t, comp, _velocity(rng, False)))
    return NoteList(notes)


def render_audio(notes: NoteList, spec: ClipSpec,
                 rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Additive synthesis: decaying sine + band-filtered noise per hit."""
    if rng is None:
        rng = np.random.default_rng(spec.style_seed)
    n_samples = int(round(spec.duration * SAMPLE_RATE))
    audio = np.zeros(n_samples)
    for note in notes:
        timbre = spec.timbres[note.component]
        start = int(round(note.time * SAMPLE_RATE))
        length = min(n_samples - start, int(3.0 * timbre.decay * SAMPLE_RATE) + 1)
        if length <= 0:
            continue
        t = np.arange(length) / SAMPLE_RATE
        envelope = np.exp(-t / timbre.decay)
        tone = np.sin(2.0 * np.pi * timbre.freq * t)
        noise = _bandpass_noise(length, timbre.freq, timbre.bandwidth, rng)
        hit = (1.0 - timbre.noise_mix) * tone + timbre.noise_mix * noise
        audio[start : start + length] += (note.velocity / 127.0) * envelope * hit
    peak = np.max(np.abs(audio))
    if peak > 1.0:
        audio /= peak
    return audio


def _bandpass_noise(length: int, center: float, half_width: float,
                    rng: np.random.Generator) -> np.ndarray:
    noise = rng.standard_normal(length)
    spectrum = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(length, d=1.0 / SAMPLE_RATE)
    mask = (freqs >= max(center - half_width, 0.0)) & (freqs <= center + half_width)
    spectrum[~mask] = 0.0
    band = np.fft.irfft(spectrum, n=length)
    rms = np.sqrt(np.mean(band ** 2))
    return band / rms if rms > 0 else band


def mel_filterbank(n_bands: int = N_MEL_BANDS, n_fft: int = STFT_WINDOW,
                   fmin: float = 20.0, fmax: float = SAMPLE_RATE / 2.0) -> np.ndarray:
    """Triangular mel filters, (n_bands, n_fft//2 + 1)."""
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)

    def mel_to_hz(m):
        return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)

    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_bands + 2)
    hz_points = mel_to_hz(mel_points)
    fft_freqs = np.arange(n_fft // 2 + 1) * SAMPLE_RATE / n_fft
    bank = np.zeros((n_bands, n_fft // 2 + 1))
    for b in range(n_bands):
        lo, mid, hi = hz_points[b], hz_points[b + 1], hz_points[b + 2]
        up = (fft_freqs - lo) / (mid - lo)
        down = (hi - fft_freqs) / (hi - mid)
        bank[b] = np.maximum(0.0, np.minimum(up, down))
    return bank


_FILTERBANK: Optional[np.ndarray] = None


def log_mel(waveform: np.ndarray) -> np.ndarray:
    """Log mel spectrogram, (T_s, 128) with T_s = ceil(samples / 441)."""
    if len(waveform) == 0:
        raise ValueError("empty waveform")
    global _FILTERBANK
    if _FILTERBANK is None:
        _FILTERBANK = mel_filterbank()
    n_frames = -(-len(waveform) // STFT_HOP)
    half = STFT_WINDOW // 2
    padded = np.pad(waveform, (half, half + STFT_WINDOW))
    window = np.hanning(STFT_WINDOW)
    frames = np.stack([
        padded[i * STFT_HOP : i * STFT_HOP + STFT_WINDOW] * window
        for i in range(n_frames)
    ])
    power = np.abs(np.fft.rfft(frames, axis=1)) ** 2
    mel = power @ _FILTERBANK.T
    return np.log(mel + MEL_FLOOR)


def semantic_features(waveform: np.ndarray, encoder_seed: int = 2024) -> np.ndarray:
    """Frozen random strided conv encoder at ~75 frames/s, (T_m, 64).

    Never trained; a deterministic stand-in for a pretrained audio encoder
    that supplies a second, differently-clocked conditioning stream.
    """
    if len(waveform) == 0:
        raise ValueError("empty waveform")
    rng = np.random.default_rng(encoder_seed)
    w1 = rng.standard_normal((SEM_WINDOW, 128)) / np.sqrt(SEM_WINDOW)
    w2 = rng.standard_normal((128, SEM_DIM)) / np.sqrt(128)
    n_frames = max(1, (len(waveform) - SEM_WINDOW) // SEM_HOP + 1)
    padded = np.pad(waveform, (0, SEM_WINDOW))
    frames = np.stack([
        padded[i * SEM_HOP : i * SEM_HOP + SEM_WINDOW] for i in range(n_frames)
    ])
    h = np.tanh(frames @ w1)
    return np.tanh(h @ w2)


# --- dataset persistence ----------------------------------------------------


@dataclass
class ClipRecord:
    index: int
    split: str
    notes: NoteList
    grid: Grid
    spec_features: np.ndarray
    sem_features: np.ndarray
    tempo: float


def _split_for(index: int, n_clips: int) -> str:
    # 80/10/10 by clip index
    n_train = int(n_clips * 0.8)
    n_valid = int(n_clips * 0.1)
    if index < n_train:
        return "train"
    if index < n_train + n_valid:
        return "valid"
    return "test"


def synthesize_clip(index: int, seed_seq: np.random.SeedSequence, *,
                    duration: float = 5.0,
                    timbres: tuple[ComponentTimbre, ...] = DEFAULT_TIMBRES,
                    encoder_seed: int = 2024,
                    split: str = "train") -> ClipRecord:
    rng = np.random.default_rng(seed_seq)
    tempo = float(rng.uniform(90.0, 140.0))
    spec = ClipSpec(duration=duration, tempo=tempo, style_seed=index, timbres=timbres)
    pattern = generate_pattern(spec, rng)
    grid = grid_from_notes(pattern, DEFAULT_FRAME_RATE, spec.n_frames)
    # store the frame-quantized notes so grid <-> notes round-trips exactly
    notes = notes_from_grid(grid)
    audio = render_audio(notes, spec, rng)
    return ClipRecord(
        index=index,
        split=split,
        notes=notes,
        grid=grid,
        spec_features=log_mel(audio),
        sem_features=semantic_features(audio, encoder_seed),
        tempo=tempo,
    )


def make_dataset(n_clips: int, seed: int, out_dir: str, *,
                 duration: float = 5.0,
                 timbre_jitter: float = 0.0,
                 encoder_seed: int = 2024) -> list[ClipRecord]:
    """Build and persist a reproducible corpus with an 80/10/10 split."""
    if n_clips < 1:
        raise ValueError(f"n_clips must be >= 1, got {n_clips}")
    clip_dir = os.path.join(out_dir, "clips")
    os.makedirs(clip_dir, exist_ok=True)
    master = np.random.SeedSequence(seed)
    children = master.spawn(n_clips + 1)
    timbres = DEFAULT_TIMBRES
    if timbre_jitter > 0.0:
        timbres = perturb_timbres(DEFAULT_TIMBRES, np.random.default_rng(children[-1]),
                                  timbre_jitter)
    records = []
    for i in range(n_clips):
        record = synthesize_clip(i, children[i], duration=duration, timbres=timbres,
                                 encoder_seed=encoder_seed,
                                 split=_split_for(i, n_clips))
        _write_clip(clip_dir, record)
        records.append(record)
    return records


def _write_atomic(path: str, data: bytes):
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def _write_clip(clip_dir: str, record: ClipRecord):
    stem = os.path.join(clip_dir, f"{record.index:04d}")
    _write_atomic(stem + ".notes.txt", record.notes.to_text().encode())
    spec32 = record.spec_features.astype("<f4")
    sem32 = record.sem_features.astype("<f4")
    _write_atomic(stem + ".spec.f32", spec32.tobytes())
    _write_atomic(stem + ".sem.f32", sem32.tobytes())
    meta = {
        "index": record.index,
        "split": record.split,
        "tempo": round(record.tempo, 6),
        "n_frames": record.grid.n_frames,
        "frame_rate": record.grid.frame_rate,
        "spec_shape": list(record.spec_features.shape),
        "sem_shape": list(record.sem_features.shape),
        "layout": "little-endian float32, row-major",
    }
    _write_atomic(stem + ".meta", json.dumps(meta, indent=1).encode())


def load_dataset(data_dir: str) -> list[ClipRecord]:
    clip_dir = os.path.join(data_dir, "clips")
    if not os.path.isdir(clip_dir):
        raise FileNotFoundError(f"no clips/ directory under {data_dir}")
    records = []
    stems = sorted(f[:-5] for f in os.listdir(clip_dir) if f.endswith(".meta"))
    for stem in stems:
        path = os.path.join(clip_dir, stem)
        with open(path + ".meta") as fh:
            meta = json.load(fh)
        notes = NoteList.from_text(open(path + ".notes.txt").read())
        spec = np.frombuffer(open(path + ".spec.f32", "rb").read(), dtype="<f4")
        sem = np.frombuffer(open(path + ".sem.f32", "rb").read(), dtype="<f4")
        spec = spec.reshape(meta["spec_shape"]).astype(np.float64)
        sem = sem.reshape(meta["sem_shape"]).astype(np.float64)
        grid = grid_from_notes(notes, meta["frame_rate"], meta["n_frames"])
        records.append(ClipRecord(
            index=meta["index"], split=meta["split"], notes=notes, grid=grid,
            spec_features=spec, sem_features=sem, tempo=meta["tempo"]))
    return records


def corpus_checksum(records: list[ClipRecord]) -> int:
    """Checksum over float32-cast contents, invariant to a save/load cycle.

    Features are persisted as float32, so hashing the float32 cast makes the
    checksum of an in-memory corpus equal that of its reloaded copy.
    """
    crc = 0
    for r in sorted(records, key=lambda r: r.index):
        crc = zlib.crc32(r.notes.to_text().encode(), crc)
        for arr in (r.grid.values, r.spec_features, r.sem_features):
            crc = zlib.crc32(np.ascontiguousarray(arr.astype("<f4")).tobytes(), crc)
    return crc
