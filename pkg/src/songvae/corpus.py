"""MIDI parsing, key/tempo normalization and piano-roll slicing.

Timing is kept as exact :class:`fractions.Fraction` beats until the roll is
quantized, so a file written by :func:`export_midi` re-imports onto the same
grid without drift.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Sequence

import mido
import numpy as np

from .errors import EmptyFileError, KeyEstimationError, ParseError, ShapeError, TooShortError

N_PITCHES = 128
PHRASE_STEPS = 50
SONG_PHRASES = 17
SONG_STEPS = PHRASE_STEPS * SONG_PHRASES
BAR_STEPS = 25
BEATS_PER_PHRASE = 8
STEPS_PER_BEAT = Fraction(PHRASE_STEPS, BEATS_PER_PHRASE)
TARGET_TEMPO = 500_000  # microseconds per beat, i.e. 120 bpm
EXPORT_TICKS_PER_BEAT = 400  # 64 ticks per step
DRUM_CHANNEL = 9

# Krumhansl-Kessler major-key probe-tone profile, index 0 = tonic.
MAJOR_PROFILE = np.array(
    [6.35, 2.23, 3.48, 2.33, 4.38, 4.09, 2.52, 5.19, 2.39, 3.66, 2.29, 2.88]
)


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: Fraction
    duration: Fraction
    velocity: int = 100

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside 0..127")
        if self.onset < 0:
            raise ValueError("negative onset")
        if self.duration <= 0:
            raise ValueError("non-positive duration")

    @property
    def offset(self) -> Fraction:
        return self.onset + self.duration


@dataclass
class NoteSequence:
    """Note events plus the tempo map they were read with.

    ``tempos`` is a sorted list of ``(beat, microseconds_per_beat)``.
    """

    events: list[NoteEvent]
    tempos: list[tuple[Fraction, int]] = field(
        default_factory=lambda: [(Fraction(0), TARGET_TEMPO)]
    )
    transposition: int = 0
    source: str | None = None

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[NoteEvent]:
        return iter(self.events)

    def __getitem__(self, i):
        return self.events[i]


@dataclass
class PianoRoll:
    grid: np.ndarray
    source: str | None = None
    transposition: int = 0

    def __post_init__(self):
        if self.grid.ndim != 2 or self.grid.shape[1] != N_PITCHES:
            raise ShapeError(f"piano roll must be (T, 128), got {self.grid.shape}")

    @property
    def n_steps(self) -> int:
        return self.grid.shape[0]


@dataclass
class SongTensor:
    phrases: np.ndarray  # (17, 50, 128) uint8
    labels: tuple[int, ...]

    def __post_init__(self):
        self.phrases = np.asarray(self.phrases, dtype=np.uint8)
        check_song(self.phrases)
        if len(self.labels) != SONG_PHRASES:
            raise ShapeError(f"song needs {SONG_PHRASES} labels, got {len(self.labels)}")
        self.labels = tuple(int(x) for x in self.labels)

    @property
    def grid(self) -> np.ndarray:
        return self.phrases.reshape(SONG_STEPS, N_PITCHES)

    @classmethod
    def from_grid(cls, grid: np.ndarray, labels: Sequence[int]) -> "SongTensor":
        grid = np.asarray(grid)
        if grid.shape != (SONG_STEPS, N_PITCHES):
            raise ShapeError(f"song grid must be (850, 128), got {grid.shape}")
        return cls(grid.reshape(SONG_PHRASES, PHRASE_STEPS, N_PITCHES), tuple(labels))


def check_phrase(phrase: np.ndarray) -> np.ndarray:
    if phrase.shape != (PHRASE_STEPS, N_PITCHES):
        raise ShapeError(f"phrase must be (50, 128), got {phrase.shape}")
    return phrase


def check_song(phrases: np.ndarray) -> np.ndarray:
    if phrases.shape != (SONG_PHRASES, PHRASE_STEPS, N_PITCHES):
        raise ShapeError(f"song must be (17, 50, 128), got {phrases.shape}")
    return phrases


# --------------------------------------------------------------------------
# MIDI input


def load_midi(path) -> NoteSequence:
    """Read a format 0/1 Standard MIDI File into beat-timed note events.

    Note-on/note-off pairs are matched first-in first-out per channel and
    pitch. Channel 10 (drums) is ignored. Zero-length notes are dropped.
    """
    path = Path(path)
    try:
        mid = mido.MidiFile(str(path), clip=True)
    except (OSError, EOFError, ValueError, KeyError, IndexError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    if mid.type == 2:
        raise ParseError(f"{path}: format 2 MIDI files are not supported")
    tpb = mid.ticks_per_beat
    if not tpb or tpb <= 0:
        raise ParseError(f"{path}: unsupported time division")

    tick = 0
    tempos: list[tuple[int, int]] = []
    open_notes: dict[tuple[int, int], list[tuple[int, int]]] = {}
    raw: list[tuple[int, int, int, int]] = []  # (on_tick, off_tick, pitch, velocity)
    for msg in mido.merge_tracks(mid.tracks):
        tick += msg.time
        if msg.type == "set_tempo":
            tempos.append((tick, msg.tempo))
        elif msg.type in ("note_on", "note_off"):
            if msg.channel == DRUM_CHANNEL:
                continue
            key = (msg.channel, msg.note)
            if msg.type == "note_on" and msg.velocity > 0:
                open_notes.setdefault(key, []).append((tick, msg.velocity))
            elif open_notes.get(key):
                start, vel = open_notes[key].pop(0)
                raw.append((start, tick, msg.note, vel))
    for (_, pitch), pending in open_notes.items():
        for start, vel in pending:
            raw.append((start, tick, pitch, vel))

    events = [
        NoteEvent(p, Fraction(on, tpb), Fraction(off - on, tpb), v)
        for on, off, p, v in raw
        if off > on
    ]
    if not events:
        raise EmptyFileError(f"{path}: no note events")
    events.sort(key=lambda e: (e.onset, e.pitch, e.duration))

    tempo_map = [(Fraction(0), TARGET_TEMPO)]
    for t, us in sorted(tempos, key=lambda x: x[0]):
        beat = Fraction(t, tpb)
        if beat == tempo_map[-1][0]:
            tempo_map[-1] = (beat, us)
        else:
            tempo_map.append((beat, us))
    return NoteSequence(events, tempo_map, 0, str(path))


def _beats_at_target_tempo(beat: Fraction, tempos: list[tuple[Fraction, int]]) -> Fraction:
    """Map a source-tempo beat position onto the 120 bpm beat grid."""
    out = Fraction(0)
    for i, (start, us) in enumerate(tempos):
        end = tempos[i + 1][0] if i + 1 < len(tempos) else None
        if beat <= start:
            break
        seg_end = beat if end is None or beat < end else end
        out += (seg_end - start) * Fraction(us, TARGET_TEMPO)
    return out


# --------------------------------------------------------------------------
# normalization


def pitch_class_histogram(events: Sequence[NoteEvent]) -> np.ndarray:
    hist = np.zeros(12)
    for e in events:
        hist[e.pitch % 12] += float(e.duration)
    return hist


def estimate_major_key(events: Sequence[NoteEvent]) -> int:
    """Tonic pitch class (0 = C) of the best-correlated major key.

    Ties go to the key needing the smallest downward transposition.
    """
    hist = pitch_class_histogram(events)
    if hist.sum() <= 0:
        raise KeyEstimationError("empty pitch-class histogram")
    if np.ptp(hist) == 0:
        return 0
    scores = np.array([np.corrcoef(hist, np.roll(MAJOR_PROFILE, k))[0, 1] for k in range(12)])
    best = scores.max()
    return int(np.flatnonzero(np.isclose(scores, best, rtol=0, atol=1e-12))[0])


def normalize(seq: NoteSequence) -> NoteSequence:
    """Re-time onto a 120 bpm beat grid, then transpose to C major."""
    if len(seq.events) == 0:
        raise KeyEstimationError("cannot normalize an empty event list")
    retimed = []
    for e in seq.events:
        on = _beats_at_target_tempo(e.onset, seq.tempos)
        off = _beats_at_target_tempo(e.offset, seq.tempos)
        if off > on:
            retimed.append((e.pitch, on, off - on, e.velocity))

    hist_events = [NoteEvent(p, on, d, v) for p, on, d, v in retimed]
    shift = -estimate_major_key(hist_events)
    lo = min(p for p, *_ in retimed)
    hi = max(p for p, *_ in retimed)
    if lo + shift < 0:
        shift += 12
    if hi + shift > 127:
        shift -= 12
    if lo + shift < 0 or hi + shift > 127:
        raise KeyEstimationError("pitch range too wide to transpose into 0..127")

    events = [NoteEvent(p + shift, on, d, v) for p, on, d, v in retimed]
    events.sort(key=lambda e: (e.onset, e.pitch, e.duration))
    return NoteSequence(events, [(Fraction(0), TARGET_TEMPO)], seq.transposition + shift, seq.source)


# --------------------------------------------------------------------------
# piano rolls


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def to_piano_roll(
    events: Sequence[NoteEvent] | NoteSequence,
    steps_per_beat: Fraction = STEPS_PER_BEAT,
    n_steps: int | None = None,
) -> PianoRoll:
    """Quantize note events onto a binary (T, 128) grid.

    Onsets and offsets round to the nearest step; every note keeps at least
    one step. ``n_steps`` pads or truncates the result to a fixed length.
    """
    spb = Fraction(steps_per_beat)
    source = getattr(events, "source", None)
    transposition = getattr(events, "transposition", 0)
    spans = []
    for e in events:
        start = _round_half_up(e.onset * spb)
        end = _round_half_up(e.offset * spb)
        spans.append((start, max(end, start + 1), e.pitch))
    length = max((end for _, end, _ in spans), default=0)
    if n_steps is not None:
        length = n_steps
    grid = np.zeros((length, N_PITCHES), dtype=np.uint8)
    for start, end, pitch in spans:
        grid[start:end, pitch] = 1
    return PianoRoll(grid, source, transposition)


def split_phrases(roll: PianoRoll | np.ndarray) -> list[np.ndarray]:
    grid = roll.grid if isinstance(roll, PianoRoll) else np.asarray(roll)
    n = grid.shape[0] // PHRASE_STEPS
    return [grid[i * PHRASE_STEPS:(i + 1) * PHRASE_STEPS].copy() for i in range(n)]


def build_song_tensor(phrases: Sequence[np.ndarray], dictionary) -> SongTensor:
    if len(phrases) < SONG_PHRASES:
        raise TooShortError(f"song has {len(phrases)} phrases, need {SONG_PHRASES}")
    chosen = np.stack([check_phrase(np.asarray(p)) for p in phrases[:SONG_PHRASES]])
    return SongTensor(chosen, tuple(dictionary.label(p) for p in chosen))


def roll_to_notes(grid: np.ndarray) -> list[tuple[int, int, int]]:
    """Merge runs of active steps into ``(start_step, n_steps, pitch)`` notes.

    Sorted by start step, then pitch.
    """
    grid = np.asarray(grid, dtype=np.int8)
    if grid.size == 0:
        return []
    padded = np.zeros((grid.shape[0] + 2, grid.shape[1]), dtype=np.int8)
    padded[1:-1] = grid != 0
    d = np.diff(padded, axis=0)
    on_t, on_p = np.nonzero(d == 1)
    off_t, off_p = np.nonzero(d == -1)
    # nonzero is row-major (time first), reorder by pitch so runs pair up
    on_order = np.lexsort((on_t, on_p))
    off_order = np.lexsort((off_t, off_p))
    starts, pitches = on_t[on_order], on_p[on_order]
    lengths = off_t[off_order] - starts
    notes = sorted(zip(starts.tolist(), lengths.tolist(), pitches.tolist()), key=lambda n: (n[0], n[2]))
    return notes


def export_midi(song: SongTensor | np.ndarray, path, velocity: int = 100) -> None:
    """Write a single-track format 0 MIDI file at 120 bpm, 8/50 beat per step."""
    grid = song.grid if isinstance(song, SongTensor) else np.asarray(song)
    ticks_per_step = EXPORT_TICKS_PER_BEAT * BEATS_PER_PHRASE // PHRASE_STEPS
    timeline = []
    for start, length, pitch in roll_to_notes(grid):
        timeline.append(((start + length) * ticks_per_step, 0, pitch))
        timeline.append((start * ticks_per_step, 1, pitch))
    timeline.sort()

    track = mido.MidiTrack()
    track.append(mido.MetaMessage("set_tempo", tempo=TARGET_TEMPO, time=0))
    track.append(mido.MetaMessage("time_signature", numerator=4, denominator=4, time=0))
    now = 0
    for tick, kind, pitch in timeline:
        msg_type = "note_on" if kind else "note_off"
        track.append(mido.Message(msg_type, note=pitch, velocity=velocity if kind else 0, time=tick - now))
        now = tick
    end = grid.shape[0] * ticks_per_step
    track.append(mido.MetaMessage("end_of_track", time=max(end - now, 0)))
    mid = mido.MidiFile(type=0, ticks_per_beat=EXPORT_TICKS_PER_BEAT)
    mid.tracks.append(track)
    mid.save(str(path))


def load_song_grid(path, n_steps: int | None = SONG_STEPS, normalize_input: bool = False) -> np.ndarray:
    """Read a MIDI file as a fixed-length grid; a note-free file is an all-zero grid."""
    try:
        seq = load_midi(path)
    except EmptyFileError:
        if n_steps is None:
            raise
        return np.zeros((n_steps, N_PITCHES), dtype=np.uint8)
    if normalize_input:
        seq = normalize(seq)
    return to_piano_roll(seq, STEPS_PER_BEAT, n_steps).grid


def preprocess_file(path) -> PianoRoll:
    return to_piano_roll(normalize(load_midi(path)), STEPS_PER_BEAT)


# --------------------------------------------------------------------------
# binary tensor container: b"MSW1", u16 version, u16 ndim, u32 shape[ndim], uint8 data

_MAGIC = b"MSW1"
_VERSION = 1


def save_tensor(path, array: np.ndarray) -> None:
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    header = _MAGIC + struct.pack("<HH", _VERSION, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def load_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise ParseError(f"{path}: not an MSW1 tensor file")
    version, ndim = struct.unpack_from("<HH", data, 4)
    if version != _VERSION:
        raise ParseError(f"{path}: unsupported container version {version}")
    shape = struct.unpack_from(f"<{ndim}I", data, 8)
    offset = 8 + 4 * ndim
    count = int(np.prod(shape)) if ndim else 1
    if len(data) - offset != count:
        raise ParseError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(data, dtype=np.uint8, offset=offset).reshape(shape).copy()
