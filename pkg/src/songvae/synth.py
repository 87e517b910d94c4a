"""Deterministic synthetic folk-tune corpus.

Songs are built from a small library of 8-beat motifs in C major whose first
and last notes come from the tonic triad, arranged in repeating forms and
then transposed up into a random key. A fraction of songs are written at 60 bpm
with halved beat values (same wall-clock timing) and a few are too short to
form a 17-phrase song. The corpus exercises every preprocessing path and
gives the FLN dictionary well-populated classes.
"""
from __future__ import annotations

from fractions import Fraction
from pathlib import Path

import mido
import numpy as np

from .corpus import NoteEvent, estimate_major_key

SCALE = [0, 2, 4, 5, 7, 9, 11]
TICKS_PER_BEAT = 480
ANCHORS = [60, 64, 67, 72]
RARE_ANCHORS = [62, 65, 69, 71]
RHYTHMS = [
    [1, 1, 1, 1, 1, 1, 2],
    [0.5, 0.5, 1, 1, 1, 0.5, 0.5, 1, 2],
    [1.5, 0.5, 1, 1, 1.5, 0.5, 2],
    [2, 1, 1, 2, 2],
    [1, 0.5, 0.5, 1, 1, 1, 1, 2],
    [0.5, 0.5, 0.5, 0.5, 1, 1, 2, 2],
]
FORMS = [
    "AABACCBAAABADDBA",
    "ABABCCDAABABCCDA",
    "AABBCADAAABBCADA",
    "ABACABADABACABAD",
]


def _scale_pitches(lo=55, hi=84):
    return [p for p in range(lo, hi + 1) if p % 12 in SCALE]


def make_motif(rng: np.random.Generator, first: int, last: int) -> list[tuple[float, float, int | None]]:
    """Return ``(onset_beat, duration_beats, pitch)`` with ``None`` for rests."""
    rhythm = RHYTHMS[rng.integers(len(RHYTHMS))]
    pitches = _scale_pitches()
    idx, target = pitches.index(first), pitches.index(last)
    n = len(rhythm)
    notes, t, prev = [], 0.0, first
    for i, dur in enumerate(rhythm):
        if i == 0:
            p = first
        elif i == n - 1:
            p = last
        elif i <= n - 3 and rng.random() < 0.08:
            p = None
        else:
            step = int(rng.choice([-2, -1, 1, 2]))
            if i == n - 2:
                step = int(np.sign(target - idx)) or int(rng.choice([-1, 1]))
            idx = int(np.clip(idx + step, 0, len(pitches) - 1))
            if pitches[idx] in (prev, last if i == n - 2 else None):
                idx = idx + 1 if idx + 1 < len(pitches) and pitches[idx + 1] != last else idx - 1
            p = pitches[idx]
        notes.append((t, float(dur), p))
        if p is not None:
            prev = p
        t += dur
    return notes


def vary(rng: np.random.Generator, motif):
    """Nudge one interior note by a scale step, keeping first and last notes."""
    notes = list(motif)
    interior = [i for i in range(1, len(notes) - 1) if notes[i][2] is not None]
    if not interior:
        return notes
    i = int(rng.choice(interior))
    pitches = _scale_pitches()
    j = pitches.index(notes[i][2]) + int(rng.choice([-1, 1]))
    p = pitches[int(np.clip(j, 0, len(pitches) - 1))]
    neighbours = {notes[i - 1][2], notes[i + 1][2]}
    if p not in neighbours:
        notes[i] = (notes[i][0], notes[i][1], p)
    return notes


def build_library(rng: np.random.Generator, n_pairs: int = 10, motifs_per_pair: int = 8):
    pairs = [(a, b) for a in ANCHORS for b in ANCHORS]
    order = rng.permutation(len(pairs))[:n_pairs]
    library = []
    for k in order:
        first, last = pairs[k]
        for _ in range(motifs_per_pair):
            library.append(make_motif(rng, first, last))
    rare = [make_motif(rng, int(rng.choice(RARE_ANCHORS)), int(rng.choice(RARE_ANCHORS))) for _ in range(6)]
    return library, rare


def make_song(rng: np.random.Generator, library, rare, n_phrases: int):
    form = FORMS[rng.integers(len(FORMS))]
    letters = sorted(set(form))
    chosen = {c: library[int(rng.integers(len(library)))] for c in letters}
    phrases = []
    for i in range(n_phrases):
        c = form[i % len(form)]
        r = rng.random() if i < n_phrases - 1 else 1.0
        if r < 0.06:
            phrases.append([])
        elif r < 0.10:
            phrases.append(rare[int(rng.integers(len(rare)))])
        elif r < 0.50:
            phrases.append(vary(rng, chosen[c]))
        else:
            phrases.append(chosen[c])
    return phrases


def write_song(path, phrases, transpose: int, slow: bool) -> None:
    scale = 0.5 if slow else 1.0
    tempo = 1_000_000 if slow else 500_000
    events = []
    for k, motif in enumerate(phrases):
        for onset, dur, pitch in motif:
            if pitch is None:
                continue
            on = round((8 * k + onset) * scale * TICKS_PER_BEAT)
            off = round((8 * k + onset + dur) * scale * TICKS_PER_BEAT)
            events.append((off, 0, pitch + transpose))
            events.append((on, 1, pitch + transpose))
    events.sort()
    meta = mido.MidiTrack()
    meta.append(mido.MetaMessage("set_tempo", tempo=tempo, time=0))
    meta.append(mido.MetaMessage("end_of_track", time=0))
    track = mido.MidiTrack()
    now = 0
    for tick, kind, pitch in events:
        track.append(mido.Message("note_on", note=pitch, velocity=90 if kind else 0, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid = mido.MidiFile(type=1, ticks_per_beat=TICKS_PER_BEAT)
    mid.tracks.extend([meta, track])
    mid.save(str(path))


def _reads_as_c_major(phrases) -> bool:
    events = [
        NoteEvent(p, Fraction(onset).limit_denominator(8), Fraction(dur).limit_denominator(8))
        for motif in phrases
        for onset, dur, p in motif
        if p is not None
    ]
    return bool(events) and estimate_major_key(events) == 0


def write_corpus(out_dir, n_songs: int = 50, seed: int = 0, n_short: int = 2) -> list[Path]:
    """Write ``n_songs`` full-length songs plus ``n_short`` short ones."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    library, rare = build_library(rng)
    paths = []
    for i in range(n_songs + n_short):
        n_phrases = int(rng.integers(17, 21)) if i < n_songs else int(rng.integers(6, 13))
        phrases = make_song(rng, library, rare, n_phrases)
        while not _reads_as_c_major(phrases):
            phrases = make_song(rng, library, rare, n_phrases)
        # upward only, so normalizing (always a downward shift) restores the original octave
        transpose = int(rng.integers(0, 12))
        slow = bool(rng.random() < 0.2)
        path = out / f"tune_{i:03d}.mid"
        write_song(path, phrases, transpose, slow)
        paths.append(path)
    return paths
