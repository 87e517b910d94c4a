"""Prepared corpus directory written by ``preprocess`` and read by everything else.

Files:
    phrases.msw        (N, 50, 128) uint8 phrase store
    phrase_labels.txt  one FLN label per phrase
    songs.msw          (S, 17, 50, 128) uint8 song store
    song_labels.txt    17 labels per line, one line per song
    song_sources.txt   source file of each song, relative to the input directory
    fln_dictionary.tsv the FLN class dictionary
    manifest.tsv       counts and rejected files
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (
    N_PITCHES,
    PHRASE_STEPS,
    SONG_PHRASES,
    SongTensor,
    build_song_tensor,
    load_tensor,
    preprocess_file,
    save_tensor,
    split_phrases,
)
from .errors import NoInputError, SongVAEError
from .fln import DEFAULT_MIN_COUNT, FLNClassDictionary, build_dictionary, format_label_sequences, parse_label_sequences

log = logging.getLogger(__name__)

PHRASES = "phrases.msw"
PHRASE_LABELS = "phrase_labels.txt"
SONGS = "songs.msw"
SONG_LABELS = "song_labels.txt"
SONG_SOURCES = "song_sources.txt"
DICTIONARY = "fln_dictionary.tsv"
MANIFEST = "manifest.tsv"
MIDI_SUFFIXES = (".mid", ".midi")


@dataclass
class PreparedCorpus:
    phrases: np.ndarray
    phrase_labels: np.ndarray
    songs: np.ndarray
    song_labels: np.ndarray
    dictionary: FLNClassDictionary
    song_sources: list[str] = field(default_factory=list)

    def song_tensors(self) -> list[SongTensor]:
        return [SongTensor(s, tuple(int(x) for x in lab)) for s, lab in zip(self.songs, self.song_labels)]


@dataclass
class PreprocessResult:
    corpus: PreparedCorpus
    n_files: int
    rejects: list[tuple[str, str]]
    too_short: list[str]


def midi_files(midi_dir) -> list[Path]:
    root = Path(midi_dir)
    if not root.is_dir():
        raise NoInputError(f"{root} is not a directory")
    return sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in MIDI_SUFFIXES)


def preprocess_directory(midi_dir, min_count: int = DEFAULT_MIN_COUNT) -> PreprocessResult:
    """Parse, normalize and slice every MIDI file; bad files are listed, not fatal."""
    root = Path(midi_dir)
    files = midi_files(root)
    if not files:
        raise NoInputError(f"no MIDI files under {root}")
    per_song: list[tuple[str, list[np.ndarray]]] = []
    rejects = []
    for path in files:
        rel = path.relative_to(root).as_posix()
        try:
            per_song.append((rel, split_phrases(preprocess_file(path))))
        except (SongVAEError, OSError) as exc:
            log.warning("skipping %s: %s", rel, exc)
            rejects.append((rel, f"{type(exc).__name__}: {exc}"))
    phrases = [p for _, ps in per_song for p in ps]
    if not phrases:
        raise NoInputError("no usable phrases in any input file")
    dictionary = build_dictionary(phrases, min_count)

    songs, song_labels, sources, too_short = [], [], [], []
    for rel, ps in per_song:
        if len(ps) < SONG_PHRASES:
            too_short.append(rel)
            continue
        song = build_song_tensor(ps, dictionary)
        songs.append(song.phrases)
        song_labels.append(song.labels)
        sources.append(rel)
    corpus = PreparedCorpus(
        phrases=np.stack(phrases).astype(np.uint8),
        phrase_labels=np.array([dictionary.label(p) for p in phrases], dtype=np.int64),
        songs=(np.stack(songs) if songs else np.zeros((0, SONG_PHRASES, PHRASE_STEPS, N_PITCHES))).astype(np.uint8),
        song_labels=np.array(song_labels, dtype=np.int64).reshape(-1, SONG_PHRASES),
        dictionary=dictionary,
        song_sources=sources,
    )
    return PreprocessResult(corpus, len(files), rejects, too_short)


def manifest_text(result: PreprocessResult) -> str:
    c = result.corpus
    rows = [
        ("files", result.n_files),
        ("rejected", len(result.rejects)),
        ("phrases", len(c.phrases)),
        ("songs", len(c.songs)),
        ("too_short", len(result.too_short)),
        ("K", c.dictionary.K),
        ("min_count", c.dictionary.min_count),
        ("dictionary_digest", c.dictionary.digest()),
    ]
    lines = [f"{k}\t{v}" for k, v in rows]
    lines += [f"reject\t{name}\t{msg}" for name, msg in result.rejects]
    lines += [f"too_short\t{name}" for name in result.too_short]
    return "\n".join(lines) + "\n"


def write_prepared(result: PreprocessResult, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    c = result.corpus
    save_tensor(out / PHRASES, c.phrases)
    (out / PHRASE_LABELS).write_text("".join(f"{int(x)}\n" for x in c.phrase_labels))
    save_tensor(out / SONGS, c.songs)
    (out / SONG_LABELS).write_text(format_label_sequences(c.song_labels))
    (out / SONG_SOURCES).write_text("".join(f"{s}\n" for s in c.song_sources))
    c.dictionary.save(out / DICTIONARY)
    (out / MANIFEST).write_text(manifest_text(result))
    return out


def load_prepared(data_dir) -> PreparedCorpus:
    d = Path(data_dir)
    missing = [n for n in (PHRASES, PHRASE_LABELS, SONGS, SONG_LABELS, DICTIONARY) if not (d / n).exists()]
    if missing:
        raise NoInputError(f"{d} is not a prepared corpus (missing {', '.join(missing)})")
    dictionary = FLNClassDictionary.load(d / DICTIONARY)
    phrases = load_tensor(d / PHRASES)
    labels = np.array([int(x) for x in (d / PHRASE_LABELS).read_text().split()], dtype=np.int64)
    songs = load_tensor(d / SONGS)
    song_labels = np.array(
        parse_label_sequences((d / SONG_LABELS).read_text(), dictionary.n_classes), dtype=np.int64
    ).reshape(-1, SONG_PHRASES)
    sources_path = d / SONG_SOURCES
    sources = sources_path.read_text().splitlines() if sources_path.exists() else []
    if len(labels) != len(phrases) or len(song_labels) != len(songs):
        raise NoInputError(f"{d}: label files do not match the stores")
    return PreparedCorpus(phrases, labels, songs, song_labels, dictionary, sources)
