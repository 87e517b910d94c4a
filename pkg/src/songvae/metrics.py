"""Objective evaluation of piano-roll songs.

All metrics take a sequence of (T, 128) binary grids. Songs are cut into
``bar_steps``-long bars; a trailing partial bar is ignored.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import BAR_STEPS, roll_to_notes
from .errors import NoInputError
from .fln import FLNClassDictionary, extract_fln

C_MAJOR_PCS = frozenset({0, 2, 4, 5, 7, 9, 11})
DEFAULT_QN_MIN_STEPS = 2


def _grids(songs) -> list[np.ndarray]:
    grids = [np.asarray(getattr(s, "grid", s)) for s in songs]
    if not grids:
        raise NoInputError("no songs to evaluate")
    return grids


def _bars(grid: np.ndarray, bar_steps: int) -> np.ndarray:
    n = grid.shape[0] // bar_steps
    return grid[: n * bar_steps].reshape(n, bar_steps, grid.shape[1])


def _pct(num: float, den: float) -> float:
    return 100.0 * num / den if den else 0.0


# per-song counts; every metric is a ratio of summed counts so set unions combine by weight


def empty_bar_counts(grid, bar_steps=BAR_STEPS) -> tuple[int, int]:
    bars = _bars(grid, bar_steps)
    return int((~bars.any(axis=(1, 2))).sum()), bars.shape[0]


def pitch_class_counts(grid, bar_steps=BAR_STEPS, include_empty=True) -> tuple[int, int]:
    bars = _bars(grid, bar_steps)
    used = bars.any(axis=1)  # (n_bars, 128)
    pcs = np.zeros((bars.shape[0], 12), dtype=bool)
    for pc in range(12):
        pcs[:, pc] = used[:, pc::12].any(axis=1)
    per_bar = pcs.sum(axis=1)
    if not include_empty:
        per_bar = per_bar[used.any(axis=1)]
    return int(per_bar.sum()), int(per_bar.size)


def qualified_note_counts(grid, min_steps=DEFAULT_QN_MIN_STEPS) -> tuple[int, int]:
    notes = roll_to_notes(grid)
    return sum(1 for _, n, _ in notes if n >= min_steps), len(notes)


def irregular_tone_counts(grid, scale=C_MAJOR_PCS) -> tuple[int, int]:
    notes = roll_to_notes(grid)
    return sum(1 for _, _, p in notes if p % 12 not in scale), len(notes)


def empty_bars(songs, bar_steps: int = BAR_STEPS) -> float:
    counts = [empty_bar_counts(g, bar_steps) for g in _grids(songs)]
    return _pct(sum(c[0] for c in counts), sum(c[1] for c in counts))


def used_pitch_classes(songs, bar_steps: int = BAR_STEPS, include_empty: bool = True) -> float:
    counts = [pitch_class_counts(g, bar_steps, include_empty) for g in _grids(songs)]
    den = sum(c[1] for c in counts)
    return sum(c[0] for c in counts) / den if den else 0.0


def qualified_notes(songs, min_steps: int = DEFAULT_QN_MIN_STEPS) -> float:
    counts = [qualified_note_counts(g, min_steps) for g in _grids(songs)]
    return _pct(sum(c[0] for c in counts), sum(c[1] for c in counts))


def irregular_tone(songs, scale=C_MAJOR_PCS) -> float:
    counts = [irregular_tone_counts(g, scale) for g in _grids(songs)]
    return _pct(sum(c[0] for c in counts), sum(c[1] for c in counts))


def fln_accuracy(phrases, labels: Sequence[int], dictionary: FLNClassDictionary) -> float:
    """Percent of phrases whose FLN pair matches their conditioning label.

    Reserved labels (empty and other) are left out of the denominator.
    """
    if len(phrases) != len(labels):
        raise ValueError("phrases and labels differ in length")
    hits = total = 0
    for phrase, lab in zip(phrases, labels):
        target = dictionary.pair_for(int(lab))
        if target is None:
            continue
        total += 1
        hits += extract_fln(phrase) == target
    if total == 0:
        raise NoInputError("no phrases with a concrete FLN label")
    return 100.0 * hits / total


@dataclass
class MetricsReport:
    eb_percent: float
    upc: float
    qn_percent: float
    it_percent: float
    fln_accuracy_percent: float | None = None
    per_song: list[dict] = field(default_factory=list)
    bar_steps: int = BAR_STEPS
    qn_min_steps: int = DEFAULT_QN_MIN_STEPS
    scale: str = "C major"
    upc_include_empty: bool = True

    def as_dict(self) -> dict:
        return {
            "eb_percent": self.eb_percent,
            "upc": self.upc,
            "qn_percent": self.qn_percent,
            "it_percent": self.it_percent,
            "fln_accuracy_percent": self.fln_accuracy_percent,
            "n_songs": len(self.per_song),
            "bar_steps": self.bar_steps,
            "qn_min_steps": self.qn_min_steps,
            "scale": self.scale,
            "upc_include_empty": self.upc_include_empty,
        }

    def to_kv(self) -> str:
        lines = []
        for k, v in self.as_dict().items():
            lines.append(f"{k}={_fmt(v)}")
        for i, row in enumerate(self.per_song):
            for k, v in row.items():
                lines.append(f"song.{i}.{k}={_fmt(v)}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def format_table(rows: dict[str, MetricsReport]) -> str:
    head = f"{'':<12}| {'EB (%)':>8} | {'UPC':>6} | {'QN (%)':>7} | {'IT (%)':>7} | {'FLN (%)':>8}"
    out = [head, "-" * len(head)]
    for name, r in rows.items():
        fln = "-" if r.fln_accuracy_percent is None else f"{r.fln_accuracy_percent:.2f}"
        out.append(
            f"{name:<12}| {r.eb_percent:>8.2f} | {r.upc:>6.2f} | {r.qn_percent:>7.1f} | {r.it_percent:>7.2f} | {fln:>8}"
        )
    return "\n".join(out) + "\n"


def evaluate(
    songs,
    bar_steps: int = BAR_STEPS,
    qn_min_steps: int = DEFAULT_QN_MIN_STEPS,
    upc_include_empty: bool = True,
    fln_phrases=None,
    fln_labels=None,
    dictionary: FLNClassDictionary | None = None,
) -> MetricsReport:
    grids = _grids(songs)
    per_song = []
    for g in grids:
        eb = empty_bar_counts(g, bar_steps)
        upc = pitch_class_counts(g, bar_steps, upc_include_empty)
        qn = qualified_note_counts(g, qn_min_steps)
        it = irregular_tone_counts(g)
        per_song.append(
            {
                "eb_percent": _pct(*eb),
                "upc": upc[0] / upc[1] if upc[1] else 0.0,
                "qn_percent": _pct(*qn),
                "it_percent": _pct(*it),
                "n_notes": qn[1],
            }
        )
    fln = None
    if fln_phrases is not None and dictionary is not None:
        fln = fln_accuracy(fln_phrases, fln_labels, dictionary)
    return MetricsReport(
        eb_percent=empty_bars(grids, bar_steps),
        upc=used_pitch_classes(grids, bar_steps, upc_include_empty),
        qn_percent=qualified_notes(grids, qn_min_steps),
        it_percent=irregular_tone(grids),
        fln_accuracy_percent=fln,
        per_song=per_song,
        bar_steps=bar_steps,
        qn_min_steps=qn_min_steps,
        upc_include_empty=upc_include_empty,
    )


@dataclass
class LatentDiffReport:
    diffs: np.ndarray  # (latent_dim,) absolute differences

    @property
    def max(self) -> float:
        return float(self.diffs.max())

    @property
    def mean(self) -> float:
        return float(self.diffs.mean())

    def summary(self) -> str:
        return f"max={self.max:.6g} mean={self.mean:.6g} dims={self.diffs.size}"


def latent_diff(a: np.ndarray, b: np.ndarray, lcvae, dictionary: FLNClassDictionary) -> LatentDiffReport:
    """Per-dimension gap between two phrases' class-mean-subtracted latents."""
    za = lcvae.residual_latent(a, dictionary.label(a))
    zb = lcvae.residual_latent(b, dictionary.label(b))
    return LatentDiffReport(np.abs(za - zb))
