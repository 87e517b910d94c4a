"""MIDI writing and gradient-check helpers shared by tests."""
from __future__ import annotations

from dataclasses import dataclass

import mido


def write_notes(path, notes, ticks_per_beat=480, tempo=None, fmt=0, channel=0):
    """Write ``(pitch, onset_beats, duration_beats)`` notes to a MIDI file."""
    events = []
    for pitch, onset, dur in notes:
        events.append((round(onset * ticks_per_beat), 1, pitch))
        events.append((round((onset + dur) * ticks_per_beat), 0, pitch))
    events.sort(key=lambda e: (e[0], e[1]))
    track = mido.MidiTrack()
    if tempo is not None:
        track.append(mido.MetaMessage("set_tempo", tempo=tempo, time=0))
    now = 0
    for tick, on, pitch in events:
        kind = "note_on" if on else "note_off"
        track.append(mido.Message(kind, note=pitch, velocity=80, channel=channel, time=tick - now))
        now = tick
    track.append(mido.MetaMessage("end_of_track", time=0))
    mid = mido.MidiFile(type=fmt, ticks_per_beat=ticks_per_beat)
    mid.tracks.append(track)
    mid.save(str(path))
    return path


@dataclass
class FDCheck:
    """Outcome of a central-difference gradient check.

    ``rel_errors`` holds the relative error of every sampled parameter whose
    gradient the difference can resolve; ``abs_gaps`` holds ``|analytic - numeric|``
    for the rest, and ``noise`` is the round-off level of a numeric derivative.
    """

    rel_errors: list
    abs_gaps: list
    noise: float

    @property
    def n_checked(self) -> int:
        return len(self.rel_errors)

    def ok(self, rel_tol=1e-4, min_checked=100, noise_factor=10.0) -> bool:
        return (
            self.n_checked >= min_checked
            and max(self.rel_errors) < rel_tol
            and all(g <= noise_factor * self.noise for g in self.abs_gaps)
        )


def finite_difference_check(params, loss_fn, n_samples=200, h=1e-5, seed=0, rel_tol=1e-4) -> FDCheck:
    """Compare autograd with central differences on uniformly sampled scalar parameters.

    ``loss_fn`` must be deterministic and return a float64 scalar. A difference
    ``(L(p+h) - L(p-h)) / 2h`` cannot resolve gradients much below
    ``ulp(L) / h``; parameters whose gradient is under ``noise / rel_tol`` are
    compared absolutely against that noise level instead of relatively.
    """
    import numpy as np
    import torch

    params = [p for p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    noise = float(np.spacing(abs(loss.item()))) / h
    floor = noise / rel_tol
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(sizes.sum(), size=min(n_samples, sizes.sum()), replace=False)
    bounds = np.cumsum(sizes)
    rel, gaps = [], []
    for k in flat:
        i = int(np.searchsorted(bounds, k, side="right"))
        j = int(k - (bounds[i - 1] if i else 0))
        view = params[i].data.view(-1)
        orig = view[j].item()
        view[j] = orig + h
        up = loss_fn().item()
        view[j] = orig - h
        down = loss_fn().item()
        view[j] = orig
        numeric = (up - down) / (2 * h)
        analytic = grads[i].reshape(-1)[j].item()
        if max(abs(analytic), abs(numeric)) >= floor:
            rel.append(abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        else:
            gaps.append(abs(analytic - numeric))
    return FDCheck(rel, gaps, noise)
