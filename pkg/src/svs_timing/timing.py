"""Vocal-timing math.

Adjusted note durations from onset deviations, Gaussian-constrained phoneme
duration allocation, score-only pseudo boundaries with consonant shifting,
and the table-based statistics that stand in for the neural duration and
time-lag regressors.

Sign convention: ``g[n] = actual onset - score onset`` in frames, so a
negative deviation means the note is sung early. Under this convention the
adjusted durations reproduce the labelled note spans exactly.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .score_model import (
    BoundaryMode,
    PhonemeBoundarySet,
    PhonemeClass,
    Score,
    TimeLagSequence,
    ValidationError,
    boundaries_from_durations,
)

DEFAULT_MAX_CONSONANT_FRAMES = 30
VARIANCE_FLOOR = 1.0


class InfeasibleError(ValueError):
    """The requested timing cannot give every note/phoneme at least one frame."""


class UnknownSymbolError(KeyError):
    pass


# --------------------------------------------------------------------------
# integer apportionment

def largest_remainder(values: Sequence[float], total: int) -> list[int]:
    """Round ``values`` to integers summing to ``total``.

    Floors everything, then hands the leftover units to the largest
    fractional parts. Ties go to the lower index.
    """
    vals = np.asarray(values, dtype=float)
    floors = np.floor(vals)
    out = floors.astype(int)
    extra = int(total - out.sum())
    if extra < 0 or extra > len(vals):
        raise ValueError(f"cannot apportion {total} over values summing to {vals.sum():.6g}")
    if extra:
        frac = vals - floors
        order = sorted(range(len(vals)), key=lambda i: (-frac[i], i))
        for i in order[:extra]:
            out[i] += 1
    return out.tolist()


# --------------------------------------------------------------------------
# adjusted note durations

def adjust_note_durations(L: Sequence[int], g: Sequence[int] | TimeLagSequence) -> list[int]:
    """Shift note durations by onset deviations.

    ``l_hat[n] = L[n] - g[n] + g[n+1]`` and the last note drops ``g[N-1]``,
    so the total length is unchanged.
    """
    L = [int(x) for x in L]
    g = [int(x) for x in g]
    if len(L) != len(g) or not L:
        raise ValidationError(f"length mismatch: {len(L)} durations vs {len(g)} lags")
    if g[0] != 0:
        raise ValidationError("g[0] must be 0")
    out = []
    for n in range(len(L)):
        nxt = g[n + 1] if n + 1 < len(L) else 0
        d = L[n] - g[n] + nxt
        if d < 1:
            raise InfeasibleError(f"note {n}: adjusted duration {d} < 1 frame")
        out.append(d)
    return out


# --------------------------------------------------------------------------
# Gaussian-constrained allocation

def constrained_durations(total: float, mu: Sequence[float], var: Sequence[float]) -> tuple[np.ndarray, float]:
    """Real-valued ``mu + rho * var`` with ``rho`` chosen so the sum is ``total``."""
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    rho = (total - mu.sum()) / var.sum()
    return mu + rho * var, rho


def allocate_real(total: int, mu: Sequence[float], var: Sequence[float]) -> np.ndarray:
    """Constrained allocation with every duration held at >= 1 frame.

    Phonemes that would drop below one frame are pinned to 1 and ``rho`` is
    recomputed over the rest until nothing else falls below.
    """
    mu = np.asarray(mu, dtype=float)
    var = np.asarray(var, dtype=float)
    K = len(mu)
    if K == 0:
        raise ValidationError("no phonemes to allocate")
    if np.any(mu <= 0) or np.any(var <= 0):
        raise ValidationError("mu and var must be positive")
    if total < K:
        raise InfeasibleError(f"{total} frames cannot hold {K} phonemes")
    pinned = np.zeros(K, dtype=bool)
    while True:
        free = ~pinned
        d = np.ones(K)
        if not free.any():
            return d
        d[free], _ = constrained_durations(total - pinned.sum(), mu[free], var[free])
        low = free & (d < 1.0)
        if not low.any():
            return d
        pinned |= low


def allocate_phoneme_durations(total: int, mu: Sequence[float], var: Sequence[float]) -> list[int]:
    """Integer phoneme durations summing exactly to ``total`` frames."""
    return largest_remainder(allocate_real(int(total), mu, var), int(total))


# --------------------------------------------------------------------------
# statistics tables

@dataclass(frozen=True)
class DurationStats:
    """Per-symbol Gaussian duration parameters in frames."""

    table: Mapping[str, tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for sym, (mu, var) in self.table.items():
            if not (mu > 0 and var > 0):
                raise ValidationError(f"{sym}: mu and var must be positive")

    def __contains__(self, sym: str) -> bool:
        return sym in self.table

    def __len__(self) -> int:
        return len(self.table)

    def lookup(self, sym: str) -> tuple[float, float]:
        try:
            return self.table[sym]
        except KeyError:
            raise UnknownSymbolError(f"no duration statistics for phoneme {sym!r}") from None

    def to_json(self) -> dict:
        return {s: {"mu": mu, "var": var} for s, (mu, var) in sorted(self.table.items())}

    @classmethod
    def from_json(cls, doc: Mapping) -> "DurationStats":
        return cls({s: (float(v["mu"]), float(v["var"])) for s, v in doc.items()})


def estimate_duration_stats(labels: Iterable[PhonemeBoundarySet]) -> DurationStats:
    """Sample mean and unbiased variance (floored at 1 frame^2) per symbol."""
    samples: dict[str, list[int]] = defaultdict(list)
    for b in labels:
        for e in b:
            samples[e.symbol].append(e.duration)
    table = {}
    for sym, ds in samples.items():
        arr = np.asarray(ds, dtype=float)
        var = arr.var(ddof=1) if len(arr) > 1 else 0.0
        table[sym] = (float(arr.mean()), max(float(var), VARIANCE_FLOOR))
    return DurationStats(table)


@dataclass(frozen=True)
class TimeLagPredictor:
    """Mean onset deviation keyed by the class of a note's first phoneme."""

    table: Mapping[PhonemeClass, float] = field(default_factory=dict)

    def predict(self, score: Score) -> TimeLagSequence:
        g = [0]
        for note in score.notes[1:]:
            g.append(int(round(self.table.get(note.phonemes[0].klass, 0.0))))
        return TimeLagSequence(g)

    def to_json(self) -> dict:
        return {k.value: v for k, v in self.table.items()}

    @classmethod
    def from_json(cls, doc: Mapping) -> "TimeLagPredictor":
        return cls({PhonemeClass(k): float(v) for k, v in doc.items()})

    @classmethod
    def fit(cls, pairs: Iterable[tuple[Score, PhonemeBoundarySet]]) -> "TimeLagPredictor":
        sums: dict[PhonemeClass, list[int]] = defaultdict(list)
        for score, labels in pairs:
            g = estimate_time_lags(labels, score)
            for note, lag in zip(score.notes[1:], g.g[1:]):
                sums[note.phonemes[0].klass].append(lag)
        return cls({k: float(np.mean(v)) for k, v in sums.items()})


def estimate_time_lags(labels: PhonemeBoundarySet, score: Score) -> TimeLagSequence:
    """Onset deviation of each note: first-phoneme label start minus score start."""
    if not labels.is_bound:
        labels = labels.bind(score)
    spans = labels.note_spans()
    if len(spans) != len(score.notes):
        raise ValidationError(f"alignment mismatch: {len(spans)} labelled notes vs {len(score.notes)}")
    starts = score.note_starts()
    return TimeLagSequence([0] + [spans[n][0] - starts[n] for n in range(1, len(starts))])


# --------------------------------------------------------------------------
# boundary sources

def model_boundaries(score: Score, stats: DurationStats, lag: TimeLagPredictor) -> PhonemeBoundarySet:
    """Boundaries from predicted onset deviations and the duration statistics."""
    params = [[stats.lookup(p.symbol) for p in note.phonemes] for note in score.notes]
    g = lag.predict(score)
    l_hat = adjust_note_durations(score.durations, g)
    durs = []
    for total, ps in zip(l_hat, params):
        mu, var = zip(*ps)
        durs.append(allocate_phoneme_durations(total, mu, var))
    return boundaries_from_durations(score, durs, BoundaryMode.MODEL_ESTIMATED)


def _pseudo_note_durations(L: int, classes: Sequence[PhonemeClass], max_consonant: int) -> list[int]:
    K = len(classes)
    if L < K:
        raise InfeasibleError(f"{L} frames cannot hold {K} phonemes")
    C = sum(c is PhonemeClass.CONSONANT for c in classes)
    if C == K:
        return largest_remainder([L / K] * K, L)
    dc = max(1, math.floor(min(max_consonant, L / K)))
    rest = L - C * dc
    shares = largest_remainder([rest / (K - C)] * (K - C), rest)
    it = iter(shares)
    return [dc if c is PhonemeClass.CONSONANT else next(it) for c in classes]


def _leading_consonants(classes: Sequence[PhonemeClass]) -> int:
    n = 0
    for c in classes:
        if c is not PhonemeClass.CONSONANT:
            break
        n += 1
    return n


def pseudo_boundaries(
    score: Score,
    max_consonant_frames: int = DEFAULT_MAX_CONSONANT_FRAMES,
    *,
    cluster_shift: bool = True,
) -> PhonemeBoundarySet:
    """Aligner-free boundaries from the score alone.

    Consonants get ``min(max_consonant_frames, L/K)`` frames, the remaining
    phonemes split the rest evenly. Then the leading consonant cluster of
    every note after the first is moved in front of the note onset, taking
    frames from the end of the previous note, so the first vowel (or other
    non-consonant) sits on the onset. Frames come from the previous note's
    last phoneme first, then earlier ones back to its first non-consonant,
    each keeping at least one frame. If that is not enough room the moved
    cluster is compressed.
    ``cluster_shift=False`` moves only the first consonant.
    """
    if max_consonant_frames < 1:
        raise ValidationError("max_consonant_frames must be >= 1")
    durs = []
    for note in score.notes:
        classes = [p.klass for p in note.phonemes]
        durs.append(_pseudo_note_durations(note.duration_frames, classes, max_consonant_frames))

    leads = [_leading_consonants([p.klass for p in note.phonemes]) for note in score.notes]
    for n in range(1, len(score.notes)):
        K = score.notes[n].n_phonemes
        first_nc = leads[n]
        if first_nc == K or first_nc == 0:
            continue
        lead = first_nc if cluster_shift else 1
        cluster = durs[n][:lead]
        cl = sum(cluster)
        prev = durs[n - 1]
        # the previous note's own shifted cluster stays put so its vowel keeps its onset
        lo = leads[n - 1] if n > 1 and leads[n - 1] < len(prev) else 0
        shift = min(cl, sum(prev[lo:]) - len(prev[lo:]))
        if shift < lead:
            continue
        if shift < cl:
            # keep every consonant >= 1 frame, spread the rest proportionally
            extra = largest_remainder([(d - 1) * (shift - lead) / (cl - lead) for d in cluster], shift - lead)
            cluster = [1 + e for e in extra]
        need = shift
        for k in range(len(prev) - 1, lo - 1, -1):
            take = min(need, prev[k] - 1)
            prev[k] -= take
            need -= take
            if need == 0:
                break
        durs[n][:lead] = cluster
        durs[n][first_nc] += cl
    return boundaries_from_durations(score, durs, BoundaryMode.PSEUDO)


def first_nonconsonant_starts(score: Score, b: PhonemeBoundarySet) -> list[Optional[int]]:
    out: list[Optional[int]] = [None] * len(score.notes)
    for e in b:
        if out[e.note_index] is None and not score.notes[e.note_index].phonemes[e.phoneme_index].is_consonant:
            out[e.note_index] = e.start
    return out
