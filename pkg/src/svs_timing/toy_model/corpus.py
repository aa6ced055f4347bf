"""Synthetic singing corpus with known vocal-timing deviations.

Each item is a short phrase framed by rests. Consonant-initial notes are
sung early: the vowel lands up to ``max_vowel_lead`` frames before the note
onset and the consonant sits in front of it. The reference "acoustic"
frames are a smooth deterministic function of phoneme identity, note pitch
and position inside the phoneme, so the true boundaries are recoverable
from the features alone.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..frame_features import PITCH_CENTER, PITCH_SCALE
from ..score_model import (
    BoundaryEntry,
    BoundaryMode,
    FrameGrid,
    Note,
    Phoneme,
    PhonemeBoundarySet,
    PhonemeClass,
    Score,
    ValidationError,
    frames_from_note_value,
)
from ..timing import (
    DEFAULT_MAX_CONSONANT_FRAMES,
    DurationStats,
    TimeLagPredictor,
    estimate_duration_stats,
    model_boundaries,
    pseudo_boundaries,
)

VOWELS = ("a", "i", "u", "e", "o")
CONSONANTS = ("k", "s", "t", "n", "m", "r")
SILENCE = "pau"
D_AC = 8
MIN_VOWEL_FRAMES = 6
_EMBED_SEED = 1234


@dataclass(frozen=True)
class CorpusSpec:
    notes: tuple[int, int] = (2, 4)
    beats: tuple[float, ...] = (0.5, 0.75, 1.0)
    rest_beats: tuple[float, ...] = (0.625,)
    tempo: tuple[int, int] = (220, 280)
    pitch: tuple[int, int] = (57, 72)
    p_consonant: float = 0.7
    max_vowel_lead: int = 12
    consonant_frames: tuple[int, int] = (6, 12)
    vowel_jitter: int = 2

    def validate(self) -> None:
        lo, hi = self.notes
        if lo < 1 or hi < lo:
            raise ValidationError("notes range must satisfy 1 <= lo <= hi")
        if self.tempo[0] <= 0 or self.tempo[1] < self.tempo[0]:
            raise ValidationError("bad tempo range")
        if self.pitch[1] < self.pitch[0]:
            raise ValidationError("bad pitch range")
        if not self.beats or min(self.beats) <= 0 or not self.rest_beats or min(self.rest_beats) <= 0:
            raise ValidationError("beat values must be positive")
        if not 0.0 <= self.p_consonant <= 1.0:
            raise ValidationError("p_consonant must be a probability")
        c0, c1 = self.consonant_frames
        if c0 < 1 or c1 < c0 or self.max_vowel_lead < 0 or self.vowel_jitter < 0:
            raise ValidationError("bad timing ranges")


@dataclass
class CorpusItem:
    score: Score
    acoustic: np.ndarray
    truth: PhonemeBoundarySet


@dataclass
class SyntheticCorpus:
    items: list[CorpusItem]
    seed: int
    spec: CorpusSpec = field(default_factory=CorpusSpec)

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @property
    def symbols(self) -> list[str]:
        return sorted(VOWELS + CONSONANTS + (SILENCE,))

    def duration_stats(self) -> DurationStats:
        return estimate_duration_stats(it.truth for it in self.items)

    def lag_predictor(self) -> TimeLagPredictor:
        return TimeLagPredictor.fit((it.score, it.truth) for it in self.items)

    def boundaries(self, mode: BoundaryMode, max_consonant_frames: int = DEFAULT_MAX_CONSONANT_FRAMES) -> list[PhonemeBoundarySet]:
        """Input-side boundaries for every item under a boundary-source mode."""
        if mode is BoundaryMode.FORCED_ALIGN:
            return [it.truth for it in self.items]
        if mode is BoundaryMode.PSEUDO:
            return [pseudo_boundaries(it.score, max_consonant_frames) for it in self.items]
        stats, lag = self.duration_stats(), self.lag_predictor()
        return [model_boundaries(it.score, stats, lag) for it in self.items]


def _embeddings() -> dict[str, np.ndarray]:
    rng = np.random.default_rng(_EMBED_SEED)
    syms = sorted(VOWELS + CONSONANTS + (SILENCE,))
    emb = {s: rng.normal(0.0, 0.8, D_AC - 1) for s in syms}
    emb[SILENCE] = np.zeros(D_AC - 1)
    return emb


def _random_score(rng: np.random.Generator, spec: CorpusSpec, grid: FrameGrid) -> Score:
    tempo = int(rng.integers(spec.tempo[0], spec.tempo[1] + 1))
    rest = Phoneme(SILENCE, PhonemeClass.SILENCE)

    def rest_note() -> Note:
        beats = spec.rest_beats[int(rng.integers(len(spec.rest_beats)))]
        return Note(None, frames_from_note_value(beats, tempo, grid), tempo, [rest])

    notes = [rest_note()]
    for _ in range(int(rng.integers(spec.notes[0], spec.notes[1] + 1))):
        phs = []
        if rng.random() < spec.p_consonant:
            phs.append(Phoneme(CONSONANTS[int(rng.integers(len(CONSONANTS)))], PhonemeClass.CONSONANT))
        phs.append(Phoneme(VOWELS[int(rng.integers(len(VOWELS)))], PhonemeClass.VOWEL))
        beats = spec.beats[int(rng.integers(len(spec.beats)))]
        pitch = int(rng.integers(spec.pitch[0], spec.pitch[1] + 1))
        notes.append(Note(pitch, frames_from_note_value(beats, tempo, grid), tempo, phs))
    notes.append(rest_note())
    return Score(notes, grid, {"generator": "synthetic"})


def _true_boundaries(rng: np.random.Generator, score: Score, spec: CorpusSpec) -> Optional[PhonemeBoundarySet]:
    """Sung boundaries: each note's first vowel placed relative to its score onset.

    Returns None when the drawn deviations squeeze a vowel below
    ``MIN_VOWEL_FRAMES``; the caller redraws.
    """
    starts = score.note_starts()
    vowel_on, cons_len = [], []
    for n, note in enumerate(score.notes):
        lead_c = note.phonemes[0].is_consonant
        if n == 0:
            vowel_on.append(0)
            cons_len.append(0)
            continue
        if lead_c:
            lead = int(rng.integers(0, spec.max_vowel_lead + 1))
            c = int(rng.integers(spec.consonant_frames[0], spec.consonant_frames[1] + 1))
        else:
            lead = int(rng.integers(-spec.vowel_jitter, spec.vowel_jitter + 1))
            c = 0
        vowel_on.append(starts[n] - lead)
        cons_len.append(c)
    entries = []
    T = score.total_frames
    for n, note in enumerate(score.notes):
        on = vowel_on[n] - cons_len[n]
        end = vowel_on[n + 1] - cons_len[n + 1] if n + 1 < len(score.notes) else T
        if end - on < len(note.phonemes) + MIN_VOWEL_FRAMES:
            return None
        if note.phonemes[0].is_consonant:
            entries.append(BoundaryEntry(on, vowel_on[n], note.phonemes[0].symbol, n, 0))
            entries.append(BoundaryEntry(vowel_on[n], end, note.phonemes[1].symbol, n, 1))
        else:
            entries.append(BoundaryEntry(on, end, note.phonemes[0].symbol, n, 0))
    return PhonemeBoundarySet(entries, BoundaryMode.FORCED_ALIGN)


def render_acoustic(score: Score, truth: PhonemeBoundarySet) -> np.ndarray:
    """Deterministic reference features for sung timing ``truth``.

    Channel 0 is the normalized log-F0 stand-in (note pitch, 0 in rests);
    the remaining channels are a per-phoneme spectral pattern shaped by the
    position inside the phoneme and tilted by pitch.
    """
    emb = _embeddings()
    T = truth.total_frames
    Y = np.zeros((T, D_AC))
    for e in truth:
        note = score.notes[e.note_index]
        p = 0.0 if note.pitch is None else (note.pitch - PITCH_CENTER) / PITCH_SCALE
        d = e.duration
        pos = (np.arange(d) + 0.5) / d
        klass = note.phonemes[e.phoneme_index].klass
        if klass is PhonemeClass.CONSONANT:
            env = 1.0 - 0.5 * pos
        elif klass is PhonemeClass.VOWEL:
            env = 0.7 + 0.3 * np.sin(np.pi * pos)
        else:
            env = np.zeros(d)
        Y[e.start:e.end, 0] = p
        Y[e.start:e.end, 1:] = env[:, None] * emb[e.symbol][None, :]
        if klass is PhonemeClass.VOWEL:
            Y[e.start:e.end, D_AC - 1] += 0.3 * p
    # soften the transitions over a few frames
    kernel = np.array([0.25, 0.5, 0.25])
    padded = np.pad(Y, ((1, 1), (0, 0)), mode="edge")
    return kernel[0] * padded[:-2] + kernel[1] * padded[1:-1] + kernel[2] * padded[2:]


def gen_synthetic_corpus(n_items: int, seed: int, spec: Optional[CorpusSpec] = None,
                         grid: FrameGrid = FrameGrid()) -> SyntheticCorpus:
    if n_items < 1:
        raise ValidationError("n_items must be >= 1")
    spec = spec or CorpusSpec()
    spec.validate()
    rng = np.random.default_rng(seed)
    items = []
    while len(items) < n_items:
        score = _random_score(rng, spec, grid)
        truth = _true_boundaries(rng, score, spec)
        if truth is None:
            continue
        items.append(CorpusItem(score, render_acoustic(score, truth), truth))
    return SyntheticCorpus(items, seed, spec)


def perturb_boundaries(b: PhonemeBoundarySet, shift: int) -> PhonemeBoundarySet:
    """Move every interior boundary by ``shift`` frames, keeping each phoneme >= 1 frame."""
    starts = [e.start for e in b]
    T = b.total_frames
    P = len(starts)
    new = [0]
    for k in range(1, P):
        s = starts[k] + shift
        s = max(s, new[-1] + 1)
        s = min(s, T - (P - k))
        new.append(s)
    ends = new[1:] + [T]
    entries = [BoundaryEntry(s, t, e.symbol, e.note_index, e.phoneme_index) for s, t, e in zip(new, ends, b)]
    return PhonemeBoundarySet(entries, b.mode)


def true_lags(item: CorpusItem) -> list[int]:
    starts = item.score.note_starts()
    spans = item.truth.note_spans()
    return [0] + [spans[n][0] - starts[n] for n in range(1, len(starts))]


__all__ = [
    "CorpusItem",
    "CorpusSpec",
    "SyntheticCorpus",
    "gen_synthetic_corpus",
    "perturb_boundaries",
    "render_acoustic",
    "true_lags",
]
