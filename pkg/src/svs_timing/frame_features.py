"""Phoneme-level score information upsampled to frame-level matrices.

Every matrix carries a :class:`Layout` naming its column groups, so the
consumer can read a group back by name instead of by magic offsets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.ndimage import median_filter

from .score_model import PhonemeBoundarySet, PhonemeClass, Score, ValidationError

REST_PITCH = 0.0
PITCH_CENTER = 60.0
PITCH_SCALE = 12.0
CLASSES = (PhonemeClass.VOWEL, PhonemeClass.CONSONANT, PhonemeClass.SILENCE)
BOUNDARY_SYMBOL = "<none>"


@dataclass(frozen=True)
class Group:
    name: str
    offset: int
    width: int
    one_hot: bool = False

    @property
    def cols(self) -> slice:
        return slice(self.offset, self.offset + self.width)


@dataclass
class Layout:
    groups: list[Group] = field(default_factory=list)

    @property
    def width(self) -> int:
        return sum(g.width for g in self.groups)

    def add(self, name: str, width: int, one_hot: bool = False) -> Group:
        g = Group(name, self.width, width, one_hot)
        self.groups.append(g)
        return g

    def __getitem__(self, name: str) -> Group:
        for g in self.groups:
            if g.name == name:
                return g
        raise KeyError(name)

    def to_json(self) -> str:
        doc = [{"name": g.name, "offset": g.offset, "width": g.width, "one_hot": g.one_hot} for g in self.groups]
        return json.dumps({"groups": doc}, indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Layout":
        doc = json.loads(text)
        return cls([Group(g["name"], g["offset"], g["width"], g.get("one_hot", False)) for g in doc["groups"]])


@dataclass
class FrameFeatureMatrix:
    data: np.ndarray
    layout: Layout

    def __post_init__(self) -> None:
        if self.data.ndim != 2 or self.data.shape[1] != self.layout.width:
            raise ValidationError(f"data shape {self.data.shape} does not match layout width {self.layout.width}")

    @property
    def T(self) -> int:
        return self.data.shape[0]

    def group(self, name: str) -> np.ndarray:
        return self.data[:, self.layout[name].cols]


def symbol_inventory(scores: Sequence[Score]) -> list[str]:
    """Sorted phoneme symbols appearing in ``scores``."""
    return sorted({p.symbol for s in scores for n in s.notes for p in n.phonemes})


def _norm_pitch(pitch: Optional[int]) -> float:
    return 0.0 if pitch is None else (pitch - PITCH_CENTER) / PITCH_SCALE


def _positions(durations: Sequence[int]) -> np.ndarray:
    """Per-frame [fwd_abs, bwd_abs, fwd_norm, bwd_norm] inside each segment."""
    cols = []
    for d in durations:
        i = np.arange(d, dtype=float)
        cols.append(np.stack([i, d - 1 - i, i / d, (d - 1 - i) / d], axis=1))
    return np.concatenate(cols) if cols else np.zeros((0, 4))


def build_encoder_frames(
    score: Score,
    b: PhonemeBoundarySet,
    symbols: Optional[Sequence[str]] = None,
) -> FrameFeatureMatrix:
    """Frame-level score features along the phoneme boundaries ``b``.

    Groups: current/previous/next phoneme symbol (one-hot, with a
    ``<none>`` slot for song edges), current phoneme class, note pitch and
    rest flag, log note duration, position inside the phoneme (absolute and
    normalized, both directions) and log phoneme duration.
    """
    if not b.is_bound:
        b = b.bind(score)
    phones = score.phoneme_list()
    if len(b) != len(phones):
        raise ValidationError(f"boundary/score mismatch: {len(b)} segments vs {len(phones)} phonemes")
    symbols = list(symbols) if symbols is not None else symbol_inventory([score])
    vocab = {s: i for i, s in enumerate(symbols + [BOUNDARY_SYMBOL])}
    V = len(vocab)
    for e in b:
        if e.symbol not in vocab:
            raise ValidationError(f"phoneme {e.symbol!r} missing from the symbol inventory")

    layout = Layout()
    g_cur = layout.add("phoneme", V, one_hot=True)
    g_prev = layout.add("prev_phoneme", V, one_hot=True)
    g_next = layout.add("next_phoneme", V, one_hot=True)
    g_cls = layout.add("phoneme_class", len(CLASSES), one_hot=True)
    g_pitch = layout.add("note_pitch", 1)
    g_rest = layout.add("is_rest", 1)
    g_ndur = layout.add("log_note_frames", 1)
    g_pos = layout.add("phoneme_position", 4)
    g_pdur = layout.add("log_phoneme_frames", 1)

    T = b.total_frames
    X = np.zeros((T, layout.width))
    entries = b.entries
    for i, e in enumerate(entries):
        rows = slice(e.start, e.end)
        note = score.notes[e.note_index]
        prev_sym = entries[i - 1].symbol if i > 0 else BOUNDARY_SYMBOL
        next_sym = entries[i + 1].symbol if i + 1 < len(entries) else BOUNDARY_SYMBOL
        X[rows, g_cur.offset + vocab[e.symbol]] = 1.0
        X[rows, g_prev.offset + vocab[prev_sym]] = 1.0
        X[rows, g_next.offset + vocab[next_sym]] = 1.0
        klass = note.phonemes[e.phoneme_index].klass
        X[rows, g_cls.offset + CLASSES.index(klass)] = 1.0
        X[rows, g_pitch.offset] = _norm_pitch(note.pitch)
        X[rows, g_rest.offset] = float(note.is_rest)
        X[rows, g_ndur.offset] = np.log(note.duration_frames)
        X[rows, g_pdur.offset] = np.log(e.duration)
    X[:, g_pos.cols] = _positions(b.durations)
    return FrameFeatureMatrix(X, layout)


def build_note_frames(score: Score) -> FrameFeatureMatrix:
    """Frame-level note features on the score's own timing (not the boundaries)."""
    layout = Layout()
    g_pitch = layout.add("note_pitch", 1)
    g_rest = layout.add("is_rest", 1)
    g_dur = layout.add("log_note_frames", 1)
    g_tempo = layout.add("tempo", 1)
    g_prev = layout.add("prev_pitch_delta", 1)
    g_next = layout.add("next_pitch_delta", 1)
    g_pos = layout.add("note_position", 4)

    notes = score.notes
    X = np.zeros((score.total_frames, layout.width))
    for n, (start, note) in enumerate(zip(score.note_starts(), notes)):
        rows = slice(start, start + note.duration_frames)
        p = _norm_pitch(note.pitch)
        prev_p = _norm_pitch(notes[n - 1].pitch) if n > 0 else p
        next_p = _norm_pitch(notes[n + 1].pitch) if n + 1 < len(notes) else p
        X[rows, g_pitch.offset] = p
        X[rows, g_rest.offset] = float(note.is_rest)
        X[rows, g_dur.offset] = np.log(note.duration_frames)
        X[rows, g_tempo.offset] = float(note.tempo_bpm) / 120.0
        X[rows, g_prev.offset] = p - prev_p
        X[rows, g_next.offset] = next_p - p
    X[:, g_pos.cols] = _positions(score.durations)
    return FrameFeatureMatrix(X, layout)


def build_note_pitch(score: Score, b: PhonemeBoundarySet) -> np.ndarray:
    """MIDI pitch of the note owning each frame under ``b``; rests are 0."""
    if not b.is_bound:
        b = b.bind(score)
    p = np.empty(b.total_frames)
    for e in b:
        pitch = score.notes[e.note_index].pitch
        p[e.start:e.end] = REST_PITCH if pitch is None else float(pitch)
    return p


def vibrato_component(log_f0: np.ndarray, voiced: Optional[np.ndarray] = None, window_frames: int = 31) -> np.ndarray:
    """Log F0 minus its running median; zero on unvoiced frames.

    Near the edges the median window shrinks to what is available.
    """
    if window_frames < 3 or window_frames % 2 == 0:
        raise ValidationError("window_frames must be odd and >= 3")
    x = np.asarray(log_f0, dtype=float)
    if voiced is None:
        voiced = np.ones(len(x), dtype=bool)
    voiced = np.asarray(voiced, dtype=bool)
    return np.where(voiced, x - running_median(x, window_frames), 0.0)


def running_median(x: np.ndarray, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    T, h = len(x), window // 2
    out = median_filter(x, size=window, mode="nearest")
    # scipy pads at the edges; recompute those frames over the truncated window
    for t in list(range(min(h, T))) + list(range(max(h, T - h), T)):
        out[t] = np.median(x[max(0, t - h):t + h + 1])
    return out
