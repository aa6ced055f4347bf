"""Core value types: frame grid, phonemes, notes, scores and boundary sets.

All durations are integer frames. Note and phoneme indices are 0-based.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Mapping, Optional, Sequence, Tuple, Union

Number = Union[int, float, Fraction]

REST = "rest"


class ValidationError(ValueError):
    """Raised when a value violates a domain invariant."""


class PhonemeClass(enum.Enum):
    VOWEL = "V"
    CONSONANT = "C"
    SILENCE = "SIL"


class BoundaryMode(enum.Enum):
    FORCED_ALIGN = "fal"
    MODEL_ESTIMATED = "model"
    PSEUDO = "pseudo"


def _as_fraction(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, bool):
        raise ValidationError(f"expected a number, got {x!r}")
    if isinstance(x, int):
        return Fraction(x)
    if isinstance(x, float):
        # go through the shortest repr so 0.1 means one tenth, not its binary neighbour
        return Fraction(repr(x))
    raise ValidationError(f"expected a number, got {x!r}")


def round_half_away(x: Fraction) -> int:
    if x >= 0:
        return int((x + Fraction(1, 2)).__floor__())
    return -int((-x + Fraction(1, 2)).__floor__())


@dataclass(frozen=True)
class FrameGrid:
    frame_shift_ms: Fraction = Fraction(5)

    def __post_init__(self) -> None:
        object.__setattr__(self, "frame_shift_ms", _as_fraction(self.frame_shift_ms))
        if self.frame_shift_ms <= 0:
            raise ValidationError("frame_shift_ms must be positive")

    @property
    def frame_shift_100ns(self) -> Fraction:
        return self.frame_shift_ms * 10_000


@dataclass(frozen=True)
class Phoneme:
    symbol: str
    klass: PhonemeClass

    def __post_init__(self) -> None:
        if not self.symbol or any(c.isspace() for c in self.symbol):
            raise ValidationError(f"bad phoneme symbol {self.symbol!r}")
        if not isinstance(self.klass, PhonemeClass):
            raise ValidationError(f"bad phoneme class {self.klass!r}")

    @property
    def is_consonant(self) -> bool:
        return self.klass is PhonemeClass.CONSONANT


@dataclass(frozen=True)
class Note:
    """One score note.

    ``pitch`` is a MIDI number or ``None`` for a rest. ``lag`` is an optional
    annotated timing deviation in frames (late is positive).
    """

    pitch: Optional[int]
    duration_frames: int
    tempo_bpm: Fraction
    phonemes: Tuple[Phoneme, ...]
    lag: Optional[int] = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "phonemes", tuple(self.phonemes))
        object.__setattr__(self, "tempo_bpm", _as_fraction(self.tempo_bpm))
        if self.tempo_bpm <= 0:
            raise ValidationError("tempo_bpm must be positive")
        if not isinstance(self.duration_frames, int) or self.duration_frames < 1:
            raise ValidationError(f"note duration must be >= 1 frame, got {self.duration_frames!r}")
        if self.is_rest:
            if len(self.phonemes) != 1 or self.phonemes[0].klass is not PhonemeClass.SILENCE:
                raise ValidationError("a rest note carries exactly one silence phoneme")
        else:
            if isinstance(self.pitch, bool) or not isinstance(self.pitch, int):
                raise ValidationError(f"pitch must be an integer MIDI number, got {self.pitch!r}")
            if len(self.phonemes) == 0:
                raise ValidationError("a sounding note needs at least one phoneme")

    @property
    def is_rest(self) -> bool:
        return self.pitch is None

    @property
    def n_phonemes(self) -> int:
        return len(self.phonemes)

    @property
    def n_consonants(self) -> int:
        return sum(p.is_consonant for p in self.phonemes)


@dataclass(frozen=True)
class Score:
    notes: Tuple[Note, ...]
    grid: FrameGrid = field(default_factory=FrameGrid)
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "notes", tuple(self.notes))
        object.__setattr__(self, "metadata", dict(self.metadata))
        if len(self.notes) == 0:
            raise ValidationError("a score needs at least one note")
        if self.notes[0].lag not in (None, 0):
            raise ValidationError("the first note cannot carry a timing deviation")

    def __hash__(self) -> int:
        return hash((self.notes, self.grid, tuple(sorted(self.metadata.items()))))

    @property
    def durations(self) -> list[int]:
        return [n.duration_frames for n in self.notes]

    @property
    def total_frames(self) -> int:
        return sum(self.durations)

    def note_starts(self) -> list[int]:
        starts, t = [], 0
        for n in self.notes:
            starts.append(t)
            t += n.duration_frames
        return starts

    def phoneme_list(self) -> list[tuple[int, int, Phoneme]]:
        return [(i, k, p) for i, n in enumerate(self.notes) for k, p in enumerate(n.phonemes)]

    def annotated_lags(self) -> Optional["TimeLagSequence"]:
        if any(n.lag is None for n in self.notes[1:]):
            return None
        return TimeLagSequence([0] + [n.lag for n in self.notes[1:]])


@dataclass(frozen=True)
class TimeLagSequence:
    """Per-note onset deviations in frames; ``g[n] = actual onset - score onset``."""

    g: Tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "g", tuple(int(x) for x in self.g))
        if len(self.g) == 0:
            raise ValidationError("empty time-lag sequence")
        if self.g[0] != 0:
            raise ValidationError("g[0] must be 0: the first note has no deviation")

    def __len__(self) -> int:
        return len(self.g)

    def __iter__(self) -> Iterator[int]:
        return iter(self.g)

    def __getitem__(self, i: int) -> int:
        return self.g[i]


@dataclass(frozen=True)
class BoundaryEntry:
    start: int
    end: int
    symbol: str
    note_index: Optional[int] = None
    phoneme_index: Optional[int] = None

    @property
    def duration(self) -> int:
        return self.end - self.start


@dataclass(frozen=True)
class PhonemeBoundarySet:
    """Contiguous phoneme segments covering ``[0, total_frames)``."""

    entries: Tuple[BoundaryEntry, ...]
    mode: BoundaryMode = BoundaryMode.FORCED_ALIGN

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        prev_end = None
        for i, e in enumerate(self.entries):
            if e.end <= e.start:
                raise ValidationError(f"entry {i} ({e.symbol}) has non-positive length")
            if prev_end is None:
                if e.start != 0:
                    raise ValidationError("boundaries must start at frame 0")
            elif e.start != prev_end:
                raise ValidationError(f"entry {i} ({e.symbol}) is not contiguous with entry {i - 1}")
            prev_end = e.end

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self) -> Iterator[BoundaryEntry]:
        return iter(self.entries)

    @property
    def total_frames(self) -> int:
        return self.entries[-1].end if self.entries else 0

    @property
    def durations(self) -> list[int]:
        return [e.duration for e in self.entries]

    @property
    def starts(self) -> list[int]:
        return [e.start for e in self.entries]

    @property
    def is_bound(self) -> bool:
        return all(e.note_index is not None for e in self.entries)

    def frame_owner(self) -> list[int]:
        """Entry index owning each frame."""
        owner: list[int] = []
        for i, e in enumerate(self.entries):
            owner.extend([i] * e.duration)
        return owner

    def note_spans(self) -> list[tuple[int, int]]:
        """(start, end) of each note's phonemes; requires a bound set."""
        if not self.is_bound:
            raise ValidationError("boundary set is not bound to score notes")
        spans: dict[int, list[int]] = {}
        for e in self.entries:
            s = spans.setdefault(e.note_index, [e.start, e.end])
            s[1] = e.end
        return [tuple(spans[i]) for i in sorted(spans)]

    def with_mode(self, mode: BoundaryMode) -> "PhonemeBoundarySet":
        return PhonemeBoundarySet(self.entries, mode)

    def bind(self, score: Score) -> "PhonemeBoundarySet":
        """Attach note/phoneme indices by walking the score's phoneme sequence."""
        phones = score.phoneme_list()
        if len(phones) != len(self.entries):
            raise ValidationError(
                f"alignment mismatch: {len(self.entries)} segments vs {len(phones)} score phonemes"
            )
        out = []
        for e, (n, k, p) in zip(self.entries, phones):
            if e.symbol != p.symbol:
                raise ValidationError(
                    f"alignment mismatch at note {n} phoneme {k}: label {e.symbol!r} vs score {p.symbol!r}"
                )
            out.append(BoundaryEntry(e.start, e.end, e.symbol, n, k))
        return PhonemeBoundarySet(out, self.mode)


def boundaries_from_durations(
    score: Score, durations: Sequence[Sequence[int]], mode: BoundaryMode
) -> PhonemeBoundarySet:
    """Lay out per-note phoneme durations back to back from frame 0."""
    entries, t = [], 0
    for n, (note, ds) in enumerate(zip(score.notes, durations)):
        for k, (p, d) in enumerate(zip(note.phonemes, ds)):
            entries.append(BoundaryEntry(t, t + int(d), p.symbol, n, k))
            t += int(d)
    return PhonemeBoundarySet(entries, mode)


def frames_from_note_value(note_value: Number, tempo_bpm: Number, grid: FrameGrid = FrameGrid()) -> int:
    """Convert a note value in beats to frames, rounding half away from zero."""
    beats = _as_fraction(note_value)
    tempo = _as_fraction(tempo_bpm)
    if beats <= 0 or tempo <= 0:
        raise ValidationError("note value and tempo must be positive")
    return round_half_away(beats * 60000 / tempo / grid.frame_shift_ms)

