"""Readers and writers for scores (JSON), HTK-style label files and CSV matrices."""

from __future__ import annotations

import io
import json
from fractions import Fraction
from typing import Any, Optional

import numpy as np

from .score_model import (
    REST,
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


class ParseError(ValueError):
    """Malformed document. ``path`` locates the offending field or line."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class LabelFormatError(ParseError):
    pass


class QuantizationError(LabelFormatError):
    pass


# --------------------------------------------------------------------------
# score documents

def _number(v: Any, path: str) -> Fraction:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ParseError(f"expected a number, got {v!r}", path)
    return Fraction(repr(v)) if isinstance(v, float) else Fraction(v)


def _positive(v: Any, path: str) -> Fraction:
    x = _number(v, path)
    if x <= 0:
        raise ParseError(f"must be positive, got {v!r}", path)
    return x


def parse_score(text: str) -> Score:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", f"line {exc.lineno}") from exc
    if not isinstance(doc, dict):
        raise ParseError("top level must be an object", "$")

    tempo = _positive(doc.get("tempo_bpm"), "$.tempo_bpm")
    grid = FrameGrid(_positive(doc.get("frame_shift_ms", 5), "$.frame_shift_ms"))
    metadata = doc.get("metadata", {})
    if not isinstance(metadata, dict) or not all(
        isinstance(k, str) and isinstance(v, str) for k, v in metadata.items()
    ):
        raise ParseError("metadata must map strings to strings", "$.metadata")
    raw_notes = doc.get("notes")
    if not isinstance(raw_notes, list) or not raw_notes:
        raise ParseError("notes must be a non-empty array", "$.notes")

    notes = []
    for i, raw in enumerate(raw_notes):
        path = f"$.notes[{i}]"
        if not isinstance(raw, dict):
            raise ParseError("note must be an object", path)
        pitch = raw.get("pitch")
        if pitch == REST:
            pitch = None
        elif isinstance(pitch, bool) or not isinstance(pitch, int):
            raise ParseError(f"pitch must be an integer or {REST!r}", path + ".pitch")
        note_tempo = tempo if "tempo_bpm" not in raw else _positive(raw["tempo_bpm"], path + ".tempo_bpm")
        beats = _positive(raw.get("beats"), path + ".beats")
        phs = raw.get("phonemes")
        if not isinstance(phs, list):
            raise ParseError("phonemes must be an array", path + ".phonemes")
        phonemes = []
        for k, ph in enumerate(phs):
            ppath = f"{path}.phonemes[{k}]"
            if not isinstance(ph, dict) or not isinstance(ph.get("sym"), str):
                raise ParseError("phoneme needs a string 'sym'", ppath)
            try:
                klass = PhonemeClass(ph.get("class"))
            except ValueError:
                raise ParseError(f"class must be V, C or SIL, got {ph.get('class')!r}", ppath + ".class")
            try:
                phonemes.append(Phoneme(ph["sym"], klass))
            except ValidationError as exc:
                raise ParseError(str(exc), ppath) from exc
        lag = raw.get("g")
        if lag is not None and (isinstance(lag, bool) or not isinstance(lag, int)):
            raise ParseError("g must be an integer number of frames", path + ".g")
        if i == 0 and lag not in (None, 0):
            raise ValidationError(f"{path}.g: the first note cannot carry a timing deviation")
        try:
            frames = frames_from_note_value(beats, note_tempo, grid)
            notes.append(Note(pitch, frames, note_tempo, phonemes, lag))
        except ValidationError as exc:
            raise ValidationError(f"{path}: {exc}") from exc
    return Score(notes, grid, metadata)


def _num_out(x: Fraction) -> Any:
    if x.denominator == 1:
        return int(x)
    return float(x)


def write_score(score: Score) -> str:
    """Serialize ``score``; beats are back-computed from frames."""
    grid = score.grid
    tempo0 = score.notes[0].tempo_bpm
    notes = []
    for n in score.notes:
        beats = Fraction(n.duration_frames) * grid.frame_shift_ms * n.tempo_bpm / 60000
        d: dict[str, Any] = {
            "pitch": REST if n.is_rest else n.pitch,
            "beats": _num_out(beats),
            "phonemes": [{"sym": p.symbol, "class": p.klass.value} for p in n.phonemes],
        }
        if n.tempo_bpm != tempo0:
            d["tempo_bpm"] = _num_out(n.tempo_bpm)
        if n.lag is not None:
            d["g"] = n.lag
        notes.append(d)
    doc: dict[str, Any] = {
        "tempo_bpm": _num_out(tempo0),
        "frame_shift_ms": _num_out(grid.frame_shift_ms),
        "notes": notes,
    }
    if score.metadata:
        doc["metadata"] = dict(score.metadata)
    return json.dumps(doc, indent=1) + "\n"


# --------------------------------------------------------------------------
# label files (HTK style, 100 ns units)

def parse_labels(
    text: str,
    grid: FrameGrid = FrameGrid(),
    *,
    score: Optional[Score] = None,
    mode: BoundaryMode = BoundaryMode.FORCED_ALIGN,
) -> PhonemeBoundarySet:
    """Read ``<start> <end> <symbol>`` lines into a frame-level boundary set.

    Both edges are floored onto the frame grid. When ``score`` is given the
    segments are bound to its notes (symbols must match in order).
    """
    unit = grid.frame_shift_100ns
    rows: list[tuple[int, int, str, int]] = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 3:
            raise LabelFormatError("expected '<start> <end> <symbol>'", f"line {lineno}")
        try:
            start, end = int(parts[0]), int(parts[1])
        except ValueError:
            raise LabelFormatError("times must be integers (100 ns units)", f"line {lineno}")
        if start < 0 or end <= start:
            raise LabelFormatError(f"bad segment times {start}..{end}", f"line {lineno}")
        if rows:
            prev_end = rows[-1][1]
            if start != prev_end:
                kind = "overlapping" if start < prev_end else "non-contiguous"
                raise LabelFormatError(f"{kind} segment (previous ends at {prev_end})", f"line {lineno}")
        elif start != 0:
            raise LabelFormatError("first segment must start at 0", f"line {lineno}")
        rows.append((start, end, parts[2], lineno))

    entries = []
    prev = 0
    for start, end, sym, lineno in rows:
        fs = prev  # snapped to the previous end to keep contiguity
        fe = int(Fraction(end) / unit // 1)
        if fe <= fs:
            raise QuantizationError(f"segment {sym!r} vanishes on the {grid.frame_shift_ms} ms grid", f"line {lineno}")
        entries.append(BoundaryEntry(fs, fe, sym))
        prev = fe
    b = PhonemeBoundarySet(entries, mode)
    return b.bind(score) if score is not None else b


def write_labels(b: PhonemeBoundarySet, grid: FrameGrid = FrameGrid()) -> str:
    unit = grid.frame_shift_100ns
    out = io.StringIO()
    for e in b:
        s, t = e.start * unit, e.end * unit
        if s.denominator != 1 or t.denominator != 1:
            raise ValueError(f"frame shift {grid.frame_shift_ms} ms is not a whole number of 100 ns units")
        out.write(f"{int(s)} {int(t)} {e.symbol}\n")
    return out.getvalue()


# --------------------------------------------------------------------------
# CSV matrices

def write_matrix(m: np.ndarray) -> str:
    m = np.asarray(m, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    out = io.StringIO()
    out.write(f"{m.shape[0]},{m.shape[1]}\n")
    for row in m:
        out.write(",".join("%.12g" % x for x in row))
        out.write("\n")
    return out.getvalue()


def read_matrix(text: str) -> np.ndarray:
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header", "line 1")
    try:
        rows, cols = (int(x) for x in lines[0].split(","))
    except ValueError:
        raise ParseError("header must be 'rows,cols'", "line 1")
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != rows:
        raise ParseError(f"header says {rows} rows, found {len(body)}", "line 1")
    m = np.empty((rows, cols))
    for i, ln in enumerate(body):
        vals = ln.split(",")
        if len(vals) != cols:
            raise ParseError(f"ragged row: {len(vals)} values, expected {cols}", f"line {i + 2}")
        try:
            m[i] = [float(v) for v in vals]
        except ValueError:
            raise ParseError("non-numeric value", f"line {i + 2}")
    return m
