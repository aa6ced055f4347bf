import numpy as np
import pytest
from hypothesis import settings, strategies as st

from svs_timing.score_model import (
    BoundaryEntry, BoundaryMode, Note, Phoneme, PhonemeBoundarySet, PhonemeClass, Score,
)

settings.register_profile("default", deadline=None, max_examples=100)
settings.load_profile("default")

V = PhonemeClass.VOWEL
C = PhonemeClass.CONSONANT
SIL = PhonemeClass.SILENCE


def ph(sym, klass=None):
    if klass is None:
        klass = SIL if sym == "pau" else (V if sym in "aiueo" else C)
    return Phoneme(sym, klass)


def note(frames, syms, pitch=60, tempo=120, lag=None):
    return Note(pitch, frames, tempo, [ph(s) for s in syms], lag)


def rest(frames, tempo=120):
    return Note(None, frames, tempo, [ph("pau")])


def score_of(*notes):
    return Score(list(notes))


def random_score(rng, n_notes=(1, 6), frames=(10, 120), max_cons=3):
    """Random sounding/rest notes with 0..max_cons leading consonants and one vowel."""
    notes = []
    tempo = int(rng.integers(60, 241))
    for _ in range(int(rng.integers(n_notes[0], n_notes[1] + 1))):
        L = int(rng.integers(frames[0], frames[1] + 1))
        if rng.random() < 0.1:
            tempo = int(rng.integers(60, 241))
        if rng.random() < 0.15:
            notes.append(rest(L, tempo))
            continue
        k = int(rng.integers(0, max_cons + 1))
        syms = [str(rng.choice(list("kstnmr"))) for _ in range(k)] + [str(rng.choice(list("aiueo")))]
        if rng.random() < 0.2:
            syms.append(str(rng.choice(list("ktn"))))
        notes.append(note(L, syms, pitch=int(rng.integers(48, 80)), tempo=tempo))
    return Score(notes)


@st.composite
def scores(draw, max_notes=6, max_frames=120):
    seed = draw(st.integers(0, 2**32 - 1))
    return random_score(np.random.default_rng(seed), (1, max_notes), (10, max_frames))


@st.composite
def boundary_sets(draw, max_len=12):
    durs = draw(st.lists(st.integers(1, 400), min_size=1, max_size=max_len))
    syms = draw(st.lists(st.sampled_from(["a", "k", "pau", "sh", "N"]), min_size=len(durs), max_size=len(durs)))
    entries, t = [], 0
    for d, s in zip(durs, syms):
        entries.append(BoundaryEntry(t, t + d, s))
        t += d
    return PhonemeBoundarySet(entries, BoundaryMode.FORCED_ALIGN)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
