"""Acceptance suite. Each criterion prints one PASS/FAIL line.

Run with ``pytest -s tests/test_acceptance.py`` to see the lines, or
``python tests/test_acceptance.py`` for the summary alone.
"""

import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conftest import random_score  # noqa: E402

from svs_timing.attention import (  # noqa: E402
    AttentionParams, attention_backward, attention_forward, grad_check, guided_attention_loss,
    guided_attention_weights,
)
from svs_timing.score_io import parse_labels, parse_score, read_matrix, write_labels, write_matrix, write_score  # noqa: E402
from svs_timing.score_model import BoundaryEntry, BoundaryMode, FrameGrid, PhonemeBoundarySet  # noqa: E402
from svs_timing.timing import (  # noqa: E402
    adjust_note_durations, allocate_phoneme_durations, allocate_real, first_nonconsonant_starts,
    pseudo_boundaries,
)
from svs_timing.toy_model.corpus import gen_synthetic_corpus  # noqa: E402
from svs_timing.toy_model.model import ModelConfig, init_params, loss_and_grads, param_shapes  # noqa: E402
from svs_timing.toy_model.train import absorption_test, config_for, train  # noqa: E402

# pinned tolerances and budgets
ALLOC_TOL = 1e-9
TIMING_BUDGET_S = 5.0
GRAD_TOL = 1e-4
GRAD_BUDGET_S = 60.0
GAL_ZERO_TOL = 1e-12
GAL_VALUE_TOL = 1e-9
D_MAX_C = 30
PERTURBATION = 10
DIAGONALITY_MIN = 0.9
TRAIN_BUDGET_S = 600.0
CORPUS_ITEMS = 50
CORPUS_SEED = 0
ABSORB_ITEMS = 20
HELD_OUT_SEED = 1
MODES = (BoundaryMode.FORCED_ALIGN, BoundaryMode.MODEL_ESTIMATED, BoundaryMode.PSEUDO)

RESULTS: dict[int, str] = {}


def report(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS[n] = line
    print(line)
    return ok

# ---------------------------------------------------------------- 1


def test_criterion_1_timing_algebra():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst, conserved, exact_int = 0.0, True, True
    for _ in range(1000):
        N = int(rng.integers(1, 12))
        L = rng.integers(31, 300, N)  # |g| <= 15 keeps every adjusted note >= 1 frame
        g = np.r_[0, rng.integers(-15, 16, N - 1)]
        l_hat = adjust_note_durations(L, g)
        conserved &= sum(l_hat) == int(L.sum())
        for total in l_hat:
            K = int(rng.integers(1, min(5, total + 1)))
            mu = rng.uniform(3, 40, K)
            var = rng.uniform(0.5, 30, K)
            rho = (total - mu.sum()) / var.sum()
            closed = mu + rho * var
            real = allocate_real(total, mu, var)
            if closed.min() >= 1.0:
                worst = max(worst, float(np.abs(real - closed).max()))
            d = allocate_phoneme_durations(total, mu, var)
            exact_int &= sum(d) == total and min(d) >= 1
    elapsed = time.perf_counter() - t0
    ok = conserved and exact_int and worst < ALLOC_TOL and elapsed < TIMING_BUDGET_S
    assert report(1, ok, f"conserved={conserved} integer_sums={exact_int} "
                         f"max|alloc-closed|={worst:.2e} (<{ALLOC_TOL:g}) time={elapsed:.2f}s (<{TIMING_BUDGET_S:g}s)")

# ---------------------------------------------------------------- 2


def test_criterion_2_pseudo_boundaries():
    rng = np.random.default_rng(202)
    t0 = time.perf_counter()
    cap_ok = onset_ok = partition_ok = True
    checked = 0
    for _ in range(500):
        s = random_score(rng, (1, 8), (20, 200))
        b = pseudo_boundaries(s, D_MAX_C)
        partition_ok &= b.total_frames == s.total_frames and b.starts == [0] + [e.end for e in b.entries[:-1]]
        for e in b:
            if s.notes[e.note_index].phonemes[e.phoneme_index].is_consonant:
                cap_ok &= e.duration <= D_MAX_C
        firsts = first_nonconsonant_starts(s, b)
        starts = s.note_starts()
        for n in range(1, len(s.notes)):
            onset_ok &= firsts[n] == starts[n]
            checked += 1
    elapsed = time.perf_counter() - t0
    ok = cap_ok and onset_ok and partition_ok and elapsed < TIMING_BUDGET_S
    assert report(2, ok, f"consonants<={D_MAX_C}={cap_ok} first-non-consonant-on-onset={onset_ok} "
                         f"({checked} notes) partition={partition_ok} time={elapsed:.2f}s (<{TIMING_BUDGET_S:g}s)")

# ---------------------------------------------------------------- 3


def test_criterion_3_round_trips():
    rng = np.random.default_rng(303)
    labels_ok = score_ok = matrix_ok = True
    for _ in range(200):
        durs = rng.integers(1, 400, int(rng.integers(1, 20)))
        syms = rng.choice(["a", "k", "pau", "sh", "N"], len(durs))
        ends = np.cumsum(durs)
        b = PhonemeBoundarySet([BoundaryEntry(int(e - d), int(e), str(s)) for d, e, s in zip(durs, ends, syms)])
        grid = FrameGrid([5, 10, 2.5][int(rng.integers(3))])
        text = write_labels(b, grid)
        labels_ok &= parse_labels(text, grid) == b and write_labels(parse_labels(text, grid), grid) == text

        s = random_score(rng)
        text = write_score(s)
        score_ok &= parse_score(text) == s and write_score(parse_score(text)) == text

        shape = (int(rng.integers(0, 8)), int(rng.integers(1, 8)))
        raw = rng.normal(0, 10.0 ** rng.integers(-4, 5), shape)
        m = np.vectorize(lambda x: float("%.12g" % x), otypes=[float])(raw) if raw.size else raw
        text = write_matrix(m)
        back = read_matrix(text)
        matrix_ok &= back.shape == m.shape and back.tobytes() == m.tobytes() and write_matrix(back) == text
    ok = labels_ok and score_ok and matrix_ok
    assert report(3, ok, f"labels={labels_ok} scores={score_ok} matrices={matrix_ok} (200 each, bit-exact)")

# ---------------------------------------------------------------- 4


def _attention_case(rng, location):
    p = AttentionParams.init(3, 4, 5, 2, 3, rng, scale=0.8, location=location)
    p.ba = rng.normal(0, 0.3, 5)
    T = int(rng.integers(3, 9))
    q, m, cum = rng.normal(size=3), rng.normal(size=(T, 4)), rng.random(T)
    rw, rc = rng.normal(size=T), rng.normal(size=4)
    return p, q, m, cum, rw, rc


def _attention_errors(rng):
    errs = []
    for location in (True, False):
        p, q, m, cum, rw, rc = _attention_case(rng, location)
        for name in p.arrays():
            if not location and name in ("Wf", "F"):
                continue

            def f(x, name=name):
                arrs = p.arrays()
                arrs[name] = x
                pp = AttentionParams(**arrs, location=location)
                w, c, cache = attention_forward(pp, q, m, cum)
                grads = pp.zeros_like()
                _, dZ, _, _ = attention_backward(pp, cache, m, rw, rc, grads)
                grads["Wm"] += dZ.T @ m
                return float(rw @ w + rc @ c), grads[name]
            errs.append((f"attention.{name}{'' if location else '(content)'}", grad_check(f, p.arrays()[name])))
    return errs


def _model_errors(rng):
    errs = []
    small = dict(d_in=5, d_note=3, d_ac=3, d_enc=4, d_dec=4, d_prenet=3, d_att=5, n_filt=3,
                 filt_width=9, postnet_width=3, forward_prior=False)
    for label, extra, T in (("model", {}, 12), ("model(no-att)", {"use_attention": False}, 10),
                            ("model(mse-only)", {"guided_weight": 0.0}, 8)):
        cfg = ModelConfig(**small, **extra)
        params = init_params(cfg, rng)
        for k in params:
            if k.startswith("b"):
                params[k] = rng.normal(0, 0.3, params[k].shape)
        data = (rng.normal(size=(T, 5)), rng.normal(size=(T, 3)), rng.normal(size=T), rng.normal(size=(T, 3)))
        for name in param_shapes(cfg):
            if not cfg.use_attention and name in ("Wq", "Wm", "Wf", "F", "v", "ba"):
                continue

            def f(x, name=name, cfg=cfg, params=params, data=data):
                p = dict(params)
                p[name] = x
                total, _, grads, _ = loss_and_grads(cfg, p, *data)
                return total, grads[name]
            errs.append((f"{label}.{name}", grad_check(f, params[name], eps=1e-6)))
    return errs


def test_criterion_4_gradients():
    rng = np.random.default_rng(404)
    t0 = time.perf_counter()
    A = rng.random((9, 11))
    errs = [("guided_attention", grad_check(lambda a: guided_attention_loss(a), A))]
    errs += _attention_errors(rng)
    errs += _model_errors(rng)
    elapsed = time.perf_counter() - t0
    name, worst = max(errs, key=lambda e: e[1])
    ok = worst < GRAD_TOL and elapsed < GRAD_BUDGET_S
    assert report(4, ok, f"{len(errs)} blocks, worst rel err {worst:.2e} at {name} (<{GRAD_TOL:g}) "
                         f"time={elapsed:.1f}s (<{GRAD_BUDGET_S:g}s)")

# ---------------------------------------------------------------- 5


def test_criterion_5_guided_attention_values():
    zero, _ = guided_attention_loss(np.eye(10))
    w = guided_attention_weights(5, 5, 0.2)[0, 1]  # offset 1/5 - 0/5 = 0.2
    target = 1.0 - np.exp(-0.5)
    ok = abs(zero) <= GAL_ZERO_TOL and abs(w - target) <= GAL_VALUE_TOL and abs(w - 0.393469) < 5e-7
    assert report(5, ok, f"diagonal loss={zero:.1e} (|.|<={GAL_ZERO_TOL:g}) weight={w:.9f} "
                         f"vs {target:.9f} (+-{GAL_VALUE_TOL:g})")

# ---------------------------------------------------------------- 6-8


def _run_all():
    corpus = gen_synthetic_corpus(CORPUS_ITEMS, CORPUS_SEED)
    held_out = gen_synthetic_corpus(ABSORB_ITEMS, HELD_OUT_SEED)
    cfg = config_for(corpus, seed=CORPUS_SEED)
    out = {}
    for mode in MODES:
        t0 = time.perf_counter()
        res = train(cfg, corpus, mode)
        elapsed = time.perf_counter() - t0
        absorb = [absorption_test(res, it, PERTURBATION, held_out.symbols) for it in held_out.items]
        early = [absorption_test(res, it, -PERTURBATION, held_out.symbols) for it in held_out.items]
        out[mode] = dict(result=res, seconds=elapsed, absorb=absorb, early=early)
    return out


@pytest.fixture(scope="module")
def runs():
    return _run_all(), _run_all()


def _mean(rows, key):
    return float(np.mean([r[key] for r in rows]))


def test_criterion_6_absorption(runs):
    run = runs[0][BoundaryMode.PSEUDO]
    with_att = _mean(run["absorb"], "boundary_error_with_attention")
    without = _mean(run["absorb"], "boundary_error_without")
    early = _mean(run["early"], "boundary_error_with_attention")
    diag = run["result"].metrics[-1]["diagonality"]
    ok = with_att < PERTURBATION and with_att < without and diag > DIAGONALITY_MIN and run["seconds"] < TRAIN_BUDGET_S
    assert report(6, ok, f"perturbation {PERTURBATION}: attention error {with_att:.2f} vs hard alignment "
                         f"{without:.2f} (mean over {ABSORB_ITEMS} held-out items; need < {PERTURBATION}); "
                         f"diagonality {diag:.3f} (> {DIAGONALITY_MIN}); train {run['seconds']:.0f}s "
                         f"(< {TRAIN_BUDGET_S:.0f}s); reported only: perturbation -{PERTURBATION} -> {early:.2f}")


def test_criterion_7_mode_ordering(runs):
    final = {m: runs[0][m]["result"].metrics[-1]["boundary_error"] for m in MODES}
    fal, model, pseudo = (final[m] for m in MODES)
    ok = fal <= pseudo and fal <= model
    assert report(7, ok, f"final boundary_error fal={fal:.3f} model={model:.3f} pseudo={pseudo:.3f}; "
                         f"asserted fal<=pseudo and fal<=model; reported only: pseudo-model={pseudo - model:+.3f}")


def test_criterion_8_determinism(runs):
    first, second = runs
    same_metrics = all(first[m]["result"].metrics_csv() == second[m]["result"].metrics_csv() for m in MODES)
    same_absorb = all(first[m]["absorb"] == second[m]["absorb"] and first[m]["early"] == second[m]["early"]
                      for m in MODES)
    ok = same_metrics and same_absorb
    assert report(8, ok, f"metric streams byte-identical={same_metrics} absorption reports identical={same_absorb}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
