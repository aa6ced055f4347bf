"""Frame-driven location-sensitive attention with hand-written gradients.

Energies are ``e_j = v . tanh(Wq q + Wm m_j + Wf f_j + ba)`` where ``f_j`` is a
bank of 1-D convolutions over the cumulative attention weights. Setting
``location=False`` drops the ``Wf f_j`` term (content-only additive
attention).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .score_model import PhonemeBoundarySet

DEFAULT_G_SIGMA = 0.2


@dataclass
class AttentionParams:
    Wq: np.ndarray  # (d_a, d_q)
    Wm: np.ndarray  # (d_a, d_m)
    Wf: np.ndarray  # (d_a, n_filt)
    F: np.ndarray   # (n_filt, width)
    v: np.ndarray   # (d_a,)
    ba: Optional[np.ndarray] = None  # (d_a,), zeros when omitted
    location: bool = True

    def __post_init__(self) -> None:
        d_a = self.v.shape[0]
        if self.ba is None:
            self.ba = np.zeros(d_a)
        if self.ba.shape != (d_a,):
            raise ValueError("bias length must equal len(v)")
        if self.Wq.shape[0] != d_a or self.Wm.shape[0] != d_a or self.Wf.shape[0] != d_a:
            raise ValueError("projection row counts must equal len(v)")
        if self.F.shape[0] != self.Wf.shape[1]:
            raise ValueError("Wf columns must match the number of location filters")
        if self.F.shape[1] % 2 == 0:
            raise ValueError("location filter width must be odd")

    def set_forward_prior(self, step: int, energies: Optional[dict[int, float]] = None,
                          back: float = 1.5, ahead: float = 2.0) -> list[int]:
        """Initialise the first few filters and units as frontier detectors.

        Detector ``u`` responds ``back`` at frames exactly ``d_u`` past the
        last attended frame, ``-ahead`` per attended frame closer than that
        and nothing further ahead. Unit gains are solved so that the summed
        energy at advance ``d`` is about ``energies[d]`` above the frames far
        ahead. The default favours ``step`` and leaves ``step - 1`` and
        ``step + 1`` within reach of the content units.

        Returns the indices of the detector units. Their query, memory and
        bias rows are zeroed; callers keep them there so the detectors stay
        purely location driven.
        """
        if energies is None:
            energies = {step - 1: 7.0, step: 8.0, step + 1: 7.4}
        ds = sorted(d for d in energies if d >= 1)
        h = self.F.shape[1] // 2
        if not ds or ds[-1] > h:
            raise ValueError(f"filter width {self.F.shape[1]} cannot look back {ds[-1] if ds else 0} frames")
        if len(ds) > min(self.F.shape[0], self.v.shape[0]):
            raise ValueError(f"need {len(ds)} filters and attention units for the prior")
        fire = float(np.tanh(back))
        gains, acc = {}, 0.0
        for d in reversed(ds):
            # detectors for larger advances read frame d as "too close" and
            # subtract their gain there
            gains[d] = energies[d] / fire + acc
            acc += gains[d]
        for u, d in enumerate(ds):
            self.F[u] = 0.0
            self.F[u, h - d] = back
            self.F[u, h - d + 1:h + 1] = -ahead
            self.Wf[:, u] = 0.0
            self.Wf[u] = 0.0
            self.Wf[u, u] = 1.0
            self.Wq[u] = 0.0
            self.Wm[u] = 0.0
            self.ba[u] = 0.0
            self.v[u] = gains[d]
        return list(range(len(ds)))

    @classmethod
    def init(cls, d_q: int, d_m: int, d_a: int, n_filt: int = 4, width: int = 7,
             rng: Optional[np.random.Generator] = None, scale: float = 0.3,
             location: bool = True) -> "AttentionParams":
        rng = rng or np.random.default_rng(0)
        return cls(
            Wq=rng.normal(0, scale / np.sqrt(d_q), (d_a, d_q)),
            Wm=rng.normal(0, scale / np.sqrt(d_m), (d_a, d_m)),
            Wf=rng.normal(0, scale / np.sqrt(n_filt), (d_a, n_filt)),
            F=rng.normal(0, scale, (n_filt, width)),
            v=rng.normal(0, scale, d_a),
            ba=np.zeros(d_a),
            location=location,
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "location"}

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(a) for k, a in self.arrays().items()}


@dataclass
class StepCache:
    query: np.ndarray
    windows: Optional[np.ndarray]
    loc: Optional[np.ndarray]
    E: np.ndarray
    weights: np.ndarray


def location_windows(cum: np.ndarray, width: int) -> np.ndarray:
    # frames before the first one count as fully attended, so the frontier
    # is defined from step 0 on
    h = width // 2
    return sliding_window_view(np.pad(cum, h, constant_values=(1.0, 0.0)), width)


def _softmax(e: np.ndarray) -> np.ndarray:
    z = np.exp(e - e.max())
    return z / z.sum()


def project_memory(params: AttentionParams, memory: np.ndarray) -> np.ndarray:
    """Memory-side term ``Wm m_j`` for every input frame, (T_in, d_a)."""
    return memory @ params.Wm.T


def attention_forward(params: AttentionParams, query: np.ndarray, memory: np.ndarray,
                      prev_cum: np.ndarray, keys: Optional[np.ndarray] = None):
    """One decoder step. Returns ``(weights, context, cache)``."""
    if keys is None:
        keys = project_memory(params, memory)
    Z = keys + (params.Wq @ query + params.ba)
    windows = f = None
    if params.location:
        windows = location_windows(prev_cum, params.F.shape[1])
        f = windows @ params.F.T
        Z = Z + f @ params.Wf.T
    E = np.tanh(Z)
    w = _softmax(E @ params.v)
    return w, w @ memory, StepCache(query, windows, f, E, w)


def attention_backward(params: AttentionParams, cache: StepCache, memory: np.ndarray,
                       d_weights: np.ndarray, d_context: np.ndarray, grads: dict[str, np.ndarray]):
    """Accumulate parameter gradients into ``grads``.

    Returns ``(d_query, d_keys, d_memory_direct, d_prev_cum)``. ``d_keys`` is
    the gradient w.r.t. the projected memory; callers chain it through
    ``Wm`` once per utterance.
    """
    w = cache.weights
    dw = d_weights + memory @ d_context
    d_mem = np.outer(w, d_context)
    de = w * (dw - w @ dw)
    grads["v"] += cache.E.T @ de
    dZ = np.outer(de, params.v) * (1.0 - cache.E ** 2)
    dz_sum = dZ.sum(axis=0)
    grads["Wq"] += np.outer(dz_sum, cache.query)
    grads["ba"] += dz_sum
    d_query = params.Wq.T @ dz_sum
    d_cum = None
    if params.location:
        grads["Wf"] += dZ.T @ cache.loc
        df = dZ @ params.Wf
        grads["F"] += df.T @ cache.windows
        d_win = df @ params.F
        width = params.F.shape[1]
        T = len(w)
        d_pad = np.zeros(T + width - 1)
        for i in range(width):
            d_pad[i:i + T] += d_win[:, i]
        h = width // 2
        d_cum = d_pad[h:h + T]
    return d_query, dZ, d_mem, d_cum


def attention_step(params: AttentionParams, query: np.ndarray, memory: np.ndarray,
                   prev_cum_weights: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Attention weights over the input frames and the resulting context vector."""
    query = np.asarray(query, dtype=float)
    memory = np.asarray(memory, dtype=float)
    prev_cum_weights = np.asarray(prev_cum_weights, dtype=float)
    if memory.ndim != 2 or memory.shape[1] != params.Wm.shape[1]:
        raise ValueError(f"memory must be (T_in, {params.Wm.shape[1]}), got {memory.shape}")
    if query.shape != (params.Wq.shape[1],):
        raise ValueError(f"query must have length {params.Wq.shape[1]}, got {query.shape}")
    if prev_cum_weights.shape != (memory.shape[0],):
        raise ValueError("prev_cum_weights must have one entry per memory row")
    if not np.all(np.isfinite(prev_cum_weights)):
        raise ValueError("prev_cum_weights must be finite")
    w, c, _ = attention_forward(params, query, memory, prev_cum_weights)
    return w, c


# --------------------------------------------------------------------------
# guided attention

def guided_attention_weights(T_out: int, T_in: int, g_sigma: float = DEFAULT_G_SIGMA) -> np.ndarray:
    """Penalty ``1 - exp(-(n/T_in - t/T_out)^2 / (2 g^2))`` per cell."""
    if g_sigma <= 0:
        raise ValueError("g_sigma must be positive")
    t = np.arange(T_out)[:, None] / T_out
    n = np.arange(T_in)[None, :] / T_in
    return 1.0 - np.exp(-((n - t) ** 2) / (2.0 * g_sigma ** 2))


def guided_attention_loss(A: np.ndarray, g_sigma: float = DEFAULT_G_SIGMA) -> tuple[float, np.ndarray]:
    """Mean of ``A * W``; the gradient is ``W / (T_out * T_in)``."""
    A = np.asarray(A, dtype=float)
    W = guided_attention_weights(A.shape[0], A.shape[1], g_sigma)
    return float((A * W).mean()), W / A.size


# --------------------------------------------------------------------------
# pitch normalization

def weighted_note_pitch(weights: np.ndarray, pitch_memory: np.ndarray) -> float:
    weights = np.asarray(weights, dtype=float)
    pitch_memory = np.asarray(pitch_memory, dtype=float)
    if weights.shape != pitch_memory.shape:
        raise ValueError(f"length mismatch: {weights.shape} vs {pitch_memory.shape}")
    return float(weights @ pitch_memory)


# --------------------------------------------------------------------------
# diagnostics

def expand_steps(A_steps: np.ndarray, r: int, T_out: int) -> np.ndarray:
    """Repeat each decoder-step row ``r`` times and trim to ``T_out`` frames."""
    return np.repeat(np.asarray(A_steps), r, axis=0)[:T_out]


def inferred_starts(A: np.ndarray, input_boundaries: PhonemeBoundarySet) -> list[int]:
    """Output frame at which attention first reaches each phoneme (k >= 1)."""
    owner = np.asarray(input_boundaries.frame_owner())
    attended = owner[np.argmax(A, axis=1)]
    reached = np.maximum.accumulate(attended)
    T_out = A.shape[0]
    out = []
    for k in range(1, len(input_boundaries)):
        hits = np.flatnonzero(reached >= k)
        out.append(int(hits[0]) if hits.size else T_out)
    return out


def alignment_diagnostics(A: np.ndarray, b: PhonemeBoundarySet,
                          input_boundaries: Optional[PhonemeBoundarySet] = None) -> dict[str, float]:
    """Diagonality, centroid drift and attention-inferred boundary error.

    ``b`` holds the reference phoneme boundaries on the output axis;
    ``input_boundaries`` (default ``b``) says which phoneme each input frame
    belongs to. Centroids use frame centres, so an exact diagonal has zero
    drift and a uniform row sits at ``T_in / 2``.
    """
    A = np.asarray(A, dtype=float)
    T_out, T_in = A.shape
    if input_boundaries is None:
        input_boundaries = b
    centroid = A @ (np.arange(T_in) + 0.5)
    ref = (np.arange(T_out) + 0.5) * T_in / T_out
    drift = float(np.abs(centroid - ref).mean())
    diagonality = 1.0 - 2.0 * float(np.abs(centroid / T_in - ref / T_in).mean())
    if len(b) > 1:
        if len(input_boundaries) != len(b):
            raise ValueError("input and reference boundary sets differ in phoneme count")
        est = np.asarray(inferred_starts(A, input_boundaries))
        boundary_error = float(np.abs(est - np.asarray(b.starts[1:])).mean())
    else:
        boundary_error = 0.0
    return {"diagonality": diagonality, "centroid_drift": drift, "boundary_error": boundary_error}


def to_pgm(A: np.ndarray) -> str:
    """Plain PGM (P2), max-normalized to 255; rows are output frames."""
    A = np.asarray(A, dtype=float)
    peak = A.max() if A.size else 0.0
    pix = np.zeros(A.shape, dtype=int) if peak <= 0 else np.rint(A / peak * 255).astype(int)
    lines = ["P2", f"{A.shape[1]} {A.shape[0]}", "255"]
    lines += [" ".join(str(x) for x in row) for row in pix]
    return "\n".join(lines) + "\n"


# --------------------------------------------------------------------------
# finite differences

def grad_check(f: Callable[[np.ndarray], tuple[float, np.ndarray]], x: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between ``f``'s analytic gradient and central differences.

    ``f(x)`` returns ``(value, grad)``; ``x`` is not modified.
    """
    if not 1e-6 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    x = np.array(x, dtype=float)
    val, g_ana = f(x.copy())
    if not np.isfinite(val):
        raise ValueError("function value is not finite")
    g_ana = np.asarray(g_ana, dtype=float).reshape(x.shape)
    g_num = np.zeros_like(x)
    flat, num = x.reshape(-1), g_num.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x.copy())[0]
        flat[i] = orig - eps
        fm = f(x.copy())[0]
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError("function value is not finite")
        num[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(1e-8, np.abs(g_num) + np.abs(g_ana))
    return float((np.abs(g_num - g_ana) / denom).max()) if x.size else 0.0
