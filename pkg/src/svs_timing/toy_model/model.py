"""Frame-level encoder/decoder with reduction factor and frame-driven attention.

Per decoder step ``s`` (covering output frames ``s*r .. s*r+r-1``)::

    p   = relu(Wp y_prev + bp)                       pre-net
    q   = [h_prev, p, note_frames[s*r]]              attention query
    w,c = attention(q, memory, cum)                  or a fixed band w/o attention
    h   = GRU(h_prev, [p, c, note_frames[s*r]])
    o   = Wo [h, c] + bo                             r frames of d_ac
    o[:, 0] += w . pitch                             F0 channel = note pitch + residual

followed by a residual 1-D convolutional post-net. Every gradient below is
written out by hand and checked against finite differences in the tests.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from ..attention import (
    DEFAULT_G_SIGMA,
    AttentionParams,
    attention_backward,
    attention_forward,
    expand_steps,
    guided_attention_loss,
)

ATT_KEYS = ("Wq", "Wm", "Wf", "F", "v", "ba")


@dataclass(frozen=True)
class ModelConfig:
    d_in: int = 40
    d_note: int = 10
    d_ac: int = 8
    d_enc: int = 24
    d_dec: int = 24
    d_prenet: int = 16
    d_att: int = 16
    n_filt: int = 4
    filt_width: int = 9
    postnet_width: int = 5
    reduction_factor: int = 3
    location: bool = True
    use_attention: bool = True
    g_sigma: float = DEFAULT_G_SIGMA
    guided_weight: float = 1.0
    learning_rate: float = 0.1
    batch_size: int = 1
    epochs: int = 20
    clip_norm: float = 5.0
    init_scale: float = 1.0
    forward_prior: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.reduction_factor < 1:
            raise ValueError("reduction_factor must be >= 1")
        dims = (self.d_in, self.d_note, self.d_ac, self.d_enc, self.d_dec, self.d_prenet, self.d_att, self.n_filt)
        if min(dims) < 1:
            raise ValueError("all dimensions must be >= 1")
        if self.filt_width % 2 == 0 or self.postnet_width % 2 == 0:
            raise ValueError("filter widths must be odd")
        if self.g_sigma <= 0:
            raise ValueError("g_sigma must be positive")

    @property
    def d_query(self) -> int:
        return self.d_dec + self.d_prenet + self.d_note

    @property
    def d_gru_in(self) -> int:
        return self.d_prenet + self.d_enc + self.d_note

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    r, d, dx = cfg.reduction_factor, cfg.d_dec, cfg.d_gru_in
    return {
        "We": (cfg.d_enc, cfg.d_in),
        "be": (cfg.d_enc,),
        "Wp": (cfg.d_prenet, cfg.d_ac),
        "bp": (cfg.d_prenet,),
        "Wq": (cfg.d_att, cfg.d_query),
        "Wm": (cfg.d_att, cfg.d_enc),
        "Wf": (cfg.d_att, cfg.n_filt),
        "F": (cfg.n_filt, cfg.filt_width),
        "v": (cfg.d_att,),
        "ba": (cfg.d_att,),
        "Wzr": (2 * d, dx + d),
        "bzr": (2 * d,),
        "Wnx": (d, dx),
        "Wnh": (d, d),
        "bn": (d,),
        "bnh": (d,),
        "Wo": (r * cfg.d_ac, d + cfg.d_enc),
        "bo": (r * cfg.d_ac,),
        "Wpost": (cfg.d_ac, cfg.d_ac, cfg.postnet_width),
        "bpost": (cfg.d_ac,),
    }


def init_params(cfg: ModelConfig, rng: Optional[np.random.Generator] = None) -> dict[str, np.ndarray]:
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("b"):
            params[name] = np.zeros(shape)
            continue
        fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else shape[0]
        params[name] = rng.normal(0.0, cfg.init_scale / math.sqrt(fan_in), shape)
    params["Wpost"] *= 0.1
    if prior_units(cfg):
        attention_params(params, cfg).set_forward_prior(cfg.reduction_factor)
    return params


def prior_units(cfg: ModelConfig) -> list[int]:
    """Attention units initialised as location-only frontier detectors."""
    if not (cfg.forward_prior and cfg.use_attention and cfg.location):
        return []
    r = cfg.reduction_factor
    return list(range(len([d for d in (r - 1, r, r + 1) if d >= 1])))


def trainable_mask(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """1.0 where gradient steps apply, 0.0 on the frontier detectors.

    The detectors form a fixed location prior: their filters, gains and
    input rows stay at their initial values. Their large gains would
    otherwise turn small gradient steps into a different advance rate.
    """
    mask = {k: np.ones(s) for k, s in param_shapes(cfg).items()}
    for u in prior_units(cfg):
        for k in ("Wq", "Wm", "Wf", "F", "v", "ba"):
            mask[k][u] = 0.0
    return mask


def zero_params(cfg: ModelConfig) -> dict[str, np.ndarray]:
    return {k: np.zeros(s) for k, s in param_shapes(cfg).items()}


def attention_params(params: dict[str, np.ndarray], cfg: ModelConfig) -> AttentionParams:
    return AttentionParams(*(params[k] for k in ATT_KEYS), location=cfg.location)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def n_steps(T: int, r: int) -> int:
    return -(-T // r)


def hard_band(s: int, r: int, T_in: int) -> np.ndarray:
    """Fixed alignment row for the no-attention baseline: frames ``s*r .. s*r+r-1``."""
    w = np.zeros(T_in)
    lo = min(s * r, T_in - 1)
    hi = min(s * r + r, T_in)
    w[lo:max(hi, lo + 1)] = 1.0
    return w / w.sum()


@dataclass
class ForwardResult:
    pre: np.ndarray          # (S*r, d_ac)
    post: np.ndarray         # (S*r, d_ac)
    A_steps: np.ndarray      # (S, T_in)
    T: int
    cache: Optional[dict] = None

    @property
    def alignment(self) -> np.ndarray:
        """Frame-level alignment, (T, T_in)."""
        r = self.pre.shape[0] // self.A_steps.shape[0]
        return expand_steps(self.A_steps, r, self.T)


def _postnet(pre: np.ndarray, W: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    k = W.shape[2]
    h = k // 2
    padded = np.pad(pre, ((h, h), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(padded, k, axis=0)  # (L, d_ac, k)
    conv = np.einsum("lck,dck->ld", win, W)
    return pre + conv + b, win


def forward(cfg: ModelConfig, params: dict[str, np.ndarray], enc_frames: np.ndarray,
            note_frames: np.ndarray, pitch: np.ndarray, targets: Optional[np.ndarray] = None,
            keep_cache: bool = False) -> ForwardResult:
    """Run the decoder over ``ceil(T/r)`` steps.

    With ``targets`` the pre-net sees ground-truth previous frames (teacher
    forcing); without, it sees its own previous output.
    """
    T, T_in = note_frames.shape[0], enc_frames.shape[0]
    if enc_frames.shape[1] != cfg.d_in or note_frames.shape[1] != cfg.d_note:
        raise ValueError("feature widths do not match the model config")
    if pitch.shape != (T_in,):
        raise ValueError("pitch sequence must have one value per encoder frame")
    if T != T_in:
        raise ValueError(f"encoder ({T_in}) and note ({T}) frame counts differ")
    if targets is not None and targets.shape != (T, cfg.d_ac):
        raise ValueError(f"targets must be ({T}, {cfg.d_ac})")
    r, d = cfg.reduction_factor, cfg.d_dec
    S = n_steps(T, r)

    M = np.tanh(enc_frames @ params["We"].T + params["be"])
    att = attention_params(params, cfg)
    K = M @ att.Wm.T if cfg.use_attention else None

    pre = np.zeros((S * r, cfg.d_ac))
    A = np.zeros((S, T_in))
    h = np.zeros(d)
    cum = np.zeros(T_in)
    y_prev = np.zeros(cfg.d_ac)
    steps = []
    for s in range(S):
        t0 = s * r
        if s > 0:
            y_prev = targets[t0 - 1] if targets is not None else pre[t0 - 1]
        p_lin = params["Wp"] @ y_prev + params["bp"]
        p = np.maximum(p_lin, 0.0)
        nf = note_frames[min(t0, T - 1)]
        q = np.concatenate([h, p, nf])
        if cfg.use_attention:
            w, c, acache = attention_forward(att, q, M, cum, K)
            cum = cum + w
        else:
            w = hard_band(s, r, T_in)
            c = w @ M
            acache = None
        x = np.concatenate([p, c, nf])
        a = np.concatenate([x, h])
        zr = _sigmoid(params["Wzr"] @ a + params["bzr"])
        z, rg = zr[:d], zr[d:]
        hn = params["Wnh"] @ h + params["bnh"]
        n = np.tanh(params["Wnx"] @ x + params["bn"] + rg * hn)
        h_new = (1.0 - z) * n + z * h
        hc = np.concatenate([h_new, c])
        o = (params["Wo"] @ hc + params["bo"]).reshape(r, cfg.d_ac)
        o[:, 0] += w @ pitch
        pre[t0:t0 + r] = o
        A[s] = w
        if keep_cache:
            steps.append(dict(y_prev=y_prev, p_lin=p_lin, q=q, w=w, acache=acache, x=x, a=a,
                              z=z, rg=rg, hn=hn, n=n, h=h, hc=hc))
        h = h_new
    post, win = _postnet(pre, params["Wpost"], params["bpost"])
    cache = dict(M=M, steps=steps, win=win) if keep_cache else None
    return ForwardResult(pre, post, A, T, cache)


def loss(pre: np.ndarray, post: np.ndarray, targets: np.ndarray, A: np.ndarray,
         g_sigma: float = DEFAULT_G_SIGMA, guided_weight: float = 1.0):
    """Summed pre/post-net MSE plus weighted guided attention loss.

    ``A`` is the frame-level (T, T_in) alignment. Pad frames past ``T`` are
    masked. Returns ``(total, parts, d_pre, d_post, d_A)``.
    """
    T = targets.shape[0]
    n = targets.size
    e_pre = pre[:T] - targets
    e_post = post[:T] - targets
    mse_pre = float((e_pre ** 2).sum() / n)
    mse_post = float((e_post ** 2).sum() / n)
    d_pre = np.zeros_like(pre)
    d_post = np.zeros_like(post)
    d_pre[:T] = 2.0 * e_pre / n
    d_post[:T] = 2.0 * e_post / n
    if guided_weight:
        gal, d_A = guided_attention_loss(A, g_sigma)
        d_A = guided_weight * d_A
    else:
        gal, d_A = 0.0, np.zeros_like(A)
    total = mse_pre + mse_post + guided_weight * gal
    return total, {"mse_pre": mse_pre, "mse_post": mse_post, "guided": gal}, d_pre, d_post, d_A


def backward(cfg: ModelConfig, params: dict[str, np.ndarray], enc_frames: np.ndarray,
             pitch: np.ndarray, fr: ForwardResult, d_pre: np.ndarray, d_post: np.ndarray,
             d_A_frames: np.ndarray) -> dict[str, np.ndarray]:
    """Gradients of the loss w.r.t. every parameter, given output gradients."""
    cache = fr.cache
    if cache is None:
        raise ValueError("forward must be run with keep_cache=True")
    r, d = cfg.reduction_factor, cfg.d_dec
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    M = cache["M"]
    T_in = M.shape[0]
    S = len(cache["steps"])

    # post-net
    d_pre = d_pre + d_post
    grads["bpost"] += d_post.sum(axis=0)
    grads["Wpost"] += np.einsum("ld,lck->dck", d_post, cache["win"])
    d_win = np.einsum("ld,dck->lck", d_post, params["Wpost"])
    k = params["Wpost"].shape[2]
    L = d_pre.shape[0]
    for j in range(k):
        # window j of output row l reads padded row l + j, i.e. pre row l + j - k//2
        lo = j - k // 2
        src = slice(max(0, -lo), min(L, L - lo))
        dst = slice(max(0, lo), min(L, L + lo))
        d_pre[dst] += d_win[src, :, j]

    d_A_steps = np.zeros((S, T_in))
    np.add.at(d_A_steps, np.arange(fr.T) // r, d_A_frames)

    att = attention_params(params, cfg)
    dM = np.zeros_like(M)
    dK = np.zeros((T_in, cfg.d_att)) if cfg.use_attention else None
    dh_next = np.zeros(d)
    d_cum = np.zeros(T_in)
    dx_dim = cfg.d_gru_in
    for s in range(S - 1, -1, -1):
        st = cache["steps"][s]
        t0 = s * r
        d_o = d_pre[t0:t0 + r]
        grads["bo"] += d_o.reshape(-1)
        grads["Wo"] += np.outer(d_o.reshape(-1), st["hc"])
        d_hc = params["Wo"].T @ d_o.reshape(-1)
        dh = d_hc[:d] + dh_next
        dc = d_hc[d:].copy()
        dw = d_o[:, 0].sum() * pitch + d_A_steps[s]

        # GRU
        z, rg, n, h_prev, hn = st["z"], st["rg"], st["n"], st["h"], st["hn"]
        dn = dh * (1.0 - z)
        dz = dh * (h_prev - n)
        dh_prev = dh * z
        dn_lin = dn * (1.0 - n ** 2)
        grads["Wnx"] += np.outer(dn_lin, st["x"])
        grads["bn"] += dn_lin
        dx = params["Wnx"].T @ dn_lin
        drg = dn_lin * hn
        dhn = dn_lin * rg
        grads["Wnh"] += np.outer(dhn, h_prev)
        grads["bnh"] += dhn
        dh_prev += params["Wnh"].T @ dhn
        dzr_lin = np.concatenate([dz * z * (1.0 - z), drg * rg * (1.0 - rg)])
        grads["Wzr"] += np.outer(dzr_lin, st["a"])
        grads["bzr"] += dzr_lin
        da = params["Wzr"].T @ dzr_lin
        dx += da[:dx_dim]
        dh_prev += da[dx_dim:]
        dp = dx[:cfg.d_prenet].copy()
        dc += dx[cfg.d_prenet:cfg.d_prenet + cfg.d_enc]

        if cfg.use_attention:
            dw = dw + d_cum
            dq, dZ, dM_direct, d_cum_prev = attention_backward(att, st["acache"], M, dw, dc, grads)
            dK += dZ
            dM += dM_direct
            if d_cum_prev is not None:
                d_cum = d_cum + d_cum_prev
            dh_prev += dq[:d]
            dp += dq[d:d + cfg.d_prenet]
        else:
            dM += np.outer(st["w"], dc)

        dp_lin = dp * (st["p_lin"] > 0)
        grads["Wp"] += np.outer(dp_lin, st["y_prev"])
        grads["bp"] += dp_lin
        dh_next = dh_prev

    if cfg.use_attention:
        grads["Wm"] += dK.T @ M
        dM += dK @ params["Wm"]
    dM_lin = dM * (1.0 - M ** 2)
    grads["We"] += dM_lin.T @ enc_frames
    grads["be"] += dM_lin.sum(axis=0)
    return grads


def loss_and_grads(cfg: ModelConfig, params: dict[str, np.ndarray], enc_frames: np.ndarray,
                   note_frames: np.ndarray, pitch: np.ndarray, targets: np.ndarray):
    """Teacher-forced loss and full parameter gradients for one utterance."""
    fr = forward(cfg, params, enc_frames, note_frames, pitch, targets, keep_cache=True)
    total, parts, d_pre, d_post, d_A = loss(fr.pre, fr.post, targets, fr.alignment,
                                            cfg.g_sigma, cfg.guided_weight)
    grads = backward(cfg, params, enc_frames, pitch, fr, d_pre, d_post, d_A)
    return total, parts, grads, fr
