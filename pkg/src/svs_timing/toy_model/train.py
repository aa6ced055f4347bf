"""Training loop, absorption experiment and checkpoint files."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional

import numpy as np

from ..attention import alignment_diagnostics
from ..frame_features import PITCH_CENTER, PITCH_SCALE, build_encoder_frames, build_note_frames, build_note_pitch
from ..score_io import read_matrix, write_matrix
from ..score_model import BoundaryMode, PhonemeBoundarySet
from .corpus import CorpusItem, SyntheticCorpus, perturb_boundaries
from .model import ModelConfig, forward, init_params, loss_and_grads, param_shapes, trainable_mask

METRIC_FIELDS = ("epoch", "loss", "diagonality", "boundary_error")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Prepared:
    enc: np.ndarray
    notes: np.ndarray
    pitch: np.ndarray
    targets: np.ndarray
    truth: PhonemeBoundarySet
    inputs: PhonemeBoundarySet


@dataclass
class Standardizer:
    """Per-column shift and scale for the encoder and note frames.

    The raw features mix one-hot columns with absolute frame positions in
    the tens of frames; unscaled, the latter saturate the encoder.
    """

    enc_mean: np.ndarray
    enc_std: np.ndarray
    note_mean: np.ndarray
    note_std: np.ndarray

    @classmethod
    def fit(cls, data: Iterable[Prepared]) -> "Standardizer":
        data = list(data)
        E = np.concatenate([d.enc for d in data])
        N = np.concatenate([d.notes for d in data])
        return cls(E.mean(0), _safe_std(E), N.mean(0), _safe_std(N))

    @classmethod
    def identity(cls, d_in: int, d_note: int) -> "Standardizer":
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(d_note), np.ones(d_note))

    def apply(self, d: Prepared) -> Prepared:
        return replace(d, enc=(d.enc - self.enc_mean) / self.enc_std,
                       notes=(d.notes - self.note_mean) / self.note_std)


def _safe_std(X: np.ndarray) -> np.ndarray:
    s = X.std(0)
    return np.where(s > 1e-8, s, 1.0)


def normalized_pitch(midi: np.ndarray) -> np.ndarray:
    return np.where(midi > 0, (midi - PITCH_CENTER) / PITCH_SCALE, 0.0)


def prepare(item: CorpusItem, boundaries: PhonemeBoundarySet, symbols: list[str],
            scaler: Optional[Standardizer] = None) -> Prepared:
    enc = build_encoder_frames(item.score, boundaries, symbols).data
    notes = build_note_frames(item.score).data
    pitch = normalized_pitch(build_note_pitch(item.score, boundaries))
    d = Prepared(enc, notes, pitch, item.acoustic, item.truth, boundaries)
    return scaler.apply(d) if scaler is not None else d


def config_for(corpus: SyntheticCorpus, **overrides) -> ModelConfig:
    """Model config whose input widths match the corpus feature layout."""
    it = corpus.items[0]
    enc = build_encoder_frames(it.score, it.truth, corpus.symbols)
    note = build_note_frames(it.score)
    return ModelConfig(**{"d_in": enc.layout.width, "d_note": note.layout.width,
                          "d_ac": it.acoustic.shape[1], **overrides})


@dataclass
class TrainResult:
    config: ModelConfig
    params: dict[str, np.ndarray]
    metrics: list[dict] = field(default_factory=list)
    mode: BoundaryMode = BoundaryMode.FORCED_ALIGN
    scaler: Optional[Standardizer] = None

    def __post_init__(self) -> None:
        if self.scaler is None:
            self.scaler = Standardizer.identity(self.config.d_in, self.config.d_note)

    def metrics_csv(self) -> str:
        return metrics_to_csv(self.metrics)


def metrics_to_csv(metrics: list[dict]) -> str:
    out = io.StringIO()
    out.write(",".join(METRIC_FIELDS) + "\n")
    for m in metrics:
        out.write(f"{m['epoch']},{m['loss']!r},{m['diagonality']!r},{m['boundary_error']!r}\n")
    return out.getvalue()


def alignment_of(cfg: ModelConfig, params: dict, data: Prepared) -> np.ndarray:
    """Frame-level alignment the model uses on ``data`` (identity without attention)."""
    if not cfg.use_attention:
        return np.eye(data.enc.shape[0])
    return forward(cfg, params, data.enc, data.notes, data.pitch, data.targets).alignment


def evaluate(cfg: ModelConfig, params: dict, data: Prepared) -> dict:
    return alignment_diagnostics(alignment_of(cfg, params, data), data.truth, data.inputs)


def train(config: ModelConfig, corpus: SyntheticCorpus, boundary_mode: BoundaryMode,
          params: Optional[dict] = None, log=None) -> TrainResult:
    """Mini-batch gradient descent with global-norm clipping.

    The frontier-detector attention units stay fixed (see
    :func:`~.model.trainable_mask`); everything else is trained.

    Inputs are standardized with statistics of this corpus under
    ``boundary_mode``. Item order is reshuffled every epoch from
    ``config.seed``. Metrics per epoch are means over all items of the loss
    and alignment diagnostics seen during that epoch's forward passes.
    """
    if len(corpus) == 0:
        raise ValueError("corpus is empty")
    symbols = corpus.symbols
    raw = [prepare(it, b, symbols) for it, b in zip(corpus.items, corpus.boundaries(boundary_mode))]
    scaler = Standardizer.fit(raw)
    data = [scaler.apply(d) for d in raw]
    rng = np.random.default_rng(config.seed)
    params = params if params is not None else init_params(config, rng)
    params = {k: v.copy() for k, v in params.items()}
    mask = trainable_mask(config)
    metrics = []
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(data))
        losses, diags, berrs = [], [], []
        for lo in range(0, len(order), config.batch_size):
            batch = order[lo:lo + config.batch_size]
            acc = {k: np.zeros_like(v) for k, v in params.items()}
            for i in batch:
                d = data[i]
                total, parts, grads, fr = loss_and_grads(config, params, d.enc, d.notes, d.pitch, d.targets)
                if not math.isfinite(total):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, item {i}: {parts}")
                A = fr.alignment if config.use_attention else np.eye(d.enc.shape[0])
                diag = alignment_diagnostics(A, d.truth, d.inputs)
                losses.append(total)
                diags.append(diag["diagonality"])
                berrs.append(diag["boundary_error"])
                for k in acc:
                    acc[k] += grads[k]
            norm = math.sqrt(sum(float((g ** 2).sum()) for g in acc.values())) / len(batch)
            scale = config.learning_rate / len(batch)
            if norm > config.clip_norm:
                scale *= config.clip_norm / norm
            for k in params:
                params[k] -= scale * (mask[k] * acc[k])
        m = {"epoch": epoch, "loss": float(np.mean(losses)), "diagonality": float(np.mean(diags)),
             "boundary_error": float(np.mean(berrs))}
        metrics.append(m)
        if log is not None:
            log(m)
    return TrainResult(config, params, metrics, boundary_mode, scaler)


def absorption_test(result: TrainResult, item: CorpusItem, perturbation_frames: int,
                    symbols: list[str]) -> dict:
    """Boundary error of attention vs. hard alignment on perturbed input boundaries.

    The true boundaries are shifted by ``perturbation_frames`` and the
    encoder features rebuilt from them. The hard-alignment baseline reads
    input frame ``t`` at output frame ``t``, so its error equals the shift
    wherever no phoneme had to be clamped.
    """
    if abs(perturbation_frames) > 20:
        raise ValueError("perturbation must be within +-20 frames")
    shifted = perturb_boundaries(item.truth, perturbation_frames)
    data = prepare(item, shifted, symbols, result.scaler)
    with_att = evaluate(replace(result.config, use_attention=True), result.params, data)
    without = alignment_diagnostics(np.eye(data.enc.shape[0]), item.truth, shifted)
    return {
        "boundary_error_with_attention": with_att["boundary_error"],
        "boundary_error_without": without["boundary_error"],
        "diagonality": with_att["diagonality"],
    }


# --------------------------------------------------------------------------
# checkpoints: one CSV per parameter block plus JSON manifests

_SCALER_FILES = {"enc": "scaler_enc.csv", "note": "scaler_note.csv"}


def _write(path: str, text: str) -> None:
    with open(path, "w") as fh:
        fh.write(text)


def save_checkpoint(path: str, result: TrainResult) -> None:
    os.makedirs(path, exist_ok=True)
    manifest = {"config": result.config.to_dict(), "mode": result.mode.value, "blocks": {},
                "scaler": dict(_SCALER_FILES)}
    for name, arr in result.params.items():
        fname = f"{name}.csv"
        _write(os.path.join(path, fname), write_matrix(arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr[None, :]))
        manifest["blocks"][name] = {"file": fname, "shape": list(arr.shape)}
    sc = result.scaler
    _write(os.path.join(path, _SCALER_FILES["enc"]), write_matrix(np.stack([sc.enc_mean, sc.enc_std])))
    _write(os.path.join(path, _SCALER_FILES["note"]), write_matrix(np.stack([sc.note_mean, sc.note_std])))
    _write(os.path.join(path, "manifest.json"), json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    _write(os.path.join(path, "metrics.csv"), result.metrics_csv())


def load_checkpoint(path: str) -> TrainResult:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    cfg = ModelConfig(**manifest["config"])
    shapes = param_shapes(cfg)
    params = {}
    for name, info in manifest["blocks"].items():
        with open(os.path.join(path, info["file"])) as fh:
            params[name] = read_matrix(fh.read()).reshape(info["shape"])
        if tuple(info["shape"]) != shapes[name]:
            raise ValueError(f"block {name} has shape {info['shape']}, config expects {shapes[name]}")
    missing = set(shapes) - set(params)
    if missing:
        raise ValueError(f"checkpoint lacks blocks {sorted(missing)}")
    scaler = None
    if "scaler" in manifest:
        with open(os.path.join(path, manifest["scaler"]["enc"])) as fh:
            em, es = read_matrix(fh.read())
        with open(os.path.join(path, manifest["scaler"]["note"])) as fh:
            nm, ns = read_matrix(fh.read())
        scaler = Standardizer(em, es, nm, ns)
    metrics = []
    mpath = os.path.join(path, "metrics.csv")
    if os.path.exists(mpath):
        with open(mpath) as fh:
            rows = fh.read().splitlines()[1:]
        for row in rows:
            e, l, dg, be = row.split(",")
            metrics.append({"epoch": int(e), "loss": float(l), "diagonality": float(dg), "boundary_error": float(be)})
    return TrainResult(cfg, params, metrics, BoundaryMode(manifest["mode"]), scaler)
