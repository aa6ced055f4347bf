"""Command-line front end.

Every command writes a run manifest (JSON) next to its main output that
records the command, all flags, the seed, SHA-256 digests of the inputs,
the output paths and the tool version. Nothing time-dependent goes into
it, so identical manifests mean identical outputs.

Exit codes: 0 success, 1 runtime or contract error, 2 usage error.
"""

from __future__ import annotations

import functools
import hashlib
import json
import os
import re
from dataclasses import dataclass, field, fields
from fractions import Fraction
from typing import Optional

import click

from . import __version__
from .attention import to_pgm
from .frame_features import build_encoder_frames, build_note_frames, build_note_pitch
from .score_io import ParseError, parse_labels, parse_score, write_labels, write_matrix
from .score_model import BoundaryMode
from .timing import (
    DEFAULT_MAX_CONSONANT_FRAMES,
    DurationStats,
    TimeLagPredictor,
    estimate_duration_stats,
    model_boundaries,
    pseudo_boundaries,
)
from .toy_model.corpus import CorpusSpec, gen_synthetic_corpus
from .toy_model.train import (
    TrainingDiverged,
    absorption_test,
    alignment_of,
    config_for,
    load_checkpoint,
    prepare,
    save_checkpoint,
    train,
)

CORPUS_FILE = "corpus.json"


@dataclass
class RunManifest:
    command: str
    flags: dict
    seed: Optional[int] = None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__

    def to_json(self) -> str:
        return json.dumps({f.name: getattr(self, f.name) for f in fields(self)}, indent=1, sort_keys=True) + "\n"


def _digest(path: str) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _read(path: str) -> str:
    with open(path, encoding="utf-8") as fh:
        return fh.read()


def _write(path: str, text: str) -> str:
    d = os.path.dirname(path)
    if d:
        os.makedirs(d, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def _emit_manifest(path: str, command: str, flags: dict, inputs: list[str], outputs: list[str],
                   seed: Optional[int] = None) -> None:
    m = RunManifest(command, {k: v for k, v in sorted(flags.items())}, seed,
                    {p: _digest(p) for p in inputs}, list(outputs))
    _write(path, m.to_json())


def _guard(fn):
    """Map domain failures to exit code 1; click keeps 2 for usage errors."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit):
            raise
        except (ValueError, KeyError, OSError, TrainingDiverged) as exc:
            raise click.ClickException(f"{type(exc).__name__}: {exc}") from exc
    return wrapper


class FrameCount(click.ParamType):
    """Frames as a plain integer, or milliseconds written with an ``ms`` suffix."""

    name = "frames"

    def __init__(self, frame_shift_ms: Fraction = Fraction(5)):
        self.frame_shift_ms = frame_shift_ms

    def convert(self, value, param, ctx):
        if isinstance(value, int):
            return value
        text = str(value).strip()
        m = re.fullmatch(r"(\d+(?:\.\d+)?)ms", text)
        if m:
            frames = Fraction(m.group(1)) / self.frame_shift_ms
            if frames.denominator != 1:
                self.fail(f"{text} is not a whole number of {self.frame_shift_ms} ms frames", param, ctx)
            return int(frames)
        if re.fullmatch(r"\d+", text):
            return int(text)
        self.fail(f"expected frames (e.g. 30) or milliseconds (e.g. 150ms), got {text!r}", param, ctx)


def _load_stats(path: str) -> tuple[DurationStats, TimeLagPredictor]:
    doc = json.loads(_read(path))
    if not isinstance(doc, dict) or "durations" not in doc:
        raise ParseError("stats file needs a 'durations' table", path)
    return DurationStats.from_json(doc["durations"]), TimeLagPredictor.from_json(doc.get("lags", {}))


@click.group()
@click.version_option(__version__, prog_name="svs-timing")
def main() -> None:
    """Score timing, frame features and the toy attention model."""


@main.command()
@click.argument("pairs", nargs=-1, required=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Stats JSON to write.")
def stats(pairs, out):
    """Estimate duration and onset-deviation tables from SCORE LABELS pairs."""
    if len(pairs) % 2:
        raise click.UsageError("arguments must come in SCORE LABELS pairs")
    _stats(pairs, out)


@_guard
def _stats(pairs, out):
    scored = []
    for sp, lp in zip(pairs[::2], pairs[1::2]):
        score = parse_score(_read(sp))
        scored.append((score, parse_labels(_read(lp), score.grid, score=score)))
    durs = estimate_duration_stats(b for _, b in scored)
    lags = TimeLagPredictor.fit(scored)
    _write(out, json.dumps({"durations": durs.to_json(), "lags": lags.to_json()}, indent=1, sort_keys=True) + "\n")
    _emit_manifest(out + ".manifest.json", "stats", {"out": out}, list(pairs), [out])


@main.command()
@click.argument("score_path", metavar="SCORE", type=click.Path(exists=True, dir_okay=False))
@click.option("--mode", required=True, type=click.Choice([m.value for m in BoundaryMode]))
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False),
              help="Forced-alignment labels (fal mode).")
@click.option("--stats", "stats_path", type=click.Path(exists=True, dir_okay=False),
              help="Stats JSON from the 'stats' command (model mode).")
@click.option("--max-consonant-frames", type=FrameCount(), default=DEFAULT_MAX_CONSONANT_FRAMES,
              show_default=True, help="Consonant cap for pseudo mode; frames or '<n>ms'.")
@click.option("--out", required=True, type=click.Path(dir_okay=False), help="Label file to write.")
def boundaries(score_path, mode, labels_path, stats_path, max_consonant_frames, out):
    """Phoneme boundaries for SCORE from one of the three sources."""
    if mode == "fal" and not labels_path:
        raise click.UsageError("--mode fal requires --labels")
    if mode == "model" and not stats_path:
        raise click.UsageError("--mode model requires --stats")
    if max_consonant_frames < 1:
        raise click.BadParameter("must be at least 1 frame", param_hint="--max-consonant-frames")
    _boundaries(score_path, mode, labels_path, stats_path, max_consonant_frames, out)


@_guard
def _boundaries(score_path, mode, labels_path, stats_path, max_consonant_frames, out):
    score = parse_score(_read(score_path))
    inputs = [score_path]
    if mode == "fal":
        b = parse_labels(_read(labels_path), score.grid, score=score)
        inputs.append(labels_path)
    elif mode == "model":
        durs, lags = _load_stats(stats_path)
        b = model_boundaries(score, durs, lags)
        inputs.append(stats_path)
    else:
        b = pseudo_boundaries(score, max_consonant_frames)
    _write(out, write_labels(b, score.grid))
    flags = {"mode": mode, "labels": labels_path, "stats": stats_path,
             "max_consonant_frames": max_consonant_frames, "out": out}
    _emit_manifest(out + ".manifest.json", "boundaries", flags, inputs, [out])


@main.command()
@click.argument("score_path", metavar="SCORE", type=click.Path(exists=True, dir_okay=False))
@click.argument("labels_path", metavar="LABELS", type=click.Path(exists=True, dir_okay=False))
@click.option("--out", "prefix", required=True, help="Output prefix for the matrices.")
@_guard
def frames(score_path, labels_path, prefix):
    """Encoder, note and pitch matrices for SCORE under LABELS."""
    score = parse_score(_read(score_path))
    b = parse_labels(_read(labels_path), score.grid, score=score)
    enc = build_encoder_frames(score, b)
    notes = build_note_frames(score)
    pitch = build_note_pitch(score, b)
    outs = [
        _write(f"{prefix}.encoder.csv", write_matrix(enc.data)),
        _write(f"{prefix}.encoder.layout.json", enc.layout.to_json()),
        _write(f"{prefix}.notes.csv", write_matrix(notes.data)),
        _write(f"{prefix}.notes.layout.json", notes.layout.to_json()),
        _write(f"{prefix}.pitch.csv", write_matrix(pitch[:, None])),
    ]
    _emit_manifest(f"{prefix}.manifest.json", "frames", {"out": prefix}, [score_path, labels_path], outs)


def _load_config(path: Optional[str]) -> tuple[dict, dict]:
    if not path:
        return {}, {}
    doc = json.loads(_read(path))
    return doc.get("corpus", {}), doc.get("model", {})


def _corpus_from(doc: dict):
    spec = CorpusSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.get("spec", {}).items()})
    return gen_synthetic_corpus(int(doc["items"]), int(doc["seed"]), spec)


@main.command("train")
@click.option("--mode", required=True, type=click.Choice([m.value for m in BoundaryMode]))
@click.option("--no-attention", is_flag=True, help="Hard alignment baseline.")
@click.option("--seed", type=int, default=0, show_default=True, help="Seeds both the corpus and the model.")
@click.option("--items", type=click.IntRange(min=1), default=50, show_default=True, help="Synthetic corpus size.")
@click.option("--epochs", type=click.IntRange(min=1), default=None, help="Override the model config.")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              help="JSON with optional 'corpus' (CorpusSpec fields) and 'model' (ModelConfig fields) objects.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Checkpoint directory.")
def train_cmd(mode, no_attention, seed, items, epochs, config_path, out):
    """Train the toy model on a synthetic corpus and write a checkpoint."""
    _train(mode, no_attention, seed, items, epochs, config_path, out)


@_guard
def _train(mode, no_attention, seed, items, epochs, config_path, out):
    corpus_over, model_over = _load_config(config_path)
    corpus_doc = {"items": items, "seed": seed, "spec": corpus_over}
    corpus = _corpus_from(corpus_doc)
    over = {**model_over, "seed": seed, "use_attention": not no_attention}
    if epochs is not None:
        over["epochs"] = epochs
    cfg = config_for(corpus, **over)
    result = train(cfg, corpus, BoundaryMode(mode), log=lambda m: click.echo(
        f"epoch {m['epoch']:3d}  loss {m['loss']:.5f}  diag {m['diagonality']:.4f}  "
        f"berr {m['boundary_error']:.3f}", err=True))
    save_checkpoint(out, result)
    _write(os.path.join(out, CORPUS_FILE), json.dumps(corpus_doc, indent=1, sort_keys=True) + "\n")
    flags = {"mode": mode, "no_attention": no_attention, "items": items, "epochs": epochs,
             "config": config_path, "out": out}
    _emit_manifest(os.path.join(out, "run.manifest.json"), "train", flags,
                   [config_path] if config_path else [], sorted(os.listdir(out)), seed)


def _checkpoint_item(checkpoint: str, item: int):
    result = load_checkpoint(checkpoint)
    corpus = _corpus_from(json.loads(_read(os.path.join(checkpoint, CORPUS_FILE))))
    if not 0 <= item < len(corpus):
        raise click.BadParameter(f"corpus has {len(corpus)} items", param_hint="--item")
    return result, corpus, corpus.items[item]


def _checkpoint_inputs(checkpoint: str) -> list[str]:
    return [os.path.join(checkpoint, f) for f in ("manifest.json", CORPUS_FILE)]


@main.command()
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.option("--item", type=int, default=0, show_default=True, help="Corpus item index.")
@click.option("--perturb", type=FrameCount(), default=10, show_default=True,
              help="Boundary shift in frames (or '<n>ms'), at most 20 frames.")
@click.option("--negative", is_flag=True, help="Shift boundaries earlier instead of later.")
@click.option("--out", type=click.Path(dir_okay=False), help="Report JSON; stdout when omitted.")
@_guard
def absorb(checkpoint, item, perturb, negative, out):
    """Attention vs hard-alignment boundary error on perturbed input boundaries."""
    result, corpus, it = _checkpoint_item(checkpoint, item)
    shift = -perturb if negative else perturb
    report = absorption_test(result, it, shift, corpus.symbols)
    report = {"item": item, "perturbation_frames": shift, **report}
    text = json.dumps(report, indent=1, sort_keys=True) + "\n"
    if out:
        _write(out, text)
        flags = {"item": item, "perturb": perturb, "negative": negative, "out": out}
        _emit_manifest(out + ".manifest.json", "absorb", flags, _checkpoint_inputs(checkpoint), [out],
                       result.config.seed)
    else:
        click.echo(text, nl=False)


@main.command("export-attention")
@click.argument("checkpoint", type=click.Path(exists=True, file_okay=False))
@click.option("--item", type=int, default=0, show_default=True, help="Corpus item index.")
@click.option("--format", "fmt", type=click.Choice(["csv", "pgm"]), default="csv", show_default=True)
@click.option("--out", required=True, type=click.Path(dir_okay=False))
@_guard
def export_attention(checkpoint, item, fmt, out):
    """Frame-level alignment matrix of one corpus item under the checkpoint."""
    result, corpus, it = _checkpoint_item(checkpoint, item)
    b = corpus.boundaries(result.mode)[item]
    data = prepare(it, b, corpus.symbols, result.scaler)
    A = alignment_of(result.config, result.params, data)
    _write(out, write_matrix(A) if fmt == "csv" else to_pgm(A))
    _emit_manifest(out + ".manifest.json", "export-attention", {"item": item, "format": fmt, "out": out},
                   _checkpoint_inputs(checkpoint), [out], result.config.seed)


if __name__ == "__main__":
    main()
