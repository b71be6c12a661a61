"""``rigforge`` command line: one subcommand per pipeline stage.

    rigforge <transfer|calibrate|color|compose|face> [mode] --config PATH
             [--seed N] [--out DIR] [key=value ...]

Configs are JSON or YAML. A config may hold one section per command (keyed by
the command name) next to shared ``seed``/``out`` keys, or be the section
itself. ``key=value`` overrides and ``--seed``/``--out`` win over the file.
Relative input paths resolve against the config file's directory.

Exit codes: 0 success, 2 bad input, 3 runtime failure. Failures also print a
one-line JSON object ``{"error": {...}}`` on stderr.
"""

from __future__ import annotations

import argparse
import dataclasses
import glob
import hashlib
import json
import logging
import os
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__, io
from .errors import RigforgeError, ValidationError

log = logging.getLogger("rigforge")

COMMANDS = ("transfer", "calibrate", "color", "compose", "face")
MODES = {"color": ("train", "correct", "blend"), "face": ("train", "drive")}


# -- configs ----------------------------------------------------------------------


@dataclass
class TransferRun:
    initial: str = ""
    detail: str = ""
    landmarks: str = ""
    mask: str = ""
    landmark_set: str = "alignment"
    detail_landmark_set: str | None = None
    correspondence: str | None = None
    with_scale: bool = False
    rings: int = 3
    smooth_iterations: int = 10
    smooth_lambda: float = 0.5
    knn: int = 16
    precision: int = 9
    seed: int = 0
    out: str = "rigforge-out"


@dataclass
class CalibrateRun:
    rig: str = ""
    neutral: str = ""
    target: str = ""
    residual_mask: str | None = None
    lr: float = 1e-2
    max_iters: int = 2000
    tol: float = 1e-6
    loss_floor: float = 1e-14
    optimize_translations: bool = True
    optimize_rotations: bool = False
    step_clamp: float = 0.02
    step_halving: bool = True
    residual_tol: float = 0.0
    seed: int = 0
    out: str = "rigforge-out"


@dataclass
class ColorRun:
    mode: str = "train"
    preset: str | None = "gamma-matrix"
    pairs: str | None = None
    n_pairs: int = 10_000
    jitter: float = 1.0
    hidden: int = 32
    lr: float = 1e-2
    batch_size: int = 256
    epochs: int = 600
    holdout: float = 0.1
    eval_colors: int = 1000
    model: str | None = None
    texture: str | None = None
    original: str | None = None
    relit: str | None = None
    alpha: float | None = None
    seed: int = 0
    out: str = "rigforge-out"


@dataclass
class ComposeRun:
    library: str = ""
    audio: str = ""
    category: int | None = None
    segments: str | list = "auto"
    categories: list | None = None
    min_segment: int = 4
    max_segment: int = 8
    lam1: float = 1.0
    lam2: float = 1.0
    metric: str = "sqeuclidean"
    bvh: bool = True
    seed: int = 0
    out: str = "rigforge-out"


@dataclass
class FaceRun:
    mode: str = "train"
    features: str | list = ""
    targets: str | list | None = None
    model: str | None = None
    events: str | None = None
    templates: str | None = None
    window: int = 4
    hidden: list = field(default_factory=lambda: [128, 128])
    lr: float = 3e-3
    epochs: int = 150
    batch_size: int = 256
    holdout: float = 0.2
    encoding: str = "csv"
    seed: int = 0
    out: str = "rigforge-out"


RUNS = {"transfer": TransferRun, "calibrate": CalibrateRun, "color": ColorRun, "compose": ComposeRun, "face": FaceRun}
PATH_KEYS = {"initial", "detail", "landmarks", "mask", "correspondence", "rig", "neutral", "target", "residual_mask",
             "pairs", "model", "texture", "original", "relit", "library", "audio", "features", "targets", "events",
             "templates"}


def _load_config(path: Path | None) -> dict:
    if path is None:
        return {}
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    text = path.read_text()
    try:
        if path.suffix in (".yaml", ".yml"):
            import yaml

            doc = yaml.safe_load(text) or {}
        else:
            doc = json.loads(text)
    except Exception as exc:
        raise ValidationError(f"{path}: cannot parse config ({exc})") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a mapping")
    return doc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _coerce(name: str, value, default):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"config key {name!r} must be true/false, got {value!r}")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ValidationError(f"config key {name!r} must be an integer, got {value!r}")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ValidationError(f"config key {name!r} must be a number, got {value!r}")
        return float(value)
    return value


def build_run(command: str, doc: dict, overrides: dict, base: Path, override_base: Path | None = None):
    """Merge config and overrides into a run; relative paths resolve against
    ``base`` when they come from the file and ``override_base`` (default
    ``base``) when they come from the command line."""
    cls = RUNS[command]
    section = dict(doc)
    if isinstance(doc.get(command), dict):
        section = {k: doc[k] for k in ("seed", "out") if k in doc}
        section.update(doc[command])
    for other in COMMANDS:
        if other != command and isinstance(section.get(other), dict):
            section.pop(other)
    section.update(overrides)
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(section) - set(known))
    if unknown:
        raise ValidationError(f"unknown config keys for {command}: {unknown}")
    values = {}
    for name, f in known.items():
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        values[name] = _coerce(name, section.get(name, default), default)
    run = cls(**values)
    for name in PATH_KEYS & set(known):
        v = getattr(run, name)
        root = override_base if name in overrides and override_base is not None else base
        if isinstance(v, str) and v:
            setattr(run, name, str(root / v) if not Path(v).is_absolute() else v)
        elif isinstance(v, list):
            setattr(run, name, [str(root / p) if not Path(p).is_absolute() else p for p in v])
    # the output directory is not part of the run's identity
    return run, {k: values[k] for k in sorted(values) if k != "out"}


def config_hash(resolved: dict) -> str:
    return hashlib.sha256(io.dumps(resolved).encode()).hexdigest()


class Context:
    def __init__(self, command: str, mode: str | None, resolved: dict, seed: int, out: Path):
        self.out = out
        self.provenance = {
            "tool": "rigforge",
            "version": __version__,
            "command": command if mode is None else f"{command} {mode}",
            "config_hash": config_hash(resolved),
            "seed": seed,
        }

    def header_line(self) -> str:
        p = self.provenance
        return f"{p['tool']} {p['version']} {p['command']} config={p['config_hash']} seed={p['seed']}"

    def write_json(self, name: str, doc: dict) -> Path:
        path = self.out / name
        io.write_json(path, {"provenance": self.provenance, **doc})
        return path


def _required(run, *names):
    for n in names:
        if not getattr(run, n):
            raise ValidationError(f"config key {n!r} is required")


def _expand(paths) -> list[str]:
    if isinstance(paths, str):
        found = sorted(glob.glob(paths))
        if not found:
            raise ValidationError(f"file not found: {paths}")
        return found
    return list(paths or [])


# -- commands ----------------------------------------------------------------------


def cmd_transfer(run: TransferRun, ctx: Context) -> None:
    from . import mesh as M

    _required(run, "initial", "detail", "landmarks", "mask")
    initial = M.read_obj(run.initial)
    detail = M.read_obj(run.detail)
    mask = M.read_mask(run.mask, initial)
    sets = M.read_landmarks(run.landmarks)
    names = [run.landmark_set, run.detail_landmark_set or run.landmark_set]
    for n in names:
        if n not in sets:
            raise ValidationError(f"{run.landmarks}: no landmark set {n!r}")
    src, dst = sets[names[1]].points(detail), sets[names[0]].points(initial)
    transform = M.rigid_align(src, dst, with_scale=run.with_scale)
    aligned = detail.with_vertices(transform.apply(detail.vertices))
    if run.correspondence:
        corr = M.read_correspondence(run.correspondence)
    else:
        corr = M.project_correspondence(initial, aligned, np.flatnonzero(mask.replaceable), k=run.knn)
    moved = M.transfer_details(initial, aligned, mask, corr)
    pre = M.max_laplacian(moved, mask.transition)
    result = M.smooth_transition(moved, mask, run.smooth_iterations, run.smooth_lambda)
    M.write_obj(ctx.out / "transfer.obj", result, run.precision, [ctx.header_line()])
    disp = np.linalg.norm(result.vertices - initial.vertices, axis=1)
    stats = {}
    for label, name in ((M.FIXED, "fixed"), (M.REPLACEABLE, "replaceable"), (M.TRANSITION, "transition")):
        sel = mask.labels == label
        stats[name] = {"count": int(sel.sum()), "max_displacement": float(disp[sel].max()) if sel.any() else 0.0}
    ctx.write_json("transfer_report.json", {
        "schema": "rigforge.transfer-report/1",
        "alignment": {"rmse": transform.rmse, "scale": transform.scale, "rotation": transform.rotation.tolist(),
                      "translation": transform.translation.tolist()},
        "regions": stats,
        "transition_laplacian": {"before_smoothing": pre, "after_smoothing": M.max_laplacian(result, mask.transition)},
        "smoothing": {"iterations": run.smooth_iterations, "lambda": run.smooth_lambda},
    })


def cmd_calibrate(run: CalibrateRun, ctx: Context) -> None:
    from . import mesh as M
    from . import skeleton as S

    _required(run, "rig", "neutral", "target")
    rig, binding, overlap = S.read_rig(run.rig)
    neutral, target = M.read_obj(run.neutral), M.read_obj(run.target)
    residual_mask = None
    if run.residual_mask:
        residual_mask = M.read_mask(run.residual_mask, neutral).labels != M.FIXED
    cfg = S.CalibrationConfig(
        lr=run.lr, max_iters=run.max_iters, tol=run.tol, loss_floor=run.loss_floor,
        optimize_translations=run.optimize_translations, optimize_rotations=run.optimize_rotations,
        step_clamp=run.step_clamp, step_halving=run.step_halving,
    )
    result = S.calibrate_skeleton(rig, binding, neutral, target, overlap, cfg, residual_mask)
    if not result.converged:
        log.warning("calibration stopped after %d iterations without meeting tol", result.iterations)
    ctx.write_json("calibration.json", S.result_document(result, run.residual_tol))
    lines = [f"# {ctx.header_line()}", "iteration,loss"]
    lines += [f"{i},{v:.17g}" for i, v in enumerate(result.trace)]
    (ctx.out / "trace.csv").write_text("\n".join(lines) + "\n")


def cmd_color(run: ColorRun, ctx: Context) -> None:
    from . import color as C

    text = {"rigforge": json.dumps(ctx.provenance, sort_keys=True)}
    if run.mode == "train":
        if run.pairs:
            pairs = C.read_pairs_csv(run.pairs)
        elif run.preset:
            pairs = C.generate_training_pairs(C.get_oracle(run.preset), run.n_pairs, run.seed, run.jitter)
        else:
            raise ValidationError("color train needs 'pairs' or 'preset'")
        cfg = C.ColorTrainConfig(run.hidden, run.lr, run.batch_size, run.epochs, run.holdout, run.seed)
        model = C.train_corrector(pairs, cfg)
        doc = model.to_dict()
        doc["provenance"] = ctx.provenance
        io.write_json(ctx.out / "color_model.json", doc)
        report = {"schema": "rigforge.color-report/1", "heldout_mae": model.meta["heldout_mae"],
                  "best_epoch": model.meta["best_epoch"], "n_pairs": len(pairs)}
        if run.preset and not run.pairs:
            err = C.round_trip_errors(model, C.get_oracle(run.preset), C.interior_colors(run.eval_colors, run.seed + 1))
            report["round_trip"] = {
                "n": len(err), "max": float(err.max()), "mean": float(err.mean()),
                "frac_below_2_255": float((err < 2 / 255).mean()),
            }
        ctx.write_json("color_report.json", report)
    elif run.mode == "correct":
        _required(run, "model", "texture")
        model = C.ColorCorrector.load(run.model)
        original = C.read_png(run.texture)
        corrected = C.correct_texture(model, original)
        alpha = 1.0 if run.alpha is None else run.alpha
        C.write_png(ctx.out / "corrected.png", C.blend_relit(original, corrected, alpha), text)
    else:
        _required(run, "original", "relit")
        alpha = 0.7 if run.alpha is None else run.alpha
        out = C.blend_relit(C.read_png(run.original), C.read_png(run.relit), alpha)
        C.write_png(ctx.out / "blended.png", out, text)


def cmd_compose(run: ComposeRun, ctx: Context) -> None:
    from . import motion as Mo

    _required(run, "library", "audio")
    lib = Mo.read_library(run.library)
    audio, _ = io.read_matrix(run.audio)
    if len(audio) == 0:
        raise ValidationError(f"{run.audio}: audio embedding sequence is empty")
    if audio.shape[1] != lib.embedding_dim:
        raise ValidationError(f"audio dimension {audio.shape[1]} does not match clip embeddings ({lib.embedding_dim})")
    graph = Mo.build_graph(lib, lam1=run.lam1, lam2=run.lam2)
    if run.category is not None:
        segments = [(int(run.category), len(audio))]
    elif isinstance(run.segments, list):
        segments = [(int(c), int(k)) for c, k in run.segments]
    elif run.segments == "auto":
        cats = run.categories or sorted({c for c in graph.categories if c is not None})
        segments = Mo.plan_segments(len(audio), cats, run.seed, run.min_segment, run.max_segment)
    else:
        raise ValidationError(f"segments must be 'auto' or a list of [category, windows], got {run.segments!r}")
    res = Mo.compose_from_audio(lib, graph, audio, segments, run.seed, run.metric)
    ctx.write_json("track.json", Mo.track_document(res.track, lib.skeleton))
    if run.bvh:
        (ctx.out / "track.bvh").write_text(Mo.track_bvh(res.track, lib.skeleton))
    audio_sum = float(sum(s["audio_cost"] for s in res.steps))
    edge_sum = float(sum(s["edge_cost"] for s in res.steps))
    ctx.write_json("cost.json", {
        "schema": "rigforge.compose-cost/1",
        "segments": [[c, k] for c, k in segments],
        "path": res.path,
        "steps": res.steps,
        "audio_total": audio_sum,
        "edge_total": edge_sum,
        "total": res.cost,
    })


def cmd_face(run: FaceRun, ctx: Context) -> None:
    from . import face as F

    if run.mode == "train":
        feats = [F.read_feature_track(p) for p in _expand(run.features)]
        targs = [F.read_coefficient_track(p) for p in _expand(run.targets)]
        cfg = F.FaceTrainConfig(run.window, tuple(run.hidden), run.lr, run.epochs, run.batch_size, run.holdout, run.seed)
        model = F.train_face_model(feats, targs, cfg)
        doc = model.to_dict()
        doc["provenance"] = ctx.provenance
        doc["controls"] = list(targs[0].controls)
        io.write_json(ctx.out / "face_model.json", doc)
        ctx.write_json("face_report.json", {
            "schema": "rigforge.face-report/1",
            "n_tracks": len(feats),
            **{k: model.meta[k] for k in ("train_objective", "best_epoch", "heldout_rec_per_entry",
                                          "heldout_vel_per_entry") if k in model.meta},
        })
        return
    _required(run, "model", "features")
    model_doc = io.read_json(run.model, "rigforge.face-model")
    model = F.FaceRegressor.from_dict(model_doc)
    paths = _expand(run.features)
    if len(paths) != 1:
        raise ValidationError("face drive takes exactly one feature track")
    feats = F.read_feature_track(paths[0])
    driven = track = F.drive_face(model, feats, controls=model_doc.get("controls"))
    skipped = []
    if run.events:
        templates = F.read_templates(run.templates) if run.templates else []
        track, skipped = F.apply_interjections(track, F.read_events(run.events), templates)
    F.write_coefficient_track(ctx.out / "coefficients.json", track, run.encoding)
    header = io.read_json(ctx.out / "coefficients.json")
    header["provenance"] = ctx.provenance
    io.write_json(ctx.out / "coefficients.json", header)
    report = {"schema": "rigforge.drive-report/1", "frames": track.n_frames, "controls": len(track.controls),
              "skipped_events": skipped}
    if run.targets:
        truth = [F.read_coefficient_track(p) for p in _expand(run.targets)]
        if len(truth) != 1:
            raise ValidationError("face drive compares against exactly one target track")
        # scored before interjections, which deliberately override frames
        report["rec_loss"] = float(F.rec_loss(driven, truth[0]))
        report["vel_loss"] = float(F.vel_loss(driven, truth[0]))
        report["rec_per_entry"] = report["rec_loss"] / driven.values.size
    ctx.write_json("drive_report.json", report)


HANDLERS = {"transfer": cmd_transfer, "calibrate": cmd_calibrate, "color": cmd_color, "compose": cmd_compose,
            "face": cmd_face}


# -- entry point -------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message)


def _parser() -> argparse.ArgumentParser:
    p = _Parser(prog="rigforge", description="Digital-human asset pipeline stages.")
    p.add_argument("--version", action="version", version=f"rigforge {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("args", nargs="*", help="optional mode (color: train|correct|blend, face: train|drive) and key=value overrides")
    p.add_argument("--config", type=Path, help="JSON or YAML run config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path)
    return p


def _setup_logging() -> None:
    level = os.environ.get("RIGFORGE_LOG", "WARNING").upper()
    numeric = {"0": "ERROR", "1": "WARNING", "2": "INFO", "3": "DEBUG"}.get(level, level)
    logging.basicConfig(level=getattr(logging, numeric, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _fail(exc: Exception, code: int) -> int:
    err = {"type": type(exc).__name__, "message": str(exc), "exit_code": code}
    if hasattr(exc, "step"):
        err["step"] = exc.step
    if getattr(exc, "diagnostics", None):
        err["diagnostics"] = exc.diagnostics
    print(f"rigforge: error: {exc}", file=sys.stderr)
    print(json.dumps({"error": err}, sort_keys=True, default=str), file=sys.stderr)
    return code


def run_command(argv: list[str]) -> int:
    args = _parser().parse_intermixed_args(argv)
    mode, overrides = None, {}
    for token in args.args:
        if "=" in token:
            key, value = token.split("=", 1)
            overrides[key] = _parse_value(value)
        elif mode is None and token in MODES.get(args.command, ()):
            mode = token
        else:
            raise ValidationError(f"unexpected argument {token!r}")
    if args.command in MODES:
        if mode is not None:
            overrides["mode"] = mode
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = str(args.out)
    doc = _load_config(args.config)
    base = args.config.parent if args.config else Path.cwd()
    run, resolved = build_run(args.command, doc, overrides, base, Path.cwd())
    if args.command in MODES and run.mode not in MODES[args.command]:
        raise ValidationError(f"{args.command} mode must be one of {MODES[args.command]}, got {run.mode!r}")
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    import torch

    torch.manual_seed(run.seed)
    torch.set_num_threads(1)
    np.random.seed(run.seed % 2**32)
    ctx = Context(args.command, getattr(run, "mode", None), resolved, run.seed, out)
    log.info("%s: config %s", ctx.provenance["command"], ctx.provenance["config_hash"])
    HANDLERS[args.command](run, ctx)
    return 0


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    try:
        return run_command(sys.argv[1:] if argv is None else argv)
    except RigforgeError as exc:
        return _fail(exc, exc.exit_code)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        return _fail(exc, 2)
    except Exception as exc:  # runtime failure inside a stage
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
