"""Speech-driven facial control-rig coefficients.

A per-frame decoder looks at a fixed window of audio features around each
frame and predicts every control at once, so a whole clip is produced by a
single batched forward pass with no dependence on earlier predictions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import io
from .errors import DimensionError, FormatError, ModelError, TrainingFailureError, ValidationError

log = logging.getLogger(__name__)


@dataclass
class RigCoefficientTrack:
    values: np.ndarray  # (T, N) in [0, 1]
    rate: float = 50.0
    controls: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.values) == 0:
            raise DimensionError(f"coefficient track must be (T>=1, N), got {self.values.shape}")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValidationError("coefficients must lie in [0, 1]")
        if not self.controls:
            self.controls = [f"ctrl{i}" for i in range(self.values.shape[1])]
        if len(self.controls) != self.values.shape[1]:
            raise DimensionError("control-name table does not match coefficient width")

    @property
    def n_frames(self):
        return len(self.values)


@dataclass
class AudioFeatureTrack:
    values: np.ndarray  # (T, D)
    rate: float = 50.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.values) == 0:
            raise DimensionError(f"feature track must be (T>=1, D), got {self.values.shape}")

    @property
    def n_frames(self):
        return len(self.values)


def _values(track):
    return track.values if isinstance(track, (RigCoefficientTrack, AudioFeatureTrack)) else track


def rec_loss(predicted, truth):
    """Sum of squared coefficient errors over frames and controls."""
    p, t = _values(predicted), _values(truth)
    if tuple(p.shape) != tuple(t.shape):
        raise DimensionError(f"track shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    return ((p - t) ** 2).sum()


def vel_loss(predicted, truth):
    """Sum of squared differences between predicted and true frame-to-frame steps.

    Starts at the second frame; a single-frame track scores 0.
    """
    p, t = _values(predicted), _values(truth)
    if tuple(p.shape) != tuple(t.shape):
        raise DimensionError(f"track shapes differ: {tuple(p.shape)} vs {tuple(t.shape)}")
    if p.shape[0] < 2:
        return (p * 0).sum()
    return (((p[1:] - p[:-1]) - (t[1:] - t[:-1])) ** 2).sum()


def window_features(features, w: int) -> np.ndarray:
    """Stack each frame with its w neighbours on either side, replicating edge frames."""
    f = np.asarray(features, dtype=np.float64)
    T = len(f)
    idx = np.clip(np.arange(T)[:, None] + np.arange(-w, w + 1)[None, :], 0, T - 1)
    return f[idx].reshape(T, -1)


@dataclass
class FaceTrainConfig:
    window: int = 4
    hidden: tuple[int, ...] = (128, 128)
    lr: float = 3e-3  # one-cycle peak
    epochs: int = 150
    batch_size: int = 256
    holdout: float = 0.2
    seed: int = 0


class FaceRegressor:
    def __init__(self, feature_dim: int, n_controls: int, window: int = 4, hidden=(128, 128), seed: int = 0):
        self.feature_dim = feature_dim
        self.n_controls = n_controls
        self.window = window
        self.hidden = tuple(hidden)
        gen = torch.Generator().manual_seed(seed)
        sizes = [feature_dim * (2 * window + 1), *self.hidden, n_controls]
        layers = []
        for a, b in zip(sizes[:-1], sizes[1:]):
            lin = nn.Linear(a, b).double()
            bound = 1 / math.sqrt(a)
            with torch.no_grad():
                lin.weight.copy_(torch.rand((b, a), generator=gen, dtype=torch.float64) * 2 * bound - bound)
                lin.bias.copy_(torch.rand((b,), generator=gen, dtype=torch.float64) * 2 * bound - bound)
            layers += [lin, nn.ReLU()]
        self.net = nn.Sequential(*layers[:-1])
        # per-input standardisation, fitted on the training windows
        self.shift = torch.zeros(sizes[0], dtype=torch.float64)
        self.scale = torch.ones(sizes[0], dtype=torch.float64)
        self.meta: dict = {"seed": seed}

    def raw(self, windows: torch.Tensor) -> torch.Tensor:
        return self.net((windows - self.shift) / self.scale)

    def to_dict(self) -> dict:
        return {
            "schema": "rigforge.face-model/1",
            "feature_dim": self.feature_dim,
            "n_controls": self.n_controls,
            "window": self.window,
            "hidden": list(self.hidden),
            "shift": self.shift.numpy().tolist(),
            "scale": self.scale.numpy().tolist(),
            "layers": [
                {"shape": [m.out_features, m.in_features], "weight": m.weight.detach().numpy().ravel().tolist(),
                 "bias": m.bias.detach().numpy().tolist()}
                for m in self.net if isinstance(m, nn.Linear)
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "FaceRegressor":
        try:
            model = cls(int(doc["feature_dim"]), int(doc["n_controls"]), int(doc["window"]), doc["hidden"])
            linear = [m for m in model.net if isinstance(m, nn.Linear)]
            if len(linear) != len(doc["layers"]):
                raise FormatError("layer count does not match hidden sizes")
            shift = np.asarray(doc.get("shift", model.shift.numpy()), dtype=np.float64)
            scale = np.asarray(doc.get("scale", model.scale.numpy()), dtype=np.float64)
            if shift.shape != tuple(model.shift.shape) or scale.shape != tuple(model.scale.shape) or (scale <= 0).any():
                raise FormatError("input standardisation does not match architecture")
            model.shift, model.scale = torch.from_numpy(shift), torch.from_numpy(scale)
            with torch.no_grad():
                for m, layer in zip(linear, doc["layers"]):
                    w = np.asarray(layer["weight"], dtype=np.float64)
                    if list(layer["shape"]) != [m.out_features, m.in_features] or w.size != m.weight.numel():
                        raise FormatError(f"layer shape {layer['shape']} does not match architecture")
                    m.weight.copy_(torch.from_numpy(w.reshape(m.weight.shape)))
                    m.bias.copy_(torch.from_numpy(np.asarray(layer["bias"], dtype=np.float64)))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed face model document ({exc!r})") from exc
        model.meta = dict(doc.get("meta", {}))
        return model

    def save(self, path) -> None:
        io.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "FaceRegressor":
        return cls.from_dict(io.read_json(path, "rigforge.face-model"))


def _stack(features, targets, w):
    x = torch.from_numpy(np.concatenate([window_features(_values(f), w) for f in features]))
    y = torch.from_numpy(np.concatenate([_values(t) for t in targets]))
    # frames whose predecessor belongs to the same track; these carry the velocity term
    lengths = [len(_values(t)) for t in targets]
    same = np.ones(sum(lengths), dtype=bool)
    same[np.cumsum([0] + lengths[:-1])] = False
    return x, y, torch.from_numpy(np.flatnonzero(same))


def face_objective(pred: torch.Tensor, truth: torch.Tensor, cont: torch.Tensor) -> torch.Tensor:
    """(sum of L_rec + L_vel over all pairs) / number of coefficient entries.

    ``cont`` indexes frames that have an in-track predecessor, so velocity
    terms never straddle two tracks.
    """
    rec = rec_loss(pred, truth)
    dp = pred[cont] - pred[cont - 1]
    dt = truth[cont] - truth[cont - 1]
    return (rec + ((dp - dt) ** 2).sum()) / truth.numel()


def train_face_model(features, targets, config: FaceTrainConfig | None = None) -> FaceRegressor:
    """Mini-batch Adam on L_rec + L_vel over paired tracks.

    Each batch draws frames that have an in-track predecessor and scores both
    terms on those (frame, predecessor) pairs. A seeded ``holdout`` fraction of
    the pairs (none if only one pair) is scored after every epoch and the
    weights at the best held-out objective are kept.
    """
    cfg = config or FaceTrainConfig()
    features, targets = list(features), list(targets)
    if not features or len(features) != len(targets):
        raise ValidationError("need at least one (features, targets) pair, paired one-to-one")
    dims = {_values(f).shape[1] for f in features}
    ctrls = {_values(t).shape[1] for t in targets}
    if len(dims) != 1 or len(ctrls) != 1:
        raise DimensionError("all feature tracks / coefficient tracks must share a width")
    for f, t in zip(features, targets):
        if len(_values(f)) != len(_values(t)):
            raise DimensionError(f"feature track has {len(_values(f))} frames, target has {len(_values(t))}")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(features))
    n_hold = int(round(cfg.holdout * len(features))) if len(features) > 1 else 0
    hold, train = order[:n_hold], order[n_hold:]
    x, y, cont = _stack([features[i] for i in train], [targets[i] for i in train], cfg.window)
    if len(cont) == 0:
        raise ValidationError("training tracks need at least two frames")
    if n_hold:
        hx, hy, hcont = _stack([features[i] for i in hold], [targets[i] for i in hold], cfg.window)

    model = FaceRegressor(dims.pop(), ctrls.pop(), cfg.window, cfg.hidden, cfg.seed)
    model.shift = x.mean(0)
    model.scale = x.std(0).clamp_min(1e-8)
    gen = torch.Generator().manual_seed(cfg.seed)
    per_epoch = math.ceil(len(cont) / cfg.batch_size)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.epochs * per_epoch)
    best, best_state, best_epoch = math.inf, None, -1
    for epoch in range(cfg.epochs):
        perm = cont[torch.randperm(len(cont), generator=gen)]
        for s in range(0, len(perm), cfg.batch_size):
            i = perm[s:s + cfg.batch_size]
            p1, p0 = model.raw(x[i]), model.raw(x[i - 1])
            loss = (((p1 - y[i]) ** 2).sum() + (((p1 - p0) - (y[i] - y[i - 1])) ** 2).sum()) / p1.numel()
            if not torch.isfinite(loss):
                raise TrainingFailureError("face model loss became non-finite", {"epoch": epoch})
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        with torch.no_grad():
            score = float(face_objective(model.raw(hx), hy, hcont)) if n_hold else float(face_objective(model.raw(x), y, cont))
        if score < best:
            best, best_epoch = score, epoch
            best_state = {k: v.clone() for k, v in model.net.state_dict().items()}
    model.net.load_state_dict(best_state)
    with torch.no_grad():
        report = {"train_objective": float(face_objective(model.raw(x), y, cont)), "best_epoch": best_epoch}
        if n_hold:
            pred = model.raw(hx).clamp(0, 1)
            report["heldout_rec_per_entry"] = float(rec_loss(pred, hy)) / hy.numel()
            report["heldout_vel_per_entry"] = float(((pred[hcont] - pred[hcont - 1] - hy[hcont] + hy[hcont - 1]) ** 2).sum()) / hy.numel()
    model.meta = {"seed": cfg.seed, "config": {**asdict(cfg), "hidden": list(cfg.hidden)}, **report}
    return model


def drive_face(model: FaceRegressor, features, rate: float | None = None, controls=None) -> RigCoefficientTrack:
    """Predict a coefficient track for every feature frame in one forward pass."""
    f = _values(features)
    if f.ndim != 2 or f.shape[1] != model.feature_dim:
        raise ModelError(f"features have dimension {f.shape[-1]}, model expects {model.feature_dim}")
    with torch.no_grad():
        out = model.raw(torch.from_numpy(window_features(f, model.window))).numpy()
    if rate is None:
        rate = features.rate if isinstance(features, AudioFeatureTrack) else 50.0
    return RigCoefficientTrack(np.clip(out, 0.0, 1.0), rate, list(controls or []))


@dataclass
class InterjectionTemplate:
    token: str
    values: np.ndarray  # (L, N)
    blend_in: float = 0.0  # seconds
    blend_out: float = 0.0
    rate: float = 50.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or len(self.values) == 0:
            raise DimensionError(f"template {self.token!r} must be (L>=1, N)")
        if self.values.min() < 0 or self.values.max() > 1:
            raise ValidationError(f"template {self.token!r} values must lie in [0, 1]")
        length = len(self.values) / self.rate
        for b in (self.blend_in, self.blend_out):
            if b < 0 or (b > 0 and b >= length):
                raise ValidationError(f"template {self.token!r}: blend {b}s must be >= 0 and shorter than {length}s")

    def weights(self, rate: float) -> np.ndarray:
        """Crossfade weight of the template for each of its frames at ``rate``."""
        k = np.arange(len(self.values), dtype=np.float64)
        n_in = int(round(self.blend_in * rate))
        n_out = int(round(self.blend_out * rate))
        w = np.ones(len(k))
        if n_in:
            w = np.minimum(w, k / n_in)
        if n_out:
            w = np.minimum(w, (len(k) - k) / n_out)
        return w


def apply_interjections(track: RigCoefficientTrack, events, templates) -> tuple[RigCoefficientTrack, list[dict]]:
    """Crossfade template clips into the track at each triggered event.

    Events are processed in time order, each blending over the running
    result, so where two spans overlap the later event wins. Events whose
    token has no template are skipped and returned as warning records.
    """
    by_token = {t.token: t for t in templates}
    out = track.values.copy()
    skipped = []
    duration = track.n_frames / track.rate
    for token, when in sorted(events, key=lambda e: (float(e[1]), str(e[0]))):
        when = float(when)
        if not 0 <= when <= duration:
            raise ValidationError(f"event {token!r} at {when}s is outside the track (0..{duration}s)")
        tpl = by_token.get(token)
        if tpl is None:
            log.warning("no template for interjection %r at %.3fs; skipped", token, when)
            skipped.append({"token": token, "time": when, "reason": "no template"})
            continue
        if tpl.values.shape[1] != out.shape[1]:
            raise DimensionError(f"template {token!r} has {tpl.values.shape[1]} controls, track has {out.shape[1]}")
        if tpl.rate != track.rate:
            raise ValidationError(f"template {token!r} rate {tpl.rate} differs from track rate {track.rate}")
        start = int(round(when * track.rate))
        span = min(len(tpl.values), track.n_frames - start)
        if span <= 0:
            continue
        w = tpl.weights(track.rate)[:span, None]
        seg = out[start:start + span]
        out[start:start + span] = (1 - w) * seg + w * tpl.values[:span]
    return RigCoefficientTrack(np.clip(out, 0.0, 1.0), track.rate, list(track.controls)), skipped


# -- file formats ---------------------------------------------------------------


def read_feature_track(path) -> AudioFeatureTrack:
    data, header = io.read_matrix(path)
    return AudioFeatureTrack(data, float(header.get("rate", 50.0)))


def write_feature_track(path, track: AudioFeatureTrack, encoding: str = "csv") -> None:
    io.write_matrix(path, track.values, "rigforge.feature-track/1", encoding, rate=track.rate)


def read_coefficient_track(path) -> RigCoefficientTrack:
    data, header = io.read_matrix(path)
    return RigCoefficientTrack(data, float(header.get("rate", 50.0)), list(header.get("controls", [])))


def write_coefficient_track(path, track: RigCoefficientTrack, encoding: str = "csv") -> None:
    io.write_matrix(path, track.values, "rigforge.coefficient-track/1", encoding,
                    rate=track.rate, controls=list(track.controls))


def read_templates(path) -> list[InterjectionTemplate]:
    doc = io.read_json(path, "rigforge.templates")
    try:
        return [
            InterjectionTemplate(t["token"], np.array(t["values"]), float(t.get("blend_in", 0.0)),
                                 float(t.get("blend_out", 0.0)), float(t.get("rate", 50.0)))
            for t in doc["templates"]
        ]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: malformed template file ({exc!r})") from exc


def write_templates(path, templates) -> None:
    io.write_json(path, {"schema": "rigforge.templates/1", "templates": [
        {"token": t.token, "values": t.values.tolist(), "blend_in": t.blend_in, "blend_out": t.blend_out, "rate": t.rate}
        for t in templates
    ]})


def read_events(path) -> list[tuple[str, float]]:
    """A bare JSON list of ``[token, seconds]`` or ``{"schema": ..., "events": [...]}``."""
    doc = io.read_json(Path(path))
    events = doc["events"] if isinstance(doc, dict) else doc
    try:
        return [(str(tok), float(t)) for tok, t in events]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: events must be [token, seconds] pairs") from exc
