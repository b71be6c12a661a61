"""Learned inverse of a black-box renderer's color response, plus relit blending.

A renderer maps a texture color C' to a displayed color C. The corrector N is
trained on (C', C) pairs to send C back to C', so painting N(target) into
the texture makes the renderer show the target.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from torch import nn

from . import io
from .errors import FormatError, TrainingFailureError, ValidationError

log = logging.getLogger(__name__)

Oracle = Callable[[np.ndarray], np.ndarray]

MIX = np.array([
    [0.90, 0.07, 0.03],
    [0.05, 0.88, 0.07],
    [0.02, 0.06, 0.92],
])


def identity_oracle(c):
    return np.array(c, dtype=np.float64)


def affine_oracle(c):
    return 0.8 * np.asarray(c, dtype=np.float64) + 0.1


def gamma_oracle(c):
    return np.clip(np.asarray(c, dtype=np.float64), 0, 1) ** 2.2


def gamma_matrix_oracle(c):
    """Per-channel gamma 2.2, then a near-identity color mix, then clamp."""
    lin = np.clip(np.asarray(c, dtype=np.float64), 0, 1) ** 2.2
    return np.clip(lin @ MIX.T, 0.0, 1.0)


PRESETS: dict[str, Oracle] = {
    "identity": identity_oracle,
    "affine": affine_oracle,
    "gamma": gamma_oracle,
    "gamma-matrix": gamma_matrix_oracle,
}


def get_oracle(name: str) -> Oracle:
    try:
        return PRESETS[name]
    except KeyError:
        raise ValidationError(f"unknown oracle preset {name!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class ColorPairs:
    source: np.ndarray  # C', the color fed to the renderer
    rendered: np.ndarray  # C, what the renderer showed

    def __post_init__(self):
        s = np.asarray(self.source, dtype=np.float64).reshape(-1, 3)
        r = np.asarray(self.rendered, dtype=np.float64).reshape(-1, 3)
        if s.shape != r.shape:
            raise ValidationError("source and rendered color arrays differ in length")
        for name, a in (("source", s), ("rendered", r)):
            if a.size and (a.min() < 0 or a.max() > 1 or not np.isfinite(a).all()):
                raise ValidationError(f"{name} colors must lie in [0, 1]")
        object.__setattr__(self, "source", s)
        object.__setattr__(self, "rendered", r)

    def __len__(self):
        return len(self.source)


def lattice_colors(n: int, seed: int = 0, jitter: float = 1.0) -> np.ndarray:
    """``n`` colors from a stratified lattice over the RGB cube.

    With m = ceil(cbrt(n)) points per axis the lattice includes the cube
    corners; each point is jittered uniformly by up to ``jitter`` half-spacings
    and clipped. If n is not a perfect cube a seeded subset of lattice cells
    is kept.
    """
    if n < 1:
        raise ValidationError("n must be >= 1")
    m = max(2, round(n ** (1 / 3)))
    if m**3 < n:
        m += 1
    axis = np.linspace(0.0, 1.0, m)
    grid = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)
    rng = np.random.default_rng(seed)
    if len(grid) > n:
        grid = grid[np.sort(rng.permutation(len(grid))[:n])]
    if jitter:
        half = 0.5 / (m - 1)
        grid = np.clip(grid + rng.uniform(-half, half, grid.shape) * jitter, 0.0, 1.0)
    return grid


def generate_training_pairs(oracle: Oracle, n: int = 10_000, seed: int = 0, jitter: float = 1.0) -> ColorPairs:
    source = lattice_colors(n, seed, jitter)
    return ColorPairs(source, np.clip(oracle(source), 0.0, 1.0))


def read_pairs_csv(path) -> ColorPairs:
    """Offline capture file, one ``r',g',b',r,g,b`` row per sample (header optional)."""
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    rows = []
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(x) for x in row])
            except ValueError:
                if rows:
                    raise FormatError(f"{path}: non-numeric row {row}") from None
                continue  # header line
    data = np.array(rows, dtype=np.float64).reshape(-1, 6) if rows else np.zeros((0, 6))
    return ColorPairs(data[:, :3], data[:, 3:])


def write_pairs_csv(path, pairs: ColorPairs) -> None:
    data = np.concatenate([pairs.source, pairs.rendered], 1)
    np.savetxt(path, data, delimiter=",", fmt="%.17g", header="r_src,g_src,b_src,r,g,b", comments="")


@dataclass
class ColorTrainConfig:
    hidden: int = 32
    lr: float = 1e-2  # peak of the one-cycle schedule
    batch_size: int = 256
    epochs: int = 600
    holdout: float = 0.1
    seed: int = 0


class ColorCorrector:
    """3 -> hidden -> hidden -> 3 perceptron with ReLU hidden layers and a clamped output."""

    def __init__(self, hidden: int = 32, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(3, hidden), nn.ReLU(), nn.Linear(hidden, hidden), nn.ReLU(), nn.Linear(hidden, 3)
        ).double()
        with torch.no_grad():
            for layer in self.net:
                if isinstance(layer, nn.Linear):
                    bound = 1 / math.sqrt(layer.in_features)
                    layer.weight.copy_(torch.rand(layer.weight.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                    layer.bias.copy_(torch.rand(layer.bias.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
        self.meta: dict = {"seed": seed}

    def raw(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def __call__(self, colors) -> np.ndarray:
        c = np.asarray(colors, dtype=np.float64)
        with torch.no_grad():
            out = self.net(torch.from_numpy(c.reshape(-1, 3).copy())).numpy()
        return np.clip(out, 0.0, 1.0).reshape(c.shape)

    def to_dict(self) -> dict:
        layers = [m for m in self.net if isinstance(m, nn.Linear)]
        return {
            "schema": "rigforge.color-model/1",
            "activation": "relu",
            "layers": [
                {
                    "shape": [m.out_features, m.in_features],
                    "weight": m.weight.detach().numpy().ravel().tolist(),
                    "bias": m.bias.detach().numpy().tolist(),
                }
                for m in layers
            ],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ColorCorrector":
        try:
            layers = doc["layers"]
            shapes = [tuple(layer["shape"]) for layer in layers]
            if len(shapes) != 3 or shapes[0][1] != 3 or shapes[2][0] != 3:
                raise FormatError(f"color model must be 3 linear layers 3->h->h->3, got {shapes}")
            if shapes[1] != (shapes[0][0], shapes[0][0]) or shapes[2][1] != shapes[0][0]:
                raise FormatError(f"inconsistent layer shapes {shapes}")
            model = cls(hidden=shapes[0][0])
            linear = [m for m in model.net if isinstance(m, nn.Linear)]
            with torch.no_grad():
                for m, layer, shape in zip(linear, layers, shapes):
                    w = np.asarray(layer["weight"], dtype=np.float64)
                    b = np.asarray(layer["bias"], dtype=np.float64)
                    if w.size != shape[0] * shape[1] or b.size != shape[0]:
                        raise FormatError("weight array size does not match declared shape")
                    m.weight.copy_(torch.from_numpy(w.reshape(shape)))
                    m.bias.copy_(torch.from_numpy(b))
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"malformed color model document ({exc!r})") from exc
        model.meta = dict(doc.get("meta", {}))
        return model

    def save(self, path) -> None:
        io.write_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> "ColorCorrector":
        return cls.from_dict(io.read_json(path, "rigforge.color-model"))


def _norm_loss(pred, target):
    # sum of per-sample Euclidean norms; tiny epsilon keeps the gradient finite at 0
    return torch.sqrt(((pred - target) ** 2).sum(1) + 1e-12).sum()


def train_corrector(pairs: ColorPairs, config: ColorTrainConfig | None = None) -> ColorCorrector:
    """Fit N so that N(rendered) ~= source, minimising the summed error norm.

    Adam under a one-cycle learning-rate schedule. A seeded ``holdout``
    fraction is kept aside and the weights with the best held-out mean
    absolute error are returned.
    """
    cfg = config or ColorTrainConfig()
    if len(pairs) < 100:
        raise ValidationError(f"need at least 100 color pairs, got {len(pairs)}")
    gen = torch.Generator().manual_seed(cfg.seed)
    perm = torch.randperm(len(pairs), generator=gen).numpy()
    n_hold = max(1, int(round(cfg.holdout * len(pairs))))
    hold, train = perm[:n_hold], perm[n_hold:]
    x = torch.from_numpy(pairs.rendered[train].copy())
    y = torch.from_numpy(pairs.source[train].copy())
    hx = torch.from_numpy(pairs.rendered[hold].copy())
    hy = torch.from_numpy(pairs.source[hold].copy())

    model = ColorCorrector(cfg.hidden, cfg.seed)
    opt = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    per_epoch = math.ceil(len(x) / cfg.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=cfg.lr, total_steps=cfg.epochs * per_epoch)
    best, best_state, best_epoch = math.inf, None, 0
    loss = torch.tensor(0.0)
    for epoch in range(1, cfg.epochs + 1):
        order = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = _norm_loss(model.raw(x[idx]), y[idx]) / len(idx)
            loss.backward()
            opt.step()
            sched.step()
        if not torch.isfinite(loss):
            raise TrainingFailureError(
                "color corrector loss became non-finite",
                {"epoch": epoch, "lr": sched.get_last_lr()[0], "best_heldout_mae": best},
            )
        with torch.no_grad():
            held = float((model.raw(hx).clamp(0, 1) - hy).abs().mean())
        if held < best:
            best, best_epoch = held, epoch
            best_state = {k: v.clone() for k, v in model.net.state_dict().items()}
    model.net.load_state_dict(best_state)
    model.meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "best_epoch": best_epoch,
        "final_loss": float(loss.detach()),
        "heldout_mae": best,
        "n_pairs": len(pairs),
        "config": asdict(cfg),
    }
    log.info("color corrector: best held-out MAE %.3g at epoch %d", best, best_epoch)
    return model


def correct_color(model: ColorCorrector, color) -> np.ndarray:
    c = np.asarray(color, dtype=np.float64)
    if c.shape[-1] != 3:
        raise FormatError("colors must have 3 channels")
    if c.size and (c.min() < 0 or c.max() > 1):
        raise ValidationError("color channels must lie in [0, 1]")
    return model(c)


def _as_float_image(image) -> tuple[np.ndarray, bool]:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] not in (3, 4):
        raise FormatError(f"expected an RGB or RGBA image, got shape {img.shape}")
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0, True
    if not np.issubdtype(img.dtype, np.floating):
        raise FormatError(f"unsupported image dtype {img.dtype}")
    return img.astype(np.float64), False


def _restore(img: np.ndarray, was_uint8: bool):
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8) if was_uint8 else img


def correct_texture(model: ColorCorrector, texture) -> np.ndarray:
    """Apply the corrector to every pixel; alpha, size and dtype are preserved."""
    img, was_uint8 = _as_float_image(texture)
    out = img.copy()
    out[..., :3] = correct_color(model, np.clip(img[..., :3], 0.0, 1.0))
    return _restore(out, was_uint8)


def blend_relit(original, relit, alpha: float):
    """``alpha * relit + (1 - alpha) * original`` per pixel."""
    if not 0 <= alpha <= 1:
        raise ValidationError("alpha must lie in [0, 1]")
    a, a8 = _as_float_image(original)
    b, b8 = _as_float_image(relit)
    if a.shape != b.shape:
        raise FormatError(f"image shapes differ: {a.shape} vs {b.shape}")
    if alpha == 0:
        return np.array(original, copy=True)
    if alpha == 1:
        return np.array(relit, copy=True)
    return _restore(alpha * b + (1 - alpha) * a, a8 and b8)


def interior_colors(n: int = 1000, seed: int = 1, lo: float = 0.05, hi: float = 0.95) -> np.ndarray:
    return np.random.default_rng(seed).uniform(lo, hi, (n, 3))


def round_trip_errors(model: ColorCorrector, oracle: Oracle, source) -> np.ndarray:
    """Per-sample ``max |oracle(N(C)) - C|`` with C = oracle(source).

    Drawing targets as renders of interior source colors keeps them inside
    the oracle's invertible range.
    """
    target = oracle(np.asarray(source, dtype=np.float64))
    return np.abs(oracle(model(target)) - target).max(1)


def read_png(path) -> np.ndarray:
    from PIL import Image

    path = Path(path)
    if not path.exists():
        raise ValidationError(f"file not found: {path}")
    with Image.open(path) as im:
        if im.mode not in ("RGB", "RGBA"):
            im = im.convert("RGBA" if "A" in im.mode else "RGB")
        return np.asarray(im).copy()


def write_png(path, image, text: dict | None = None) -> None:
    """Write RGB(A) as PNG; ``text`` entries become tEXt chunks."""
    from PIL import Image, PngImagePlugin

    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    info = PngImagePlugin.PngInfo()
    for k, v in (text or {}).items():
        info.add_text(k, v)
    Image.fromarray(img, "RGBA" if img.shape[2] == 4 else "RGB").save(path, optimize=False, pnginfo=info)


__all__ = [
    "ColorCorrector", "ColorPairs", "ColorTrainConfig", "PRESETS", "blend_relit", "correct_color",
    "correct_texture", "generate_training_pairs", "get_oracle", "interior_colors", "lattice_colors",
    "read_pairs_csv", "round_trip_errors", "train_corrector", "write_pairs_csv",
]
