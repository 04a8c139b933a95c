"""Training, inference and the ablation driver."""

from __future__ import annotations

import copy
import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import save_checkpoint
from .config import RunConfig, config_hash, dump_config, set_key
from .dataio import Sample, augment, normalize_image, save_pgm
from .decoder import SODModel, build_model
from .losses import multilevel_loss
from .metrics import evaluate_pair, mean_report
from .nn import Parameter
from .tensor import NumericalError, Tensor


class Adam:
    def __init__(self, params: list[Parameter], lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]

    def step(self) -> None:
        self.t += 1
        c1 = 1 - self.b1**self.t
        c2 = 1 - self.b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = p.data - (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def lr_at(epoch: int, cfg: RunConfig) -> float:
    """Learning rate for 0-based ``epoch``; the drop never raises the rate."""
    if epoch >= cfg.train.drop_epoch():
        return min(cfg.optim.lr, cfg.train.lr_drop_value)
    return cfg.optim.lr


def split_samples(samples: list[Sample], val_fraction: float) -> tuple[list[Sample], list[Sample]]:
    """Order by id; the last ``val_fraction`` is held out."""
    ordered = sorted(samples, key=lambda s: s.id)
    n_val = int(round(len(ordered) * val_fraction))
    cut = len(ordered) - n_val
    return ordered[:cut], ordered[cut:]


def _stack(samples: list[Sample], normalize: bool = True) -> tuple[np.ndarray, np.ndarray]:
    dtype = T.get_default_dtype()
    imgs = np.stack([normalize_image(s.image) if normalize else s.image for s in samples]).astype(dtype)
    masks = np.stack([s.mask for s in samples]).astype(dtype)
    return imgs, masks


def predict(model: SODModel, images: np.ndarray, batch: int = 8) -> list[np.ndarray]:
    """Sigmoid probabilities of every head for normalised images (N, 3, H, W)."""
    levels: list[list[np.ndarray]] = []
    for i in range(0, len(images), batch):
        maps = model(Tensor(images[i : i + batch]))
        probs = [1.0 / (1.0 + np.exp(-m.data.astype(np.float64))) for m in maps]
        levels.append(probs)
    return [np.concatenate([b[k] for b in levels]) for k in range(len(levels[0]))] if levels else []


def dataset_loss(model: SODModel, samples: list[Sample], batch: int) -> float:
    total = 0.0
    for i in range(0, len(samples), batch):
        chunk = samples[i : i + batch]
        imgs, masks = _stack(chunk)
        total += multilevel_loss(model(Tensor(imgs)), masks).item() * len(chunk)
    return total / max(len(samples), 1)


def dataset_mae(model: SODModel, samples: list[Sample], batch: int) -> float:
    if not samples:
        return float("nan")
    imgs, masks = _stack(samples)
    finest = predict(model, imgs, batch)[-1]
    return float(np.abs(finest - masks).mean())


@dataclass
class TrainResult:
    model: SODModel
    log: list[tuple[int, float, float]]
    steps: int


def write_log(log: list[tuple[int, float, float]], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["epoch", "loss", "val_mae"])
        for e, loss, vm in log:
            wr.writerow([e, f"{loss:.8f}", f"{vm:.8f}"])


def train(cfg: RunConfig, samples: list[Sample], out_dir=None, verbose: bool = False) -> TrainResult:
    """Adam on the multilevel loss. Row 0 of the log is the initial model.

    After every epoch the loss is re-measured on the un-augmented training
    set and MAE on the held-out split. With ``out_dir`` the log and the last
    good checkpoint are written there after every epoch.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt_path = out / "checkpoint.m3nt" if out is not None else None
    cfg_text = dump_config(cfg)
    with T.default_dtype(np.dtype(cfg.train.dtype)):
        train_set, val_set = split_samples(samples, cfg.train.val_fraction)
        if not train_set:
            raise ValueError("training set is empty")
        H, W = train_set[0].mask.shape
        model = build_model(cfg.encoder, cfg.decoder, cfg.seed)
        model.check_input(H, W)
        params = model.parameters()
        opt = Adam(params, cfg.optim.lr, (cfg.optim.beta1, cfg.optim.beta2), cfg.optim.eps)
        rng = np.random.default_rng([cfg.seed, 0x5EED])
        bs = cfg.train.batch
        log = [(0, dataset_loss(model, train_set, bs), dataset_mae(model, val_set, bs))]
        if out is not None:
            save_checkpoint(ckpt_path, model, 0, cfg_text)
            write_log(log, out / "train_log.csv")
        if verbose:
            print(f"epoch 0 loss {log[0][1]:.5f} val_mae {log[0][2]:.5f}", flush=True)
        for epoch in range(cfg.train.epochs):
            opt.lr = lr_at(epoch, cfg)
            order = rng.permutation(len(train_set))
            for i in range(0, len(order), bs):
                chunk = [augment(train_set[j], rng, cfg.train.crop_fraction, cfg.train.rotate, normalize=False)
                         for j in order[i : i + bs]]
                imgs, masks = _stack(chunk)
                opt.zero_grad()
                with T.Tape() as tape:
                    loss = multilevel_loss(model(Tensor(imgs)), masks)
                    if not math.isfinite(loss.item()):
                        raise NumericalError(f"non-finite training loss at epoch {epoch + 1}")
                    tape.backward(loss)
                opt.step()
                for p in params:
                    if not np.isfinite(p.data).all():
                        raise NumericalError(f"non-finite parameters after step {opt.t}")
            row = (epoch + 1, dataset_loss(model, train_set, bs), dataset_mae(model, val_set, bs))
            if not math.isfinite(row[1]):
                raise NumericalError(f"non-finite loss after epoch {epoch + 1}")
            log.append(row)
            if out is not None:
                save_checkpoint(ckpt_path, model, opt.t, cfg_text)
                write_log(log, out / "train_log.csv")
            if verbose:
                print(f"epoch {row[0]} loss {row[1]:.5f} val_mae {row[2]:.5f} lr {opt.lr:g}", flush=True)
    return TrainResult(model, log, opt.t)


def write_predictions(model: SODModel, samples: list[Sample], out_dir, all_levels: bool = False,
                      batch: int = 8) -> int:
    """Write finest-level maps as ``<id>.pgm``; with ``all_levels`` also ``level<k>/<id>.pgm``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not samples:
        return 0
    imgs = np.stack([normalize_image(s.image) for s in samples]).astype(T.get_default_dtype())
    levels = predict(model, imgs, batch)
    for k, probs in enumerate(levels, 1):
        if all_levels:
            (out / f"level{k}").mkdir(exist_ok=True)
        for s, m in zip(samples, probs):
            if k == len(levels):
                save_pgm(m, out / f"{s.id}.pgm")
            if all_levels:
                save_pgm(m, out / f"level{k}" / f"{s.id}.pgm")
    return len(samples)


# ---------------------------------------------------------------------------
# ablation

ABLATION_AXES = {
    "across_levels": ("1", "2", "3"),
    "interaction": ("h2l", "l2h", "bi"),
    "window": ("4", "7", "14", "global", "mixed"),
    "upsample": ("fold_overlap", "fold", "bilinear", "pixel_shuffle"),
}
_AXIS_KEYS = {
    "across_levels": ("decoder.across_levels",),
    "interaction": ("decoder.interaction_mode",),
    "window": ("decoder.window", "decoder.mab_attention"),
    "upsample": ("decoder.upsample_method",),
}
_INTERACTION = {"h2l": "high_to_low", "l2h": "low_to_high", "bi": "bidirectional"}


def apply_axis(cfg: RunConfig, axis: str, value: str) -> RunConfig:
    """Copy of ``cfg`` with one ablation setting applied.

    Window values: an integer means window attention only; ``global`` means
    global attention only; ``mixed`` or ``<k>+global`` means both terms with
    a 7x7 (or k x k) window.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    c = copy.deepcopy(cfg)
    if axis == "across_levels":
        set_key(c, "decoder.across_levels", value)
    elif axis == "interaction":
        set_key(c, "decoder.interaction_mode", _INTERACTION.get(value, value))
    elif axis == "upsample":
        set_key(c, "decoder.upsample_method", value)
    elif value == "global":
        set_key(c, "decoder.mab_attention", "global")
    elif value == "mixed" or value.endswith("+global"):
        k = 7 if value == "mixed" else int(value.split("+")[0])
        set_key(c, "decoder.mab_attention", "mixed")
        set_key(c, "decoder.window", (k, k))
    else:
        set_key(c, "decoder.mab_attention", "window")
        set_key(c, "decoder.window", (int(value), int(value)))
    c.validate()
    return c


@dataclass
class AblationRow:
    axis: str
    value: str
    config_hash: str
    base_hash: str
    final_loss: float
    mae: float
    e_mean: float
    s_measure: float
    wf: float


ABLATION_HEADER = ["axis", "value", "config_hash", "base_hash", "final_loss", "mae", "e_mean", "s_measure", "wf"]


def run_setting(cfg: RunConfig, samples: list[Sample], out_dir=None) -> tuple[TrainResult, dict[str, float]]:
    """Train, then score the held-out split."""
    res = train(cfg, samples, out_dir)
    _, val = split_samples(samples, cfg.train.val_fraction)
    with T.default_dtype(np.dtype(cfg.train.dtype)):
        imgs, _ = _stack(val) if val else (np.zeros((0,)), None)
        finest = predict(res.model, imgs, cfg.train.batch)[-1] if val else []
    # score the 8-bit maps that inference writes, so rows match an eval of written predictions
    reports = [evaluate_pair(np.round(m * 255.0) / 255.0, s.mask) for m, s in zip(finest, val)]
    scores = mean_report(reports).scalars() if reports else {k: float("nan") for k in ("mae", "e_mean", "s_measure", "wf")}
    return res, scores


def ablate(cfg: RunConfig, axis: str, samples: list[Sample], values=None, out_dir=None,
           verbose: bool = False) -> list[AblationRow]:
    values = tuple(values) if values else ABLATION_AXES.get(axis, ())
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_AXES)}")
    rows = []
    for v in values:
        c = apply_axis(cfg, axis, v)
        sub = Path(out_dir) / f"{axis}={v}" if out_dir is not None else None
        res, scores = run_setting(c, samples, sub)
        base = config_hash(c, exclude=("train.data_dir",) + _AXIS_KEYS[axis])
        row = AblationRow(axis, v, config_hash(c), base, res.log[-1][1], **scores)
        rows.append(row)
        if verbose:
            print(f"{axis}={v}: loss {row.final_loss:.5f} mae {row.mae:.5f}", flush=True)
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / f"ablation_{axis}.csv")
    return rows


def write_ablation_csv(rows: list[AblationRow], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(ABLATION_HEADER)
        for r in rows:
            wr.writerow([r.axis, r.value, r.config_hash, r.base_hash, f"{r.final_loss:.8f}", f"{r.mae:.8f}",
                         f"{r.e_mean:.8f}", f"{r.s_measure:.8f}", f"{r.wf:.8f}"])
