"""SGD training, hard-negative mining and the activation comparison."""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .data import NEGATIVE, CropSet, LabeledCrop, crop_resize
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .geometry import iou_matrix
from .nn import probe_activations
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 10
    patience: int = 5                       # epochs without a 1e-4 improvement before stopping
    tol: float = 1e-4
    seed: int = 0
    activation: str = "selu"
    bn: bool = False
    flip: bool = False                      # random horizontal flips
    clip_norm: float | None = None          # global gradient-norm cap

    def validate(self):
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if not self.lr > 0:
            raise ConfigError("learning rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.patience < 1:
            raise ConfigError("epochs and patience must be >= 1")
        if self.activation not in F.ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        return self


@dataclass
class LossCurve:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    epochs: list = field(default_factory=list)          # epoch of each step
    val_accuracy: list = field(default_factory=list)    # one per finished epoch (nan without validation)
    epoch_loss: list = field(default_factory=list)

    def record(self, step: int, loss: float, epoch: int):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("step indices must increase")
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", step=step)
        self.steps.append(step)
        self.losses.append(float(loss))
        self.epochs.append(epoch)

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")

    def rows(self):
        last = {e: i for i, e in enumerate(self.epochs)}
        for i, (s, l, e) in enumerate(zip(self.steps, self.losses, self.epochs)):
            acc = ""
            if last[e] == i and e < len(self.val_accuracy) and np.isfinite(self.val_accuracy[e]):
                acc = f"{self.val_accuracy[e]:.6f}"
            yield [s, f"{l:.6f}", e, acc]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "loss", "epoch", "val_accuracy"])
            w.writerows(self.rows())


def _as_arrays(data):
    if isinstance(data, CropSet):
        return data.arrays()
    x, y = data
    return np.asarray(x), np.asarray(y, dtype=np.int64)


def accuracy(network, x: np.ndarray, y: np.ndarray, threshold: float = 0.5) -> float:
    if len(y) == 0:
        return float("nan")
    p = network.predict_proba(x)
    return float(np.mean((p >= threshold).astype(np.int64) == y))


def param_hash(network) -> str:
    h = hashlib.sha256()
    for name, arr in network.state_tensors():
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def sgd_step(params, velocity, lr: float, momentum: float):
    for p, v in zip(params, velocity):
        if p.grad is None:
            continue
        v *= momentum
        v -= lr * p.grad
        p.data += v


def clip_gradients(params, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``."""
    norm = float(np.sqrt(sum(float(np.sum(p.grad.astype(np.float64) ** 2)) for p in params if p.grad is not None)))
    if norm > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / norm
    return norm


def train(network, data, cfg: TrainConfig | None = None, val=None, on_epoch=None):
    """Mini-batch SGD with momentum on a CropSet or an (inputs, labels) pair.

    Stops after ``cfg.epochs`` or once the epoch loss has not improved by
    ``cfg.tol`` for ``cfg.patience`` epochs. Returns (network, LossCurve).
    """
    cfg = (cfg or TrainConfig()).validate()
    x, y = _as_arrays(data)
    if len(np.unique(y)) < 2:
        raise DataError("training data must contain both classes")
    xv, yv = _as_arrays(val) if val is not None else (None, None)
    rng = np.random.default_rng(cfg.seed)
    params = network.parameters()
    velocity = [np.zeros_like(p.data) for p in params]
    dtype = params[0].dtype
    curve = LossCurve()
    best, wait, step = np.inf, 0, 0
    n = len(y)
    for epoch in range(cfg.epochs):
        network.train()
        order = rng.permutation(n)
        starts = list(range(0, n, cfg.batch_size))
        if n - starts[-1] < 2 and len(starts) > 1:
            starts.pop()                    # a trailing singleton would break batch statistics
        total = 0.0
        for k, lo in enumerate(starts):
            hi = starts[k + 1] if k + 1 < len(starts) else n
            idx = order[lo:hi]
            xb = x[idx].astype(dtype, copy=True)
            if cfg.flip:
                flip = rng.random(len(idx)) < 0.5
                xb[flip] = xb[flip, :, :, ::-1]
            network.zero_grad()
            try:
                loss = F.softmax_cross_entropy(network(Tensor(xb)), y[idx])
                loss.backward()
            except NumericError as exc:
                raise DivergenceError(f"training diverged at step {step}: {exc}", step=step) from exc
            curve.record(step, loss.item(), epoch)
            if cfg.clip_norm is not None:
                clip_gradients(params, cfg.clip_norm)
            sgd_step(params, velocity, cfg.lr, cfg.momentum)
            total += loss.item() * len(idx)
            step += 1
        epoch_loss = total / n
        curve.epoch_loss.append(epoch_loss)
        curve.val_accuracy.append(accuracy(network, xv, yv) if xv is not None else float("nan"))
        log.info("epoch %d loss %.5f val_acc %.4f", epoch, epoch_loss, curve.val_accuracy[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve)
        if epoch_loss < best - cfg.tol:
            best, wait = epoch_loss, 0
        else:
            wait += 1
            if wait >= cfg.patience:
                break
    network.eval()
    return network, curve


def mine_hard_negatives(frames, detections, cap_per_frame: int = 8, iou_max: float = 0.5) -> CropSet:
    """Crop detections that overlap no ground truth (IOU < ``iou_max``) as negatives.

    ``detections`` holds one list per frame (Detections or scored boxes);
    the highest-scoring false positives are kept, at most ``cap_per_frame``.
    """
    out = CropSet([])
    for frame, dets in zip(frames, detections):
        boxes = [getattr(d, "box", d) for d in dets]
        if not boxes:
            continue
        if frame.boxes:
            worst = iou_matrix(boxes, frame.boxes).max(axis=1)
        else:
            worst = np.zeros(len(boxes))
        fp = [b for b, v in zip(boxes, worst) if v < iou_max]
        fp.sort(key=lambda b: (-(b.score or 0.0), b.x, b.y))
        fp = fp[:cap_per_frame]
        if not fp:
            continue
        rects = [b.clamp(frame.width, frame.height) for b in fp]
        rects = [type(r)(int(r.x), int(r.y), max(1, int(r.w)), max(1, int(r.h))) for r in rects if r is not None]
        px = crop_resize(frame.image, rects)
        out.crops += [LabeledCrop(px[k], NEGATIVE, frame.source_id, r) for k, r in enumerate(rects)]
    return out


def activation_stats(network, probe: np.ndarray) -> list:
    """(layer, kind, mean, var) after each activation for one forward pass."""
    network.eval()
    with no_grad():
        stats = probe_activations(network, probe)
    return [(k, kind, mean, var) for k, (kind, mean, var) in enumerate(stats)]


def compare_activations(build, data, cfg: TrainConfig | None = None, val=None, out_dir=None) -> dict:
    """Train ``build(activation)`` twice, differing only in the activation.

    Returns {"selu": LossCurve, "relu": LossCurve}; with ``out_dir`` the
    curves are written as loss_selu.csv, loss_relu.csv and a paired
    loss_paired.csv (step, epoch, loss_selu, loss_relu).
    """
    cfg = cfg or TrainConfig()
    curves = {}
    for act in ("selu", "relu"):
        run_cfg = TrainConfig(**{**cfg.__dict__, "activation": act})
        _, curves[act] = train(build(act), data, run_cfg, val=val)
    if out_dir is not None:
        from pathlib import Path

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for act, c in curves.items():
            c.write_csv(out / f"loss_{act}.csv")
        a, b = curves["selu"], curves["relu"]
        with open(out / "loss_paired.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "epoch", "loss_selu", "loss_relu"])
            for i in range(max(len(a.steps), len(b.steps))):
                row = [i, a.epochs[i] if i < len(a.steps) else b.epochs[i]]
                row += [f"{c.losses[i]:.6f}" if i < len(c.losses) else "" for c in (a, b)]
                w.writerow(row)
    return curves
