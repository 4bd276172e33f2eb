"""Training loop: Adam, warm-restart cosine LR, exponential beta sweep, Pareto tracking."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import manifest
from .data import Dataset, metric_accuracy
from .estimator import LutPrimitiveSpec, ebops_model
from .layers import Sequential
from .util import atomic_write_text

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    beta_start: float = 5e-7
    beta_end: float = 1e-3
    epochs: int = 100
    steps_per_epoch: int | None = None  # None: one pass over the training split
    batch_size: int = 256
    lr_base: float = 3e-3
    restart_period: int = 2000  # steps in the first cosine period
    restart_mult: float = 2.0
    seed: int = 0
    val_fraction: float = 0.10
    max_nan_steps: int = 20
    lut_x: int = 6
    lut_y: int = 5

    def __post_init__(self):
        if not self.beta_end >= self.beta_start >= 0:
            raise ValueError("need beta_end >= beta_start >= 0")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.restart_period < 1 or self.restart_mult < 1:
            raise ValueError("restart_period must be >= 1 and restart_mult >= 1")
        if not 0 < self.val_fraction < 1:
            raise ValueError("val_fraction must be in (0, 1)")


def beta_at(t: int, total: int, cfg: TrainConfig) -> float:
    """Exponential interpolation from ``beta_start`` (t=0) to ``beta_end`` (t=total)."""
    if total <= 0 or cfg.beta_start == 0:
        return cfg.beta_end if t >= total > 0 else cfg.beta_start
    frac = min(max(t / total, 0.0), 1.0)
    return cfg.beta_start * (cfg.beta_end / cfg.beta_start) ** frac


def lr_at(t: int, cfg: TrainConfig) -> float:
    """Cosine annealing with warm restarts; period k lasts ``P * mult**k`` steps."""
    period = float(cfg.restart_period)
    tau = float(t)
    while tau > period:
        tau -= period
        period *= cfg.restart_mult
    return cfg.lr_base * (1 + math.cos(math.pi * tau / period)) / 2


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0
        self.skipped = 0

    def step(self, params: dict, grads: dict, lr: float) -> bool:
        """Update ``params`` in place; returns False if the step was skipped."""
        if any(not np.all(np.isfinite(g)) for g in grads.values()):
            self.skipped += 1
            return False
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                g = np.zeros_like(p)
            if g.shape != p.shape:
                raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return True


@dataclass(frozen=True)
class ParetoPoint:
    ebops: float
    val_metric: float
    checkpoint_id: str


def dominates(a: ParetoPoint, b: ParetoPoint) -> bool:
    """Lower-or-equal EBOPs and higher-or-equal metric, strictly better in one."""
    return (a.ebops <= b.ebops and a.val_metric >= b.val_metric
            and (a.ebops < b.ebops or a.val_metric > b.val_metric))


@dataclass
class ParetoSet:
    points: list = field(default_factory=list)

    def update(self, point: ParetoPoint) -> tuple[bool, list]:
        """Insert ``point`` if not dominated; returns (accepted, evicted points)."""
        for p in self.points:
            if dominates(p, point) or (p.ebops == point.ebops and p.val_metric == point.val_metric):
                return False, []
        evicted = [p for p in self.points if dominates(point, p)]
        self.points = sorted([p for p in self.points if p not in evicted] + [point],
                             key=lambda p: (p.ebops, -p.val_metric))
        return True, evicted

    def best(self) -> ParetoPoint | None:
        return max(self.points, key=lambda p: (p.val_metric, -p.ebops), default=None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["checkpoint_id", "ebops", "val_metric"])
        for p in self.points:
            w.writerow([p.checkpoint_id, repr(p.ebops), repr(p.val_metric)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ParetoSet":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls([ParetoPoint(float(r["ebops"]), float(r["val_metric"]), r["checkpoint_id"]) for r in rows])

    def __len__(self):
        return len(self.points)


LOG_COLUMNS = ["epoch", "beta", "lr", "train_loss", "val_metric", "ebops"]


@dataclass
class TrainResult:
    pareto: ParetoSet
    history: list
    checkpoints: dict  # checkpoint_id -> manifest text, Pareto members only

    def run_log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for row in self.history:
            w.writerow([row["epoch"]] + [repr(float(row[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    def load(self, checkpoint_id: str) -> Sequential:
        return manifest.loads(self.checkpoints[checkpoint_id])


def task_loss(out: np.ndarray, y: np.ndarray, mode: str) -> tuple[float, np.ndarray]:
    """Mean loss and its gradient w.r.t. the model output."""
    n = out.shape[0]
    if mode == "classification":
        z = out - out.max(axis=1, keepdims=True)
        ez = np.exp(z)
        s = ez.sum(axis=1, keepdims=True)
        logp = z - np.log(s)
        loss = -logp[np.arange(n), y].mean()
        g = ez / s
        g[np.arange(n), y] -= 1
        return float(loss), g / n
    diff = out.reshape(n, -1) - np.asarray(y, dtype=np.float64).reshape(n, -1)
    return float(np.mean(diff ** 2)), (2 * diff / diff.size).reshape(out.shape)


def val_metric(model: Sequential, x: np.ndarray, y: np.ndarray, mode: str) -> float:
    out = model.forward(x, training=False)
    if mode == "classification":
        return metric_accuracy(out, y)
    return -float(np.mean((out.reshape(len(y), -1) - np.asarray(y).reshape(len(y), -1)) ** 2))


def train(model: Sequential, data: Dataset, cfg: TrainConfig, out_dir=None,
          provenance: dict | None = None) -> TrainResult:
    """Train with the beta-swept EBOPs penalty and collect the Pareto set.

    Each epoch ends with an eval-mode validation pass; Pareto members are kept
    as manifest text (and written to ``out_dir/checkpoints`` when given).
    """
    n = len(data.x_train)
    if n == 0:
        raise TrainingError("training split is empty")
    if len(data.x_val) == 0:
        raise TrainingError("validation split is empty")
    rng = np.random.default_rng(cfg.seed)
    spec = LutPrimitiveSpec(cfg.lut_x, cfg.lut_y)
    steps = cfg.steps_per_epoch or max(1, -(-n // cfg.batch_size))
    total = cfg.epochs * steps
    adam = Adam()
    pareto = ParetoSet()
    history, checkpoints = [], {}
    prov = {"seed": cfg.seed, "config_hash": manifest.config_hash(asdict(cfg)), **(provenance or {})}
    ckpt_dir = Path(out_dir) / "checkpoints" if out_dir is not None else None
    nan_run = 0
    t = 0
    order = rng.permutation(n)
    cursor = 0
    for epoch in range(cfg.epochs):
        losses = []
        for _ in range(steps):
            if cursor + cfg.batch_size > n:
                order = rng.permutation(n)
                cursor = 0
            idx = order[cursor:cursor + cfg.batch_size]
            cursor += cfg.batch_size
            beta = beta_at(t, total, cfg)
            lr = lr_at(t, cfg)
            out = model.forward(data.x_train[idx], training=True)
            loss, g = task_loss(out, data.y_train[idx], data.mode)
            model.backward(g)
            grads = model.named_grads()
            eb, eg = ebops_model(model, spec, soft=True, with_grad=True)
            for name, ge in eg.items():
                grads[name] = grads.get(name, 0.0) + beta * ge
            loss += beta * eb
            if not math.isfinite(loss):
                nan_run += 1
                if nan_run > cfg.max_nan_steps:
                    raise TrainingError(f"loss was non-finite for {nan_run} consecutive steps "
                                        f"(epoch {epoch}, step {t}); lower lr_base or beta_end")
            else:
                nan_run = 0
                losses.append(loss)
            adam.step(model.named_params(), grads, lr)
            model.clip_frac_bits()
            t += 1
        metric = val_metric(model, data.x_val, data.y_val, data.mode)
        ebops = ebops_model(model, spec)
        row = {"epoch": epoch, "beta": beta_at(t, total, cfg), "lr": lr_at(t, cfg),
               "train_loss": float(np.mean(losses)) if losses else float("nan"),
               "val_metric": metric, "ebops": ebops}
        history.append(row)
        log.info("epoch %d loss %.4f val %.4f ebops %.1f", epoch, row["train_loss"], metric, ebops)
        point = ParetoPoint(ebops, metric, f"epoch{epoch:04d}")
        accepted, evicted = pareto.update(point)
        if accepted:
            text = manifest.dumps(model, {**prov, "epoch": epoch, "ebops": ebops, "val_metric": metric})
            checkpoints[point.checkpoint_id] = text
            if ckpt_dir is not None:
                atomic_write_text(ckpt_dir / f"{point.checkpoint_id}.json", text)
        for p in evicted:
            checkpoints.pop(p.checkpoint_id, None)
            if ckpt_dir is not None:
                (ckpt_dir / f"{p.checkpoint_id}.json").unlink(missing_ok=True)
    result = TrainResult(pareto, history, checkpoints)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_text(out / "run_log.csv", result.run_log_csv())
        atomic_write_text(out / "pareto.csv", pareto.to_csv())
    return result
