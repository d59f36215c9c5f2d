"""AdamW training loop with warmup + cosine schedule, alpha-sampling and early stopping."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .errors import ConfigurationError, DivergenceError
from .evalreport import evaluate
from .numerics import Tape, backward


@dataclass(frozen=True)
class TrainConfig:
    peak_lr: float = 1e-3
    warmup_ratio: float = 0.03
    total_steps: int = 3000
    batch_size: int = 32
    weight_decay: float = 0.01
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.5
    eval_interval: int = 100
    early_stop_patience: int = 10  # evaluations without improvement
    clip_norm: float = 1.0  # 0 disables
    seed: int = 0
    freeze: tuple[str, ...] = ()  # parameter-name prefixes left untouched

    def __post_init__(self):
        object.__setattr__(self, "freeze", tuple(self.freeze))
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigurationError(f"warmup_ratio must be in [0, 1), got {self.warmup_ratio}")
        if self.alpha < 0:
            raise ConfigurationError(f"alpha must be >= 0, got {self.alpha}")
        if self.total_steps < 0 or self.batch_size < 1 or self.eval_interval < 1:
            raise ConfigurationError("total_steps >= 0, batch_size >= 1 and eval_interval >= 1 required")
        if self.early_stop_patience < 1 or self.clip_norm < 0 or self.peak_lr < 0:
            raise ConfigurationError("early_stop_patience >= 1, clip_norm >= 0 and peak_lr >= 0 required")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["freeze"] = list(self.freeze)
        return d

    @property
    def warmup_steps(self) -> int:
        return int(round(self.warmup_ratio * self.total_steps))


def lr_at(step: int, config: TrainConfig) -> float:
    total, w = config.total_steps, config.warmup_steps
    if not 0 <= step <= total:
        raise ConfigurationError(f"step {step} outside [0, {total}]")
    if step < w:
        return config.peak_lr * step / w
    if total == w:
        return config.peak_lr
    return config.peak_lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (total - w)))


def alpha_probabilities(sizes, alpha: float) -> np.ndarray:
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.size == 0:
        raise ConfigurationError("alpha-sampling needs at least one dataset")
    if np.any(sizes <= 0):
        raise ConfigurationError(f"dataset sizes must be positive, got {sizes.tolist()}")
    p = sizes**alpha
    return p / p.sum()


def alpha_sample(sizes, alpha: float, rng: np.random.Generator, size: int | None = None):
    """Dataset index drawn with probability N_i^alpha / sum_j N_j^alpha.

    With ``size`` returns an array equal to ``size`` successive scalar draws.
    """
    p = np.cumsum(alpha_probabilities(sizes, alpha))
    idx = np.minimum(np.searchsorted(p, rng.random(size), side="right"), len(p) - 1)
    return int(idx) if size is None else idx


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def is_frozen(name: str, freeze) -> bool:
    return any(name == f or name.startswith(f if f.endswith(".") else f + ".") for f in freeze)


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, config: TrainConfig):
    """One decoupled-decay Adam update; returns (new params, new state)."""
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        if is_frozen(name, config.freeze):
            new_p[name] = p
            continue
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigurationError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        m = b1 * state.m.get(name, 0.0) + (1 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_p[name] = p - lr * config.weight_decay * p - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(t, new_m, new_v)


def clip_gradients(grads: dict, max_norm: float, names) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(grads[n] * grads[n])) for n in names))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / (norm + 1e-12)
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]  # best (float32-representable) snapshot
    history: list[dict]
    best_step: int
    best_val: float
    stopped_early: bool = False
    steps_run: int = 0


def loss_and_grads(params: dict, episodes, config: M.ModelConfig):
    tape = Tape()
    tracked = tape.watch_all(params)
    out = M.forward(tracked, episodes, config)
    loss = M.loss(out.logits, M.episode_targets(episodes, config))
    return loss.item(), backward(loss, tape), out


def train(params: dict, datasets, model_config: M.ModelConfig, config: TrainConfig) -> TrainResult:
    """Train from ``params`` on the train splits; validate on the val splits.

    The returned parameters are the float32-rounded snapshot with the best
    mean validation accuracy, which is the exact value a checkpoint stores.
    """
    datasets = list(datasets)
    if not datasets:
        raise ConfigurationError("train needs at least one dataset")
    trains = [ds.split("train") for ds in datasets]
    vals = [ds.split("val") for ds in datasets]
    for ds, tr in zip(datasets, trains):
        if not tr:
            raise ConfigurationError(f"dataset {ds.name!r} has an empty train split")
    names = _dataset_names(datasets)
    rng = np.random.default_rng([config.seed, 0x7A11])
    sizes = [len(t) for t in trains]
    trainable = [n for n in sorted(params) if not is_frozen(n, config.freeze)]

    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    best = M.float32_snapshot(params)
    best_val, best_step = -1.0, 0
    history: list[dict] = []
    state = AdamState()
    since_best = 0
    losses: list[float] = []
    stopped = False
    step = 0
    for step in range(1, config.total_steps + 1):
        i = alpha_sample(sizes, config.alpha, rng)
        n = min(config.batch_size, sizes[i])
        idx = np.sort(rng.choice(sizes[i], size=n, replace=False))
        loss, grads, _ = loss_and_grads(params, [trains[i][j] for j in idx], model_config)
        if not math.isfinite(loss):
            raise DivergenceError(step, f"non-finite loss {loss} at step {step}")
        grads, gnorm = clip_gradients(grads, config.clip_norm, trainable)
        if not math.isfinite(gnorm):
            raise DivergenceError(step, f"non-finite gradient norm at step {step}")
        params, state = adamw_step(params, grads, state, lr_at(step, config), config)
        losses.append(loss)

        if step % config.eval_interval == 0 or step == config.total_steps:
            snap = M.float32_snapshot(params)
            row = {"step": step, "loss": float(np.mean(losses)), "lr": lr_at(step, config)}
            losses = []
            accs = []
            betas: dict[int, list[float]] = {}
            for name, val in zip(names, vals):
                if not val:
                    continue
                res = evaluate(snap, val, model_config)
                row[f"val_acc_{name}"] = res.accuracy
                accs.append(res.accuracy)
                for m, b in res.mean_beta_all.items():
                    betas.setdefault(m, []).append(b)
            mean_acc = float(np.mean(accs)) if accs else float("nan")
            row["val_acc_mean"] = mean_acc
            for m in sorted(betas):
                row[f"mean_beta_m{m}"] = float(np.mean(betas[m]))
            history.append(row)
            if accs and mean_acc >= best_val:  # ties keep the later snapshot
                best, best_val, best_step, since_best = snap, mean_acc, step, 0
            else:
                since_best += 1
                if since_best >= config.early_stop_patience:
                    stopped = True
                    break
    if best_val < 0 and config.total_steps > 0:
        best = M.float32_snapshot(params)
        best_step = step
    return TrainResult(best, history, best_step, best_val, stopped, step)


def _dataset_names(datasets) -> list[str]:
    names, seen = [], {}
    for ds in datasets:
        n = ds.name
        seen[n] = seen.get(n, 0) + 1
        names.append(n if seen[n] == 1 else f"{n}{seen[n]}")
    return names


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_history_csv(history: list[dict], path) -> Path:
    path = Path(path)
    columns: list[str] = []
    for row in history:
        for k in row:
            if k not in columns:
                columns.append(k)
    if not columns:
        columns = ["step", "loss", "lr"]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for row in history:
            w.writerow([_fmt(row[c]) if c in row else "" for c in columns])
    return path
