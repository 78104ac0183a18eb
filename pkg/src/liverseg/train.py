"""Training protocol: Adam, step-decay learning rate, batch-size-1 epoch loop.

Every source of randomness (weight init, split, per-epoch case order) is
drawn from seeded generators, so a run is a pure function of
(seed, config, dataset).
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import ShapeMismatch, ops
from .metrics import dice

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "val_dice")


class TooFewCases(ValueError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    decay_factor: float = 0.1
    decay_every: int = 50
    epochs: int = 150
    batch_size: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    seed: int = 0
    split_ratios: tuple = (87 / 123, 18 / 123, 18 / 123)

    def __post_init__(self):
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.epochs < 1 or self.decay_every < 1:
            raise ValueError("epochs and decay_every must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size 1 is supported")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        _check_ratios(self.split_ratios)

    def to_dict(self):
        return asdict(self)


def _check_ratios(ratios):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise ValueError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // cfg.decay_every
    inv = 1.0 / cfg.decay_factor
    if abs(inv - round(inv)) < 1e-9:
        # divide by an exact integer power so 1e-3 decays to exactly 1e-4, 1e-5, ...
        return cfg.lr0 / round(inv) ** k
    return cfg.lr0 * cfg.decay_factor ** k


# -- Adam ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, t: int,
              beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update, in place on the arrays of ``params``.

    Missing gradients count as zero.  Returns ``params`` and ``state``.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        elif g.shape != p.shape:
            raise ShapeMismatch(f"{name}: grad {g.shape} vs param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        p -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype, copy=False)
    state.t = t
    return params, state


# -- splitting ----------------------------------------------------------------------

def split_sizes(n: int, ratios) -> tuple:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    _check_ratios(ratios)
    quotas = [r * n for r in ratios]
    sizes = [int(math.floor(q + 1e-9)) for q in quotas]
    order = sorted(range(3), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return tuple(sizes)


def split_dataset(cases, ratios, seed):
    cases = list(cases)
    if len(cases) < 3:
        raise TooFewCases(f"need at least 3 cases to split, got {len(cases)}")
    n_train, n_val, _ = split_sizes(len(cases), ratios)
    order = np.random.default_rng(seed).permutation(len(cases))
    shuffled = [cases[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:n_train + n_val], shuffled[n_train + n_val:]


# -- loop ---------------------------------------------------------------------------

def mean_foreground_dice(pred, truth, num_classes=10):
    """Mean Dice over classes 1..num_classes-1 (both-empty classes score 1)."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    return float(np.mean([dice(pred == c, truth == c) for c in range(1, num_classes)]))


def evaluate_dice(model, cases) -> float:
    if not cases:
        return float("nan")
    scores = [mean_foreground_dice(model.predict(c.image).data, c.labels.data, model.cfg.classes) for c in cases]
    return float(np.mean(scores))


@dataclass
class TrainResult:
    rows: list
    best_epoch: int
    best_val_dice: float

    def log_csv(self) -> str:
        return format_log(self.rows)


def format_log(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LOG_COLUMNS)
    for r in rows:
        w.writerow([r["epoch"], repr(r["lr"]), repr(r["train_loss"]), repr(r["val_dice"])])
    return buf.getvalue()


def write_run_config(path, sections: dict):
    """``section.key = value`` lines, sorted, one per knob."""
    lines = []
    for section, values in sorted(sections.items()):
        for key, val in sorted(values.items()):
            if isinstance(val, (list, tuple)):
                val = " ".join(str(x) for x in val)
            lines.append(f"{section}.{key} = {val}")
    Path(path).write_text("\n".join(lines) + "\n")


def train_step(model, image, onehot, state: AdamState, lr, cfg: TrainConfig) -> float:
    model.params.zero_grad()
    loss = ops.dice_loss(model.forward(image), onehot)
    loss.backward()
    arrays = {k: p.data for k, p in model.params.items()}
    grads = {k: p.grad for k, p in model.params.items() if p.grad is not None}
    adam_step(arrays, grads, state, lr, state.t + 1, cfg.beta1, cfg.beta2, cfg.eps_adam)
    return loss.item()


def train_loop(model, train_cases, val_cases, cfg: TrainConfig, run_dir=None, callback=None) -> TrainResult:
    """Seeded batch-1 training; per-epoch mean loss and validation Dice.

    With ``run_dir`` the CSV log (``log.csv``), the best-validation checkpoint
    (``best/``) and the final parameters (``last/``) are written there.  The
    best epoch is the first one reaching the highest validation Dice; with no
    validation cases it is the last epoch.  ``callback(row)`` is called after
    every epoch and may return True to stop early (used by convergence tests;
    the reported rows then end at that epoch).
    """
    train_cases = list(train_cases)
    val_cases = list(val_cases or [])
    if not train_cases:
        raise TooFewCases("training split is empty")
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)

    dtype = next(iter(model.params.values())).dtype
    k = model.cfg.classes
    prepared = [
        (np.asarray(c.image.data, dtype=dtype)[None], ops.one_hot(c.labels.data, k, dtype=dtype))
        for c in train_cases
    ]
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    rows, best_epoch, best_val = [], -1, -math.inf
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        t0 = time.perf_counter()
        losses = [train_step(model, *prepared[i], state, lr, cfg) for i in rng.permutation(len(prepared))]
        val = evaluate_dice(model, val_cases)
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_dice": val}
        rows.append(row)
        log.info("epoch %d lr %.3g loss %.5f val_dice %.4f (%.1fs)", epoch, lr, row["train_loss"], val,
                 time.perf_counter() - t0)
        improved = not val_cases or val > best_val
        if improved:
            best_epoch, best_val = epoch, (val if val_cases else best_val)
            if run_dir is not None:
                model.save(run_dir / "best", {"epoch": epoch, "val_dice": None if not val_cases else val})
        if run_dir is not None:
            (run_dir / "log.csv").write_text(format_log(rows))
        if callback is not None and callback(row):
            break
    if run_dir is not None:
        model.save(run_dir / "last", {"epoch": rows[-1]["epoch"]})
    return TrainResult(rows, best_epoch, best_val if val_cases else float("nan"))
