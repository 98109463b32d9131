"""Training and sampling for the denoising diffusion model.

Training regresses the network output onto the injected Gaussian noise;
sampling runs the ancestral reverse chain from pure noise down to step 1.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .network import Denoiser, NetworkConfig
from .schedule import DiffusionSchedule

log = logging.getLogger(__name__)

# summed over time steps, averaged over the batch
LOSS_REDUCTION = "sum_time_mean_batch"


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 4
    learning_rate: float = 1e-3
    early_stop_patience: int = 20
    seed: int = 0
    grad_clip: float = 1.0
    # "cosine" anneals from learning_rate to final_lr_fraction * learning_rate
    lr_schedule: str = "cosine"
    final_lr_fraction: float = 0.01
    # weights returned after training are an exponential moving average; 0 disables
    ema_decay: float = 0.999
    # balance the diffusion steps drawn within each epoch (each row stays uniform)
    stratify_steps: bool = True

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.early_stop_patience < 1:
            raise ValueError("epochs, batch_size and early_stop_patience must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.early_stop_patience > self.epochs:
            raise ValueError("early_stop_patience cannot exceed epochs")


# -- normalization -------------------------------------------------------------

@dataclass(frozen=True)
class NormalizationRecord:
    data_min: float
    data_max: float
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {"data_min": self.data_min, "data_max": self.data_max, "degenerate": self.degenerate}

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationRecord":
        return cls(float(d["data_min"]), float(d["data_max"]), bool(d.get("degenerate", False)))


def normalize(raw, record: NormalizationRecord | None = None):
    """Affine map of the whole matrix onto [-1, 1] using one global min/max.

    Returns ``(normalized, record)``. A constant input maps to zeros and the
    record is flagged degenerate.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if record is None:
        lo, hi = float(raw.min()), float(raw.max())
        record = NormalizationRecord(lo, hi, degenerate=(hi == lo))
    if record.degenerate:
        return np.zeros_like(raw), record
    scaled = 2.0 * (raw - record.data_min) / (record.data_max - record.data_min) - 1.0
    return scaled, record


def denormalize(values, record: NormalizationRecord) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if record.degenerate:
        return np.full_like(values, record.data_min)
    return (values + 1.0) / 2.0 * (record.data_max - record.data_min) + record.data_min


@dataclass
class ScenarioBatch:
    """n x L matrix of scenarios with optional per-row integer labels."""

    values: np.ndarray
    labels: np.ndarray | None = None
    record: NormalizationRecord | None = None

    def __post_init__(self):
        self.values = np.atleast_2d(np.asarray(self.values, dtype=np.float64))
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (len(self.values),):
                raise ValueError("labels must have one entry per row")

    def __len__(self) -> int:
        return len(self.values)

    @property
    def length(self) -> int:
        return self.values.shape[1]


def write_batch_csv(path, batch: ScenarioBatch) -> None:
    """One row per scenario; header ``t0001..tL`` with an optional leading ``label``."""
    L = batch.length
    width = max(4, len(str(L)))
    header = [f"t{i:0{width}d}" for i in range(1, L + 1)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((["label"] if batch.labels is not None else []) + header)
        for i, row in enumerate(batch.values):
            cells = [repr(float(v)) for v in row]
            if batch.labels is not None:
                cells.insert(0, str(int(batch.labels[i])))
            w.writerow(cells)


def read_batch_csv(path) -> ScenarioBatch:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty scenario file")
    header, body = rows[0], rows[1:]
    if not body:
        raise ValueError(f"{path}: no scenario rows")
    has_label = header[0] == "label"
    data = np.array([[float(c) for c in r[1 if has_label else 0:]] for r in body])
    labels = np.array([int(r[0]) for r in body]) if has_label else None
    return ScenarioBatch(data, labels)


# -- loss and training --------------------------------------------------------

def _schedule_tensors(sched: DiffusionSchedule, dtype) -> dict[str, torch.Tensor]:
    ab = torch.tensor(sched.alpha_bar, dtype=torch.float64)
    return {
        "sqrt_ab": ab.sqrt().to(dtype),
        "sqrt_1m_ab": (1 - ab).sqrt().to(dtype),
    }


def training_loss(
    x0: torch.Tensor,
    model: Callable,
    sched: DiffusionSchedule,
    generator: torch.Generator,
    labels: torch.Tensor | None = None,
    steps: torch.Tensor | None = None,
) -> torch.Tensor:
    """Noise-prediction loss for one batch.

    Each row draws its own step ``t ~ U{1..T}`` (unless ``steps`` is given)
    and noise ``eps ~ N(0, I)``; the squared error is summed over time and
    averaged over rows.
    """
    if x0.shape[0] == 0:
        raise ValueError("empty batch")
    n = x0.shape[0]
    tabs = _schedule_tensors(sched, x0.dtype)
    t = torch.randint(1, sched.T + 1, (n,), generator=generator) if steps is None else steps
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    xt = tabs["sqrt_ab"][t - 1, None] * x0 + tabs["sqrt_1m_ab"][t - 1, None] * eps
    eps_hat = model(xt, t, labels) if labels is not None else model(xt, t)
    return ((eps - eps_hat) ** 2).sum(dim=1).mean()


def build_model(config: NetworkConfig, seed: int = 0, dtype=torch.float32) -> Denoiser:
    torch.manual_seed(seed)
    return Denoiser(config).to(dtype)


@dataclass
class TrainResult:
    model: Denoiser
    history: list[float] = field(default_factory=list)
    stop_reason: str = "epoch_limit"


def train(
    values,
    model: Denoiser,
    sched: DiffusionSchedule,
    cfg: TrainConfig,
    labels=None,
    progress: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Fit ``model`` on normalized ``values`` (n x L) with Adam.

    The learning rate starts at ``cfg.learning_rate`` and, with the cosine
    schedule, decays over the epoch budget.

    Stops at ``cfg.epochs`` or once the epoch-mean loss has not improved for
    ``cfg.early_stop_patience`` epochs. An epoch in which no parameter moved
    (e.g. zero learning rate) never counts as an improvement, since its loss
    differs from the best only by sampling noise.

    With ``cfg.stratify_steps`` the steps of one epoch are a shuffled, nearly
    balanced multiset of ``1..T``, which cuts the noise in the epoch loss. With
    ``cfg.ema_decay > 0`` the model ends up holding the moving average of its
    weights.
    """
    dtype = next(model.parameters()).dtype
    data = torch.as_tensor(np.asarray(values), dtype=dtype)
    if data.ndim != 2 or len(data) == 0:
        raise ValueError("training data must be a non-empty n x L matrix")
    if model.config.conditional and labels is None:
        raise ValueError("conditional model needs training labels")
    if not model.config.conditional and labels is not None:
        raise ValueError("unconditional model cannot take labels")
    lab = None if labels is None else torch.as_tensor(np.asarray(labels), dtype=torch.long)

    gen = torch.Generator().manual_seed(cfg.seed)
    shuffle_rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.learning_rate)
    sched_lr = None
    if cfg.lr_schedule == "cosine":
        sched_lr = torch.optim.lr_scheduler.CosineAnnealingLR(
            opt, T_max=cfg.epochs, eta_min=cfg.learning_rate * cfg.final_lr_fraction)
    ema = [p.detach().clone() for p in model.parameters()] if cfg.ema_decay > 0 else None
    updates = 0
    model.train()

    result = TrainResult(model)
    best = math.inf
    stale = 0
    n = len(data)
    for epoch in range(1, cfg.epochs + 1):
        before = [p.detach().clone() for p in model.parameters()]
        order = shuffle_rng.permutation(n)
        steps = _epoch_steps(n, sched.T, gen) if cfg.stratify_steps else None
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            loss = training_loss(data[idx], model, sched, gen, None if lab is None else lab[idx],
                                 None if steps is None else steps[start:start + cfg.batch_size])
            if not torch.isfinite(loss):
                raise TrainingDivergedError(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            if cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if ema is not None:
                updates += 1
                # short warm-up so early averages are not dominated by the initial weights
                decay = min(cfg.ema_decay, (1 + updates) / (10 + updates))
                with torch.no_grad():
                    for e, p in zip(ema, model.parameters()):
                        e.lerp_(p, 1 - decay)
            total += loss.item() * len(idx)
        epoch_loss = total / n
        if sched_lr is not None:
            sched_lr.step()
        result.history.append(epoch_loss)
        if progress is not None:
            progress(epoch, epoch_loss)

        moved = any(not torch.equal(b, p) for b, p in zip(before, model.parameters()))
        if epoch == 1 or (moved and epoch_loss < best):
            best = min(best, epoch_loss)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.early_stop_patience:
                result.stop_reason = "early_stop"
                log.info("early stop after epoch %d (best loss %.5g)", epoch, best)
                break
    if ema is not None:
        with torch.no_grad():
            for e, p in zip(ema, model.parameters()):
                p.copy_(e)
    model.eval()
    return result


def _epoch_steps(n: int, T: int, generator: torch.Generator) -> torch.Tensor:
    """Steps for ``n`` rows: full copies of 1..T plus a random remainder, shuffled."""
    full = torch.arange(1, T + 1).repeat(n // T)
    rest = torch.randperm(T, generator=generator)[: n % T] + 1
    both = torch.cat([full, rest])
    return both[torch.randperm(n, generator=generator)]


def write_loss_history(path, history: Sequence[float]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss"])
        for i, v in enumerate(history, 1):
            w.writerow([i, repr(float(v))])


# -- sampling -----------------------------------------------------------------

def _stream_seed(seed: int, job: int) -> int:
    return int(np.random.SeedSequence([seed, job]).generate_state(1)[0])


@torch.no_grad()
def reverse_chain(
    model: Callable,
    sched: DiffusionSchedule,
    n: int,
    length: int,
    generator: torch.Generator,
    label: torch.Tensor | None = None,
    dtype=torch.float32,
) -> torch.Tensor:
    """Run x_T ~ N(0, I) through steps T..1; returns normalized x_0."""
    beta = torch.tensor(sched.beta, dtype=torch.float64)
    ab = torch.tensor(sched.alpha_bar, dtype=torch.float64)
    coef_eps = (beta / (1 - ab).sqrt()).to(dtype)
    inv_sqrt_keep = (1 / (1 - beta).sqrt()).to(dtype)
    sigma = torch.tensor(np.sqrt(sched.beta_tilde), dtype=dtype)

    x = torch.randn((n, length), generator=generator, dtype=dtype)
    for t in range(sched.T, 0, -1):
        steps = torch.full((n,), t, dtype=torch.long)
        eps_hat = model(x, steps, label) if label is not None else model(x, steps)
        mean = inv_sqrt_keep[t - 1] * (x - coef_eps[t - 1] * eps_hat)
        if t > 1:
            z = torch.randn((n, length), generator=generator, dtype=dtype)
            x = mean + sigma[t - 1] * z
        else:
            x = mean
    return x


def sample(
    model: Denoiser,
    sched: DiffusionSchedule,
    n: int,
    label: int | Sequence[int] | None = None,
    seed: int = 0,
    record: NormalizationRecord | None = None,
    chunk: int = 100,
    clip: bool = True,
) -> ScenarioBatch:
    """Draw ``n`` scenarios, de-normalized with ``record`` when given.

    Work is split into chunks of ``chunk`` rows; chunk ``j`` uses its own
    generator seeded from ``(seed, j)`` so results do not depend on how the
    chunks are scheduled. With ``clip`` the final normalized values are
    clamped to the training range [-1, 1].
    """
    cfg = model.config
    if cfg.conditional and label is None:
        raise ValueError("conditional model requires a label for sampling")
    if not cfg.conditional and label is not None:
        raise ValueError("unconditional model does not take a label")
    labels = None
    if label is not None:
        labels = np.broadcast_to(np.asarray(label, dtype=np.int64), (n,)).copy()
        if labels.min() < 0 or labels.max() >= cfg.n_labels:
            raise ValueError(f"label outside vocabulary of size {cfg.n_labels}")

    dtype = next(model.parameters()).dtype
    model.eval()
    parts = []
    for j, start in enumerate(range(0, n, chunk)):
        m = min(chunk, n - start)
        gen = torch.Generator().manual_seed(_stream_seed(seed, j))
        lab = None if labels is None else torch.as_tensor(labels[start:start + m])
        parts.append(reverse_chain(model, sched, m, cfg.seq_len, gen, lab, dtype))
    x = torch.cat(parts).double().numpy() if parts else np.zeros((0, cfg.seq_len))
    if clip:
        x = np.clip(x, -1.0, 1.0)
    if record is not None:
        x = denormalize(x, record)
    return ScenarioBatch(x, labels, record)
