##############################################################################
# train.py
# AdamW with a per-step cosine schedule, epoch loop, evaluation, checkpoints
##############################################################################
import concurrent.futures
import csv
import dataclasses
import logging
import math
import os
import time
from typing import List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy
import torch

from bimamba import ops, utils
from bimamba._cgroup_cpu_count import loader_worker_count
from bimamba._exceptions import ConfigError, NonFiniteError, NumericalFailure
from bimamba.data import LabeledSample, augment
from bimamba.metrics import auroc
from bimamba.model import BiMambaModel, bce_loss, probability
from bimamba.serialization import save_checkpoint

__all__ = [
    "TrainConfig",
    "HistoryRow",
    "EvalResult",
    "TrainResult",
    "cosine_lr",
    "make_optimizer",
    "adamw_step",
    "evaluate",
    "train_loop",
    "write_history",
    "read_history",
]

logger = logging.getLogger(__name__)

HISTORY_NAME = "history.csv"
CHECKPOINT_NAME = "best.bimb"
HISTORY_FIELDS = ("epoch", "train_loss", "val_auroc", "lr")

# Parameters named like this are exempt from weight decay
_NO_DECAY_SUFFIXES = ("bias", "gain", "cls_token", "pos_embedding")


@dataclasses.dataclass
class TrainConfig:
    lr: float = 5e-6
    weight_decay: float = 1e-8
    batch_size: int = 24
    epochs: int = 30
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    # Linear warmup steps before the cosine decay; 0 disables
    warmup_steps: int = 0
    # Global gradient norm limit; 0 disables
    clip_grad_norm: float = 0.0
    augment: bool = True
    # Batch preparation threads; 0 sizes the pool from the CPU budget
    workers: int = 0
    eval_batch_size: int = 64

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigError(f"lr must be a finite value >= 0, got {self.lr}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be at least 1")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0 or self.weight_decay < 0:
            raise ConfigError("eps must be positive, weight_decay >= 0")
        if self.warmup_steps < 0 or self.clip_grad_norm < 0:
            raise ConfigError("warmup_steps and clip_grad_norm must be >= 0")
        if self.workers < 0:
            raise ConfigError("workers must be >= 0")


class HistoryRow(NamedTuple):
    epoch: int
    train_loss: float
    val_auroc: float
    lr: float


class EvalResult(NamedTuple):
    scores: numpy.ndarray
    labels: numpy.ndarray
    auroc: float
    logits: numpy.ndarray


class TrainResult(NamedTuple):
    history: List[HistoryRow]
    best_epoch: int
    best_val_auroc: float
    checkpoint_path: Optional[str]


def cosine_lr(
    step: int, total_steps: int, lr_init: float, warmup_steps: int = 0
) -> float:
    """
    ``lr_init * 0.5 * (1 + cos(pi * step / total_steps))``, optionally
    preceded by a linear warmup over the first `warmup_steps` steps.
    """
    if not 0 <= step <= total_steps:
        raise ValueError(
            f"step {step} outside the schedule [0, {total_steps}]"
        )
    if step < warmup_steps:
        return lr_init * (step + 1) / warmup_steps
    span = total_steps - warmup_steps
    if span <= 0:
        return lr_init
    progress = (step - warmup_steps) / span
    return lr_init * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(
    model: torch.nn.Module, config: TrainConfig
) -> torch.optim.AdamW:
    """
    AdamW over two parameter groups: decayed weights, and the exempt norm
    gains, biases, ``[CLS]`` token and positional table.
    """
    decay, exempt = [], []
    for name, param in model.named_parameters():
        if name.endswith(_NO_DECAY_SUFFIXES):
            exempt.append(param)
        else:
            decay.append(param)
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": config.weight_decay},
            {"params": exempt, "weight_decay": 0.0},
        ],
        lr=config.lr,
        betas=(config.beta1, config.beta2),
        eps=config.eps,
    )


def adamw_step(optimizer: torch.optim.Optimizer, lr: float) -> None:
    """
    One AdamW update at learning rate `lr`: decoupled decay
    ``theta *= 1 - lr * wd`` followed by the bias-corrected adaptive step.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr
    optimizer.step()


def _batches(
    n: int, batch_size: int, rng: Optional[numpy.random.Generator]
) -> List[numpy.ndarray]:
    order = numpy.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _stack(
    samples: Sequence[LabeledSample], dtype: torch.dtype
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    frontal = torch.from_numpy(numpy.stack([s.frontal for s in samples]))
    lateral = torch.from_numpy(numpy.stack([s.lateral for s in samples]))
    labels = torch.tensor([s.label for s in samples], dtype=dtype)
    return frontal.to(dtype), lateral.to(dtype), labels


def evaluate(
    model: BiMambaModel,
    samples: Sequence[LabeledSample],
    batch_size: int = 64,
) -> EvalResult:
    """
    Scores every sample with the model's probability of a positive.

    AUROC is ranked by logit, which keeps confident predictions distinct
    after the sigmoid saturates. Scores are float64 probabilities.
    """
    chunks = [torch.zeros(0, dtype=torch.float64)]
    with torch.no_grad():
        for indices in _batches(len(samples), batch_size, None):
            frontal, lateral, _ = _stack(
                [samples[i] for i in indices], model.dtype
            )
            chunks.append(model(frontal, lateral).double())
    logits = torch.cat(chunks)
    scores = probability(logits).numpy()
    logits = logits.numpy()
    labels = numpy.array([s.label for s in samples], dtype=numpy.int64)
    return EvalResult(scores, labels, auroc(logits, labels), logits)


class _BatchPreparer:
    # Each sample's augmentation draws from a stream keyed by
    # (seed, epoch, position), so output does not depend on thread timing.
    def __init__(
        self,
        samples: Sequence[LabeledSample],
        config: TrainConfig,
        dtype: torch.dtype,
    ):
        self.samples = samples
        self.config = config
        self.dtype = dtype

    def __call__(self, job: Tuple[int, numpy.ndarray]):
        epoch, indices = job
        batch = []
        for i in indices:
            sample = self.samples[i]
            if self.config.augment:
                rng = numpy.random.default_rng(
                    [self.config.seed, epoch, int(i)]
                )
                sample = augment(sample, rng)
            batch.append(sample)
        return _stack(batch, self.dtype)


def write_history(path: Union[str, os.PathLike], rows: List[HistoryRow]):
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for row in rows:
            writer.writerow(
                (
                    row.epoch,
                    repr(row.train_loss),
                    repr(row.val_auroc),
                    repr(row.lr),
                )
            )


def read_history(path: Union[str, os.PathLike]) -> List[HistoryRow]:
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        return [
            HistoryRow(
                int(r["epoch"]),
                float(r["train_loss"]),
                float(r["val_auroc"]),
                float(r["lr"]),
            )
            for r in reader
        ]


def train_loop(
    model: BiMambaModel,
    train_samples: Sequence[LabeledSample],
    val_samples: Sequence[LabeledSample],
    config: TrainConfig,
    out_dir: Optional[Union[str, os.PathLike]] = None,
) -> TrainResult:
    """
    Trains `model` in place.

    Every epoch shuffles (seeded), augments, runs one AdamW step per batch
    with the per-step cosine learning rate, then scores the validation set.
    The checkpoint with the best validation AUROC and the history CSV go to
    `out_dir` when it is given.

    Raises:
        NumericalFailure: If a forward pass or loss becomes non-finite; the
            exception names the global batch index.
    """
    if not train_samples or not val_samples:
        raise ConfigError(
            f"Training needs nonempty train and val splits, got"
            f" {len(train_samples)} and {len(val_samples)} samples"
        )
    torch.manual_seed(config.seed)
    optimizer = make_optimizer(model, config)
    steps_per_epoch = math.ceil(len(train_samples) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch
    prepare = _BatchPreparer(train_samples, config, model.dtype)
    shuffle = numpy.random.default_rng(config.seed)

    checkpoint_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        checkpoint_path = os.path.join(out_dir, CHECKPOINT_NAME)

    logger.info(
        f"Training {model.config.mode} model: {len(train_samples)} train /"
        f" {len(val_samples)} val samples, {config.epochs} epochs of"
        f" {steps_per_epoch} steps; {utils.get_mem_usage()}"
    )
    history: List[HistoryRow] = []
    best_epoch, best_auroc = 0, -math.inf
    step = 0
    workers = loader_worker_count(config.workers)
    with concurrent.futures.ThreadPoolExecutor(
        max_workers=workers, thread_name_prefix="BiMambaLoader"
    ) as executor:
        for epoch in range(1, config.epochs + 1):
            start = time.perf_counter()
            jobs = [
                (epoch, b)
                for b in _batches(
                    len(train_samples), config.batch_size, shuffle
                )
            ]
            loss_sum, sample_count, lr = 0.0, 0, config.lr
            for frontal, lateral, labels in executor.map(prepare, jobs):
                lr = cosine_lr(
                    step, total_steps, config.lr, config.warmup_steps
                )
                try:
                    loss = bce_loss(model(frontal, lateral), labels)
                except NonFiniteError as e:
                    raise NumericalFailure(
                        f"Non-finite values at batch {step} (epoch {epoch}):"
                        f" {e}",
                        batch_index=step,
                    ) from e
                optimizer.zero_grad(set_to_none=True)
                ops.backward(loss)
                if config.clip_grad_norm > 0:
                    torch.nn.utils.clip_grad_norm_(
                        model.parameters(), config.clip_grad_norm
                    )
                adamw_step(optimizer, lr)
                loss_sum += float(loss) * len(labels)
                sample_count += len(labels)
                step += 1

            val = evaluate(model, val_samples, config.eval_batch_size)
            row = HistoryRow(epoch, loss_sum / sample_count, val.auroc, lr)
            history.append(row)
            if val.auroc > best_auroc:
                best_epoch, best_auroc = epoch, val.auroc
                if checkpoint_path is not None:
                    save_checkpoint(model, checkpoint_path)
            if out_dir is not None:
                write_history(os.path.join(out_dir, HISTORY_NAME), history)
            logger.info(
                f"Epoch {epoch}/{config.epochs}: train loss"
                f" {row.train_loss:.5f}, val AUROC {row.val_auroc:.4f},"
                f" lr {lr:.3g} ({time.perf_counter() - start:.1f}s)"
            )

    logger.info(
        f"Best val AUROC {best_auroc:.4f} at epoch {best_epoch};"
        f" {utils.get_mem_usage()}"
    )
    return TrainResult(history, best_epoch, best_auroc, checkpoint_path)
