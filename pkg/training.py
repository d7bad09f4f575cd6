"""
Training loop: temperature-sampled directions, token-budget batches bucketed by
length, label-smoothed target-only loss, inverse-sqrt schedule, Adam,
periodic validation and checkpointing, LoRA or full-parameter updates.

Every step draws its batch and dropout masks from RNG streams seeded with
(seed, step), so a run resumed from a saved state reproduces the
uninterrupted run exactly.
"""

import csv
import io
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

import checkpoint
import tensor as T
from corpus import BOS_ID, PAD_ID, ConnectivityGraph, LanguageSpec, TranslationInstance, encode
from errors import ConfigError, NonFiniteError
from layout import IGNORE_LABEL, PackedBatch, PackedSequence, Variant, pack_batch, pack_sequence
from model import ModelParams, forward
from utils import atomic_write_text, direction_name

logger = logging.getLogger(__name__)

FULL, LORA = "full", "lora"


@dataclass
class TrainConfig:
    lr_peak: float = 5e-4
    warmup_steps: int = 400
    max_steps: int = 5000
    batch_tokens: int = 2048
    label_smoothing: float = 0.1
    sampling_temperature: float = 5.0
    seed: int = 1
    mode: str = FULL
    grad_clip: float = 1.0
    accumulation: int = 1
    bucket_pool: int = 64           # candidates drawn per step before bucketing
    log_interval: int = 50
    valid_interval: int = 500
    save_interval: int = 1000
    average_last: int = 5

    def __post_init__(self):
        if self.warmup_steps < 1:
            raise ConfigError(f"warmup_steps must be >= 1, got {self.warmup_steps}")
        if self.sampling_temperature <= 0:
            raise ConfigError(f"sampling temperature must be > 0, got {self.sampling_temperature}")
        if self.mode not in (FULL, LORA):
            raise ConfigError(f"unknown training mode: {self.mode}")
        if self.accumulation < 1 or self.max_steps < 0 or self.batch_tokens < 1:
            raise ConfigError("accumulation >= 1, max_steps >= 0 and batch_tokens >= 1 required")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")


# ------------------------------
# Log
# ------------------------------

@dataclass
class TrainLog:
    """
    Per-step losses and validation losses.

    The validation CSV keeps the `epoch` column name, but its value is the
    validation round `step // valid_interval`, not a pass over the data.
    """
    steps: List[Tuple[int, float, float]] = field(default_factory=list)   # step, lr, train_loss
    valid: List[Tuple[int, float]] = field(default_factory=list)          # valid round, valid_loss

    def record_step(self, step: int, lr: float, loss: float):
        if self.steps and step <= self.steps[-1][0]:
            raise ConfigError(f"log steps must increase: {step} after {self.steps[-1][0]}")
        self.steps.append((step, lr, loss))

    def record_valid(self, valid_round: int, loss: float):
        self.valid.append((valid_round, loss))

    @staticmethod
    def _csv(header, rows) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows([[repr(v) if isinstance(v, float) else v for v in row] for row in rows])
        return buf.getvalue()

    def train_csv(self) -> str:
        return self._csv(["step", "lr", "train_loss"], self.steps)

    def valid_csv(self) -> str:
        return self._csv(["epoch", "valid_loss"], self.valid)

    def write(self, out_dir: str):
        atomic_write_text(os.path.join(out_dir, "train_log.csv"), self.train_csv())
        atomic_write_text(os.path.join(out_dir, "valid_log.csv"), self.valid_csv())

    @classmethod
    def read(cls, out_dir: str, up_to_step: int, valid_interval: int) -> "TrainLog":
        log = cls()
        path = os.path.join(out_dir, "train_log.csv")
        if os.path.exists(path):
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    if int(row["step"]) <= up_to_step:
                        log.steps.append((int(row["step"]), float(row["lr"]), float(row["train_loss"])))
        path = os.path.join(out_dir, "valid_log.csv")
        if os.path.exists(path):
            with open(path, newline="") as f:
                for row in csv.DictReader(f):
                    valid_round = int(row["epoch"])
                    if valid_round * valid_interval <= up_to_step:
                        log.valid.append((valid_round, float(row["valid_loss"])))
        return log


# ------------------------------
# Schedule and sampling
# ------------------------------

def lr_schedule(step: int, lr_peak: float, warmup: int) -> float:
    """Linear warmup to lr_peak, then inverse square root decay."""
    if step < 1:
        raise ConfigError(f"step must be >= 1, got {step}")
    if step <= warmup:
        return lr_peak * step / warmup
    return lr_peak * math.sqrt(warmup / step)


def direction_probabilities(edge_sizes: Mapping[Tuple[int, int], int], temperature: float):
    """Edges and their sampling probabilities, proportional to size^(1/T)."""
    if not edge_sizes:
        raise ConfigError("cannot sample from an empty edge set")
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    edges = sorted(edge_sizes)
    sizes = np.array([edge_sizes[e] for e in edges], dtype=np.float64)
    if (sizes <= 0).any():
        raise ConfigError("every edge needs a positive size")
    weights = sizes ** (1.0 / temperature)
    return edges, weights / weights.sum()


def sample_direction(edge_sizes: Mapping[Tuple[int, int], int], temperature: float,
                     rng: np.random.Generator) -> Tuple[int, int]:
    edges, probs = direction_probabilities(edge_sizes, temperature)
    return edges[int(rng.choice(len(edges), p=probs))]


# ------------------------------
# Batching
# ------------------------------

def pack_instances(instances: Sequence[TranslationInstance], languages: Sequence[LanguageSpec],
                   variant) -> List[PackedSequence]:
    variant = Variant.parse(variant)
    return [pack_sequence(*encode(inst, languages), variant, BOS_ID) for inst in instances]


def bucket_batches(sequences: Sequence[PackedSequence], batch_tokens: int) -> List[List[PackedSequence]]:
    """
    Sort by source length and cut into batches whose padded size
    (batch size x longest sequence) stays within the token budget.
    """
    order = sorted(range(len(sequences)), key=lambda i: (sequences[i].layout.src_len,
                                                         sequences[i].layout.length, i))
    batches, current, longest = [], [], 0
    for i in order:
        seq = sequences[i]
        new_longest = max(longest, seq.layout.length)
        if current and new_longest * (len(current) + 1) > batch_tokens:
            batches.append(current)
            current, new_longest = [], seq.layout.length
        current.append(seq)
        longest = new_longest
    if current:
        batches.append(current)
    return batches


class BatchSampler:
    """Draws the training batch of a given step; a pure function of (seed, step)."""

    def __init__(self, instances: Sequence[TranslationInstance], languages: Sequence[LanguageSpec],
                 variant, config: TrainConfig):
        if not instances:
            raise ConfigError("training split is empty")
        self.languages = languages
        self.variant = Variant.parse(variant)
        self.config = config
        self.pools: Dict[Tuple[int, int], List[TranslationInstance]] = {}
        for inst in instances:
            self.pools.setdefault(inst.direction, []).append(inst)
        self.edge_sizes = {d: len(pool) for d, pool in self.pools.items()}
        self.edges, self.probs = direction_probabilities(self.edge_sizes, config.sampling_temperature)

    def batch(self, step: int, micro: int = 0) -> PackedBatch:
        rng = np.random.default_rng([self.config.seed, step, micro])
        picks = rng.choice(len(self.edges), size=self.config.bucket_pool, p=self.probs)
        drawn = []
        for e in picks:
            pool = self.pools[self.edges[int(e)]]
            drawn.append(pool[int(rng.integers(len(pool)))])
        buckets = bucket_batches(pack_instances(drawn, self.languages, self.variant),
                                 self.config.batch_tokens)
        return pack_batch(buckets[int(rng.integers(len(buckets)))], PAD_ID)


# ------------------------------
# Steps
# ------------------------------

def batch_loss(params: ModelParams, batch: PackedBatch, smoothing: float, train: bool = False,
               rng: Optional[np.random.Generator] = None) -> T.Tensor:
    """Label-smoothed cross entropy over target slots only."""
    logits = forward(params, batch, train=train, rng=rng)
    B, L, V = logits.shape
    labels = batch.labels.reshape(-1)
    return T.cross_entropy_label_smoothed(T.reshape(logits, (B * L, V)), labels, smoothing,
                                          labels == IGNORE_LABEL)


def _dump_batch(batch: PackedBatch) -> str:
    lines = []
    for b, layout in enumerate(batch.layouts):
        ids = " ".join(str(int(t)) for t in batch.tokens[b, :layout.length])
        lines.append(f"  [{b}] src={layout.src_len} reg={layout.reg_len} tgt={layout.tgt_len}: {ids}")
    return "\n".join(lines)


def train_step(params: ModelParams, batches: Sequence[PackedBatch], optimizer: T.AdamState,
               config: TrainConfig, lr: float, rng: Optional[np.random.Generator] = None) -> float:
    """
    One optimizer update over `batches` (gradient accumulation when several).

    Returns:
        mean loss over the micro-batches

    Raises:
        EmptyLossError: a batch has no target slot
        NonFiniteError: loss or gradient is NaN/inf (the batch is logged)
    """
    trainable = params.trainable()
    if not trainable:
        raise ConfigError("model has no trainable parameters")
    for t in trainable.values():
        t.grad = None

    losses = []
    for batch in batches:
        loss = batch_loss(params, batch, config.label_smoothing, train=True, rng=rng)
        value = loss.item()
        if not math.isfinite(value):
            logger.error("Non-finite loss %r on batch:\n%s", value, _dump_batch(batch))
            raise NonFiniteError(f"non-finite training loss {value!r}")
        losses.append(value)
        T.backward(T.mul(loss, 1.0 / len(batches)), trainable.values())

    grads = {name: t.grad for name, t in trainable.items()}
    if config.grad_clip > 0:
        T.clip_grad_norm(grads, config.grad_clip)
    T.adam_step(trainable, grads, optimizer, lr)
    return float(np.mean(losses))


@T.no_grad()
def validate(params: ModelParams, instances: Sequence[TranslationInstance], languages: Sequence[LanguageSpec],
             variant, smoothing: float = 0.1, batch_tokens: int = 2048,
             graph: Optional[ConnectivityGraph] = None) -> float:
    """
    Token-weighted mean loss; dropout off, no parameter updates.

    Raises:
        ConfigError: empty split, or a zero-shot direction when `graph` is given
    """
    if not instances:
        raise ConfigError("validation split is empty")
    if graph is not None:
        for inst in instances:
            if not graph.is_supervised(*inst.direction):
                raise ConfigError(f"validation holds zero-shot direction {direction_name(*inst.direction)}")
    total, count = 0.0, 0
    for group in bucket_batches(pack_instances(instances, languages, variant), batch_tokens):
        batch = pack_batch(group, PAD_ID)
        n = batch.target_count
        total += batch_loss(params, batch, smoothing).item() * n
        count += n
    return total / count


# ------------------------------
# Trainer
# ------------------------------

STATE_FILE = "state.ckpt"


class Trainer:
    """Runs the optimization loop and owns checkpoints/logs in `out_dir`."""

    def __init__(self, params: ModelParams, languages: Sequence[LanguageSpec],
                 train_instances: Sequence[TranslationInstance],
                 valid_instances: Sequence[TranslationInstance],
                 variant, config: TrainConfig, out_dir: Optional[str] = None,
                 graph: Optional[ConnectivityGraph] = None, base_path: Optional[str] = None,
                 corpus_identity: Optional[Mapping] = None):
        """
        Args:
            params: model to train (LoRA adapters must already be attached in lora mode)
            languages: language specs used to encode instances
            train_instances, valid_instances: data splits
            variant: sequence layout variant
            config: training hyperparameters
            out_dir: where checkpoints and CSV logs go (None = keep everything in memory)
            graph: when given, validation refuses zero-shot directions
            base_path: base checkpoint an adapter refers to (lora mode)
            corpus_identity: recorded in every exported checkpoint (SyntheticCorpus.identity())
        """
        if config.mode == LORA and params.lora is None:
            raise ConfigError("lora mode needs adapters attached to the model")
        if config.mode == FULL and params.frozen:
            raise ConfigError("full mode cannot train a frozen model")
        self.params = params
        self.languages = languages
        self.valid_instances = list(valid_instances)
        self.variant = Variant.parse(variant)
        self.config = config
        self.out_dir = out_dir
        self.graph = graph
        self.base_path = base_path
        self.corpus_identity = corpus_identity
        self.sampler = BatchSampler(train_instances, languages, self.variant, config)
        self.optimizer = T.AdamState()
        self.log = TrainLog()
        self.step = 0
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)

    def resume(self) -> bool:
        """Restore the saved state in out_dir if any; returns whether one was found."""
        path = os.path.join(self.out_dir, STATE_FILE) if self.out_dir else None
        if not path or not os.path.exists(path):
            return False
        meta = checkpoint.load_training_state(path, self.params, self.optimizer)
        if meta["rng_state"]["seed"] != self.config.seed:
            raise ConfigError(f"saved state uses seed {meta['rng_state']['seed']}, config has {self.config.seed}")
        self.step = int(meta["step"])
        self.log = TrainLog.read(self.out_dir, self.step, self.config.valid_interval)
        logger.info("Resumed from %s at step %d", path, self.step)
        return True

    def validate(self) -> float:
        return validate(self.params, self.valid_instances, self.languages, self.variant,
                        self.config.label_smoothing, self.config.batch_tokens, self.graph)

    def train_one(self) -> float:
        self.step += 1
        step = self.step
        lr = lr_schedule(step, self.config.lr_peak, self.config.warmup_steps)
        batches = [self.sampler.batch(step, micro) for micro in range(self.config.accumulation)]
        rng = np.random.default_rng([self.config.seed, step, 1 << 20])
        loss = train_step(self.params, batches, self.optimizer, self.config, lr, rng)
        self.log.record_step(step, lr, loss)
        return loss

    def run(self, max_steps: Optional[int] = None) -> TrainLog:
        """Train until `max_steps` (default config.max_steps) total steps."""
        target = self.config.max_steps if max_steps is None else max_steps
        cfg = self.config
        start = time.time()
        logger.info("Training %s (%s mode) from step %d to %d", self.variant, cfg.mode, self.step, target)
        while self.step < target:
            loss = self.train_one()
            if self.step % cfg.log_interval == 0 or self.step == 1:
                logger.info("step %d  lr %.3e  loss %.4f  (%.1fs)", self.step,
                            self.log.steps[-1][1], loss, time.time() - start)
            else:
                logger.debug("step %d loss %.6f", self.step, loss)
            if cfg.valid_interval > 0 and self.step % cfg.valid_interval == 0 and self.valid_instances:
                valid_loss = self.validate()
                self.log.record_valid(self.step // cfg.valid_interval, valid_loss)
                logger.info("validation %d: loss %.4f", self.step // cfg.valid_interval, valid_loss)
            if self.out_dir and cfg.save_interval > 0 and self.step % cfg.save_interval == 0:
                self.save_periodic()
        if self.out_dir:
            self.finish()
        return self.log

    def save_periodic(self):
        path = os.path.join(self.out_dir, f"checkpoint_{self.step:07d}.ckpt")
        checkpoint.save_model(path, self.params, self.step, self.base_path, self.corpus_identity)
        periodic = checkpoint.list_periodic(self.out_dir)
        for old in periodic[:-self.config.average_last]:
            os.remove(old)
        checkpoint.save_training_state(os.path.join(self.out_dir, STATE_FILE), self.params,
                                       self.optimizer, self.step, self.config.seed)
        self.log.write(self.out_dir)

    def finish(self):
        """Write the last checkpoint, the average of the last few, state and logs."""
        last = os.path.join(self.out_dir, "checkpoint_last.ckpt")
        checkpoint.save_model(last, self.params, self.step, self.base_path, self.corpus_identity)
        periodic = checkpoint.list_periodic(self.out_dir)[-self.config.average_last:]
        checkpoint.average_checkpoints(periodic or [last], os.path.join(self.out_dir, "checkpoint_avg.ckpt"))
        checkpoint.save_training_state(os.path.join(self.out_dir, STATE_FILE), self.params,
                                       self.optimizer, self.step, self.config.seed)
        self.log.write(self.out_dir)
