"""Fine-tuning loop: categorical cross-entropy, Adam, exponential lr decay,
early stopping on validation loss, checkpointing, history recording."""

import copy
import csv
import logging
import time
from dataclasses import dataclass, asdict, field

import numpy as np
import torch

from . import backbones
from .backbones import ModelAssembly, BackboneSpec, FreezePolicy, HeadConfig

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
PROB_EPS = 1e-7
IMPROVEMENT_EPS = 1e-6

HISTORY_COLUMNS = ("epoch", "lr", "train_loss", "train_top1",
                   "val_loss", "val_top1", "seconds")


class TrainingAbort(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 500
    batch_size: int = 256
    lr0: float = 0.01
    decay_gamma: float = 0.95
    patience: int = 15
    seed: int = 0
    monitor: str = "val_loss"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 0 < self.decay_gamma <= 1:
            raise ValueError(f"decay_gamma must be in (0, 1], got {self.decay_gamma}")
        if self.patience < 1:
            raise ValueError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.monitor != "val_loss":
            raise ValueError(f"unsupported monitor {self.monitor!r}")


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_top1: float
    val_loss: float
    val_top1: float
    seconds: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)

    def append(self, record: EpochRecord):
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ValueError("epoch indices must be strictly increasing")
        self.records.append(record)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(HISTORY_COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss),
                                 repr(r.train_top1), repr(r.val_loss),
                                 repr(r.val_top1), repr(r.seconds)])

    @classmethod
    def from_csv(cls, path):
        history = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                history.append(EpochRecord(
                    epoch=int(row["epoch"]), lr=float(row["lr"]),
                    train_loss=float(row["train_loss"]),
                    train_top1=float(row["train_top1"]),
                    val_loss=float(row["val_loss"]),
                    val_top1=float(row["val_top1"]),
                    seconds=float(row["seconds"])))
        return history


def cross_entropy(logits, labels):
    """Mean over the batch of -log(softmax(logits)[label]).

    Probabilities are clamped to [eps, 1 - eps] with eps = 1e-7 so the loss
    stays finite for arbitrarily confident logits.
    """
    if isinstance(logits, np.ndarray):
        logits = torch.from_numpy(logits)
    if isinstance(labels, np.ndarray):
        labels = torch.from_numpy(labels)
    labels = labels.long()
    n_classes = logits.shape[1]
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"labels must be in [0, {n_classes})")
    probs = torch.softmax(logits, dim=1)
    probs = torch.clamp(probs, PROB_EPS, 1.0 - PROB_EPS)
    picked = probs[torch.arange(logits.shape[0]), labels]
    return -torch.log(picked).mean()


def lr_schedule(epoch, lr0, gamma):
    """Exponential decay: lr0 * gamma ** epoch (epoch 0 -> lr0)."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return lr0 * gamma ** epoch


class EarlyStopper:
    """Stop when the monitored value has not improved for `patience`
    consecutive epochs; improvement = strictly lower by more than 1e-6."""

    def __init__(self, patience, min_delta=IMPROVEMENT_EPS):
        if patience < 1:
            raise ValueError("patience must be >= 1")
        self.patience = patience
        self.min_delta = min_delta
        self.best = float("inf")
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch, value) -> bool:
        """Record the epoch's monitored value; return True if it improved."""
        if value < self.best - self.min_delta:
            self.best = value
            self.best_epoch = epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


def _top1(logits, labels) -> float:
    pred = logits.argmax(dim=1)
    return float((pred == labels).float().mean())


def _evaluate(assembly, batches):
    total_loss, total_correct, total_n = 0.0, 0.0, 0
    with torch.no_grad():
        for x, y in batches:
            logits = assembly.forward(x, mode="eval")
            y_t = torch.as_tensor(y).long()
            loss = cross_entropy(logits, y_t)
            n = len(y_t)
            total_loss += float(loss) * n
            total_correct += _top1(logits, y_t) * n
            total_n += n
    if total_n == 0:
        raise TrainingAbort("evaluation split is empty")
    return total_loss / total_n, total_correct / total_n


def fit(assembly: ModelAssembly, data, config: TrainConfig):
    """Train the assembly on `data` (train_batches(epoch) / val_batches()).

    Only mask-true parameters are updated (Adam, beta1=0.9, beta2=0.999,
    eps=1e-8, scheduled lr). Keeps and restores the checkpoint with the
    lowest validation loss. Returns (history, best_epoch).
    """
    params = backbones.trainable_parameters(assembly)
    if not params:
        raise TrainingAbort("no trainable parameters under the current freeze policy")

    torch.manual_seed(config.seed)
    optimizer = torch.optim.Adam(params, lr=config.lr0,
                                 betas=(0.9, 0.999), eps=1e-8)
    stopper = EarlyStopper(config.patience)
    history = RunHistory()
    best_state = None

    for epoch in range(config.max_epochs):
        start = time.perf_counter()
        lr = lr_schedule(epoch, config.lr0, config.decay_gamma)
        for group in optimizer.param_groups:
            group["lr"] = lr

        train_loss, train_correct, train_n = 0.0, 0.0, 0
        for batch_idx, (x, y) in enumerate(data.train_batches(epoch)):
            logits = assembly.forward(x, mode="train")
            y_t = torch.as_tensor(y).long()
            loss = cross_entropy(logits, y_t)
            if not torch.isfinite(loss):
                raise TrainingAbort(
                    f"non-finite loss at epoch {epoch}, batch {batch_idx}")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            n = len(y_t)
            train_loss += float(loss.detach()) * n
            train_correct += _top1(logits.detach(), y_t) * n
            train_n += n
        if train_n == 0:
            raise TrainingAbort("training split is empty")

        val_loss, val_top1 = _evaluate(assembly, data.val_batches())
        history.append(EpochRecord(
            epoch=epoch, lr=lr,
            train_loss=train_loss / train_n, train_top1=train_correct / train_n,
            val_loss=val_loss, val_top1=val_top1,
            seconds=time.perf_counter() - start))

        if stopper.update(epoch, val_loss):
            best_state = copy.deepcopy(assembly.state_dict())
        logger.info("epoch %d lr %.3g train_loss %.4f val_loss %.4f val_top1 %.3f",
                    epoch, lr, train_loss / train_n, val_loss, val_top1)
        if stopper.should_stop:
            logger.info("early stop at epoch %d (best epoch %d)",
                        epoch, stopper.best_epoch)
            break

    if best_state is not None:
        assembly.load_state_dict(best_state)
    return history, stopper.best_epoch


def save_checkpoint(assembly: ModelAssembly, history: RunHistory, path):
    torch.save({
        "version": CHECKPOINT_VERSION,
        "spec": asdict(assembly.spec),
        "freeze": asdict(assembly.freeze_policy),
        "head": asdict(assembly.head_config),
        "state_dict": assembly.state_dict(),
        "history": [asdict(r) for r in history.records],
    }, path)


def load_checkpoint(path, expected_family=None):
    """Rebuild the assembly from a checkpoint. Round-trips are bit-exact."""
    try:
        blob = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if blob.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"checkpoint version {blob.get('version')} "
                              f"!= supported {CHECKPOINT_VERSION}")
    spec = BackboneSpec(family=blob["spec"]["family"], weight_source="random")
    if expected_family is not None and spec.family != expected_family:
        raise CheckpointError(f"checkpoint family {spec.family!r} does not match "
                              f"expected {expected_family!r}")
    head = blob["head"]
    assembly = ModelAssembly(
        spec,
        FreezePolicy(**blob["freeze"]),
        HeadConfig(blocks=tuple(tuple(b) for b in head["blocks"]),
                   output_classes=head["output_classes"],
                   activation=head["activation"], pooling=head["pooling"]))
    try:
        assembly.load_state_dict(blob["state_dict"])
    except RuntimeError as exc:
        raise CheckpointError(f"corrupted checkpoint {path}: {exc}") from exc
    history = RunHistory()
    for row in blob["history"]:
        history.append(EpochRecord(**row))
    return assembly, history


class ArrayData:
    """In-memory data source for small experiments and tests."""

    def __init__(self, x_train, y_train, x_val, y_val, batch_size, shuffle_seed=0):
        self.x_train, self.y_train = np.asarray(x_train), np.asarray(y_train)
        self.x_val, self.y_val = np.asarray(x_val), np.asarray(y_val)
        self.batch_size = batch_size
        self.shuffle_seed = shuffle_seed

    def _iterate(self, x, y, order):
        for start in range(0, len(order), self.batch_size):
            idx = order[start:start + self.batch_size]
            yield x[idx], y[idx]

    def train_batches(self, epoch):
        order = np.random.default_rng((self.shuffle_seed, epoch)).permutation(
            len(self.y_train))
        return self._iterate(self.x_train, self.y_train, order)

    def val_batches(self):
        return self._iterate(self.x_val, self.y_val, np.arange(len(self.y_val)))


class ManifestData:
    """File-backed data source streaming preprocessed batches from disk."""

    def __init__(self, split, image_root, prep, aug, batch_size, seed=0):
        self.split = split
        self.image_root = image_root
        self.prep = prep
        self.aug = aug
        self.batch_size = batch_size
        self.seed = seed

    def train_batches(self, epoch):
        from . import dataset
        return dataset.batch_stream(self.split.train, self.image_root,
                                    self.batch_size, self.prep, aug=self.aug,
                                    shuffle=True, seed=self.seed, epoch=epoch)

    def val_batches(self):
        from . import dataset
        return dataset.batch_stream(self.split.val, self.image_root,
                                    self.batch_size, self.prep, aug=None,
                                    shuffle=False, seed=self.seed)
