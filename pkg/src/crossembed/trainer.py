"""Two-stage training loop: warmup stage, joint stage, per-epoch validation.

Each stage has its own Adam optimizer and a step schedule that halves the
learning rate at every listed epoch boundary. After every epoch the model is
scored on the validation split and the parameters with the best summed R@1
(both directions) are kept.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from crossembed.autodiff import Adam, Tape
from crossembed.data import EncodedSplit
from crossembed.encoders import DualEncoder, is_image_param
from crossembed.errors import ConfigError, NumericError
from crossembed.loss import LossConfig, mh_loss
from crossembed.retrieval import evaluate_pairs

log = logging.getLogger(__name__)


@dataclass
class StageConfig:
    epochs: int
    lr: float
    halve_after: tuple[int, ...] = ()

    def __post_init__(self):
        self.halve_after = tuple(int(e) for e in self.halve_after)
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        # lr 0 is accepted so a run can be made a no-op (parameters untouched)
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if list(self.halve_after) != sorted(self.halve_after):
            raise ConfigError(f"halve_after must be ascending, got {list(self.halve_after)}")


def _stage(value) -> StageConfig:
    return value if isinstance(value, StageConfig) else StageConfig(**value)


@dataclass
class TrainConfig:
    """Hyperparameters for :func:`train`.

    ``eval_relevance`` selects how validation recall counts a hit: ``"exact"``
    (only the aligned partner) or ``"group"`` (any item with the same group).
    """

    batch_size: int = 256
    stage1: StageConfig = field(default_factory=lambda: StageConfig(2, 1e-4, (1,)))
    stage2: StageConfig = field(default_factory=lambda: StageConfig(30, 4e-5, (5, 10)))
    margin: float = 0.2
    seed: int = 0
    shuffle: bool = True
    eval_ks: tuple[int, ...] = (1, 10, 50, 100)
    reduction: str = "mean"
    freeze_image_in_stage1: bool = False
    mask_duplicates: bool = False
    group_aware_batches: bool = False
    eval_relevance: str = "exact"

    def __post_init__(self):
        self.stage1 = _stage(self.stage1)
        self.stage2 = _stage(self.stage2)
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.eval_relevance not in ("exact", "group"):
            raise ConfigError(f"eval_relevance must be 'exact' or 'group', got {self.eval_relevance!r}")
        LossConfig(self.margin, None, self.reduction)  # validates margin and reduction

    def to_dict(self) -> dict:
        d = asdict(self)
        for s in ("stage1", "stage2"):
            d[s]["halve_after"] = list(d[s]["halve_after"])
        d["eval_ks"] = list(self.eval_ks)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainLogEntry:
    epoch: int
    stage: int
    stage_epoch: int
    mean_loss: float
    lr: float
    validation: dict
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainResult:
    best_state: dict[str, np.ndarray]
    log: list[TrainLogEntry]
    best_metrics: Optional[dict]
    best_epoch: int


def lr_at(stage: StageConfig, epoch: int) -> float:
    """Learning rate for 0-based ``epoch`` of ``stage``: halved once per boundary reached."""
    if epoch < 0:
        raise ConfigError(f"epoch must be >= 0, got {epoch}")
    passed = sum(1 for b in stage.halve_after if epoch >= b)
    return stage.lr * 0.5**passed


def make_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True,
                 groups: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Index batches for one epoch.

    The permutation depends only on ``(seed, epoch)``. A trailing batch with
    fewer than two items is dropped since it has no negatives. With ``groups``
    items are placed greedily so that no batch holds two items of one group;
    negative group codes mean "no group".
    """
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    if groups is None:
        batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    else:
        groups = np.asarray(groups)
        open_batches: list[list[int]] = []
        members: list[set] = []
        start = 0  # batches before this index are full
        for i in order.tolist():
            g = int(groups[i])
            for b in range(start, len(open_batches)):
                if len(open_batches[b]) < batch_size and (g < 0 or g not in members[b]):
                    break
            else:
                open_batches.append([])
                members.append(set())
                b = len(open_batches) - 1
            open_batches[b].append(i)
            if g >= 0:
                members[b].add(g)
            while start < len(open_batches) and len(open_batches[start]) == batch_size:
                start += 1
        batches = [np.array(b, dtype=np.int64) for b in open_batches]
    return [b for b in batches if len(b) >= 2]


def _duplicate_mask(groups: Optional[np.ndarray], idx: np.ndarray) -> Optional[np.ndarray]:
    if groups is None:
        return None
    g = groups[idx]
    mask = (g[:, None] == g[None, :]) & (g[:, None] >= 0)
    np.fill_diagonal(mask, False)
    return mask


def validate(model: DualEncoder, split: EncodedSplit, ks: Sequence[int],
             relevance: str = "exact") -> dict:
    """R@K on a split in both directions, as ``{"t2i": {k: r}, "i2t": {k: r}}``."""
    img = model.image_embeddings(split.features)
    txt = model.text_embeddings(split.tokens, split.lengths)
    groups = split.groups if relevance == "group" else None
    reports = evaluate_pairs(img, txt, ks, groups)
    return {d: {str(k): v for k, v in r.recall_at.items()} for d, r in reports.items()}


def _score(metrics: dict) -> float:
    return min(metrics["t2i"].items(), key=lambda kv: int(kv[0]))[1] + \
        min(metrics["i2t"].items(), key=lambda kv: int(kv[0]))[1]


def train(model: DualEncoder, train_split: EncodedSplit, val_split: EncodedSplit,
          cfg: TrainConfig, log_path=None, start_epoch: int = 0,
          on_epoch: Optional[Callable[[TrainLogEntry, DualEncoder], None]] = None) -> TrainResult:
    """Run both stages and load the best validated parameters into ``model``.

    Epochs are numbered globally across stages from 0; ``start_epoch`` skips
    epochs already completed (for resuming). Raises :class:`NumericError` on a
    non-finite loss, naming the epoch and batch.
    """
    if len(train_split) < 2:
        raise ConfigError(f"training split needs at least 2 examples, got {len(train_split)}")
    if len(val_split) < 1:
        raise ConfigError("validation split is empty")
    image_names = frozenset(n for n in model.params if is_image_param(n))
    batch_groups = train_split.groups if cfg.group_aware_batches else None
    mask_groups = train_split.groups if cfg.mask_duplicates else None

    history: list[TrainLogEntry] = []
    best_state = model.state_dict()
    best_metrics: Optional[dict] = None
    best_score = -np.inf
    best_epoch = -1
    log_fh = open(log_path, "a" if start_epoch else "w", encoding="utf-8") if log_path else None
    epoch = 0
    try:
        for stage_no, stage in ((1, cfg.stage1), (2, cfg.stage2)):
            frozen = image_names if (stage_no == 1 and cfg.freeze_image_in_stage1) else frozenset()
            opt = Adam(model.params, lr=stage.lr)
            for stage_epoch in range(stage.epochs):
                if epoch < start_epoch:
                    epoch += 1
                    continue
                t0 = time.perf_counter()
                opt.lr = lr_at(stage, stage_epoch)
                losses = []
                batches = make_batches(len(train_split), cfg.batch_size, cfg.seed, epoch,
                                       cfg.shuffle, batch_groups)
                for b, idx in enumerate(batches):
                    loss_cfg = LossConfig(cfg.margin, _duplicate_mask(mask_groups, idx), cfg.reduction)
                    opt.zero_grad()
                    with Tape() as tape:
                        img = model.embed_images(train_split.features[idx])
                        txt = model.embed_texts(train_split.tokens[idx], train_split.lengths[idx])
                        loss = mh_loss(img, txt, loss_cfg)
                        value = float(loss.data)
                        if not np.isfinite(value):
                            raise NumericError(
                                f"non-finite loss {value} at epoch {epoch} (stage {stage_no}), batch {b}"
                            )
                        tape.backward(loss)
                    opt.step(frozen)
                    losses.append(value)
                metrics = validate(model, val_split, cfg.eval_ks, cfg.eval_relevance)
                entry = TrainLogEntry(
                    epoch=epoch, stage=stage_no, stage_epoch=stage_epoch,
                    mean_loss=float(np.mean(losses)) if losses else 0.0, lr=opt.lr,
                    validation=metrics, wall_time=round(time.perf_counter() - t0, 3),
                )
                history.append(entry)
                if log_fh:
                    log_fh.write(entry.to_json() + "\n")
                    log_fh.flush()
                log.info("epoch %d stage %d loss %.5f lr %.2e val %s", epoch, stage_no,
                         entry.mean_loss, entry.lr, metrics)
                score = _score(metrics)
                if score > best_score:
                    best_score, best_metrics, best_epoch = score, metrics, epoch
                    best_state = model.state_dict()
                if on_epoch:
                    on_epoch(entry, model)
                epoch += 1
    finally:
        if log_fh:
            log_fh.close()
    model.load_state_dict(best_state)
    return TrainResult(best_state, history, best_metrics, best_epoch)
