"""Few-shot adaptation and evaluation: stratified/total/fraction sampling,
a linear adapter over pooled embeddings, accuracy + F1 metrics, and
embedding export.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .config import FewShotSpec, FinetuneRunConfig, OptimizerConfig, ScheduleConfig
from .data import MultichannelWindow, Window
from .encoder import SignalEncoder, encode
from .errors import DataError
from .pretrain import cosine_restart_lr, make_optimizer

log = logging.getLogger(__name__)

Item = Window | MultichannelWindow


def _item_id(item: Item) -> str:
    return item.window_id


def _item_label(item: Item) -> int:
    label = item.label
    if label is None:
        raise DataError(f"item {_item_id(item)} has no label; fine-tuning needs labels")
    return label


def sample_few_shot(items: Sequence[Item], spec: FewShotSpec) -> list[Item]:
    """Draw the labeled fine-tuning subset, deterministically in spec.seed.

    per_class_k draws min(K, available) per class (short classes warn, not
    fail); total_count draws without replacement; fraction draws
    ceil(p * n).
    """
    items = sorted(items, key=_item_id)
    for item in items:
        _item_label(item)
    rng = np.random.default_rng(spec.seed)
    if spec.mode == "per_class_k":
        k = int(spec.value)
        by_label: dict[int, list[Item]] = {}
        for item in items:
            by_label.setdefault(_item_label(item), []).append(item)
        chosen: list[Item] = []
        for label in sorted(by_label):
            pool = by_label[label]
            take = min(k, len(pool))
            if take < k:
                log.warning("class %d has only %d samples (< K=%d)", label, len(pool), k)
            idx = rng.choice(len(pool), size=take, replace=False)
            chosen.extend(pool[i] for i in sorted(idx))
        return chosen
    if spec.mode == "total_count":
        m = int(spec.value)
        if m > len(items):
            raise DataError(f"cannot draw {m} samples from {len(items)} without replacement")
        idx = rng.choice(len(items), size=m, replace=False)
        return [items[i] for i in sorted(idx)]
    m = math.ceil(spec.value * len(items))
    idx = rng.choice(len(items), size=m, replace=False)
    return [items[i] for i in sorted(idx)]


class AdapterHead(nn.Module):
    """Linear map from pooled width (d or channels*d) to class logits."""

    def __init__(self, in_dim: int, num_classes: int, seed: int = 0):
        super().__init__()
        self.linear = nn.Linear(in_dim, num_classes)
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.linear.weight.normal_(0.0, 0.02, generator=gen)
            self.linear.bias.zero_()

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.linear(pooled)


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    macro_f1: float
    micro_f1: float
    per_class_f1: tuple[float, ...]
    confusion: tuple[tuple[int, ...], ...]  # [true][pred]
    n_eval: int
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_f1": self.macro_f1,
            "micro_f1": self.micro_f1,
            "per_class_f1": list(self.per_class_f1),
            "confusion": [list(row) for row in self.confusion],
            "n_eval": self.n_eval,
            "seed": self.seed,
        }


def metrics_from_predictions(
    predictions: Sequence[int], labels: Sequence[int], num_classes: int, seed: int = 0
) -> Metrics:
    """Confusion-matrix metrics. Macro-F1 averages per-class F1 uniformly,
    scoring 0 for a class with no true and no predicted positives."""
    if len(predictions) != len(labels):
        raise DataError("predictions and labels differ in length")
    if not labels:
        raise DataError("cannot evaluate on an empty set")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pred, true in zip(predictions, labels):
        confusion[true][pred] += 1
    total = int(confusion.sum())
    correct = int(np.trace(confusion))
    per_class = []
    for c in range(num_classes):
        tp = int(confusion[c][c])
        fp = int(confusion[:, c].sum()) - tp
        fn = int(confusion[c, :].sum()) - tp
        denom = 2 * tp + fp + fn
        per_class.append(2 * tp / denom if denom > 0 else 0.0)
    tp_all = correct
    fp_all = total - correct
    fn_all = total - correct
    micro = 2 * tp_all / (2 * tp_all + fp_all + fn_all)
    return Metrics(
        accuracy=correct / total,
        macro_f1=float(np.mean(per_class)),
        micro_f1=micro,
        per_class_f1=tuple(per_class),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        n_eval=total,
        seed=seed,
    )


def _labels_tensor(items: Sequence[Item]) -> torch.Tensor:
    return torch.tensor([_item_label(item) for item in items], dtype=torch.long)


def finetune(
    model: SignalEncoder,
    subset: Sequence[Item],
    num_classes: int,
    run_cfg: FinetuneRunConfig,
    optimizer_cfg: OptimizerConfig,
    schedule_cfg: ScheduleConfig,
    seed: int = 0,
    val_set: Sequence[Item] | None = None,
) -> tuple[AdapterHead, SignalEncoder, list[dict]]:
    """Train the adapter with cross-entropy; deterministic in the seed.

    head_only freezes the backbone (embeddings are computed once, so the
    backbone provably never changes); full also updates the backbone at
    backbone_lr_scale times the head learning rate. With a validation set,
    the epoch with the best validation accuracy wins; otherwise the final
    epoch does.
    """
    subset = list(subset)
    if not subset:
        raise DataError("fine-tuning subset is empty")
    labels = _labels_tensor(subset)
    if len(set(labels.tolist())) < 2:
        raise DataError("fine-tuning needs at least two classes")

    width = model.cfg.model_dim
    if isinstance(subset[0], MultichannelWindow):
        width *= subset[0].channels
    head = AdapterHead(width, num_classes, seed=seed)

    head_only = run_cfg.mode == "head_only"
    if head_only:
        embeddings = encode(model, subset).pooled
        for p in model.parameters():
            p.requires_grad_(False)
        optimizer = make_optimizer(head.parameters(), optimizer_cfg)
    else:
        optimizer = make_optimizer(
            [
                {"params": list(head.parameters()), "lr_scale": 1.0},
                {"params": list(model.parameters()), "lr_scale": run_cfg.backbone_lr_scale},
            ],
            optimizer_cfg,
        )

    n = len(subset)
    steps_per_epoch = math.ceil(n / run_cfg.batch_size)
    first_cycle = (
        schedule_cfg.first_cycle if schedule_cfg.first_cycle is not None else steps_per_epoch
    )

    best_state: dict | None = None
    best_val = -1.0
    records: list[dict] = []
    global_step = 0
    for epoch in range(1, run_cfg.epochs + 1):
        order = np.random.default_rng(np.random.SeedSequence([seed, 11, epoch])).permutation(n)
        epoch_losses = []
        for start in range(0, n, run_cfg.batch_size):
            idx = order[start : start + run_cfg.batch_size]
            lr = cosine_restart_lr(
                global_step,
                optimizer_cfg.learning_rate,
                first_cycle,
                schedule_cfg.cycle_mult,
                schedule_cfg.min_lr_fraction,
            )
            for group in optimizer.param_groups:
                group["lr"] = lr * group.get("lr_scale", 1.0)
            optimizer.zero_grad()
            if head_only:
                logits = head(embeddings[idx])
            else:
                batch_items = [subset[i] for i in idx]
                pooled = _encode_with_grad(model, batch_items)
                logits = head(pooled)
            loss = F.cross_entropy(logits, labels[idx])
            loss.backward()
            optimizer.step()
            epoch_losses.append(float(loss.item()))
            global_step += 1
        record = {"epoch": epoch, "mean_loss": float(np.mean(epoch_losses))}
        if val_set:
            metrics = evaluate(model, head, val_set, num_classes, seed=seed)
            record["val_accuracy"] = metrics.accuracy
            if metrics.accuracy > best_val:
                best_val = metrics.accuracy
                best_state = {k: v.detach().clone() for k, v in head.state_dict().items()}
        records.append(record)
    if best_state is not None:
        head.load_state_dict(best_state)
    for p in model.parameters():
        p.requires_grad_(True)
    return head, model, records


def _encode_with_grad(model: SignalEncoder, items: Sequence[Item]) -> torch.Tensor:
    if isinstance(items[0], MultichannelWindow):
        arrays = np.stack([mw.as_array() for mw in items])
        b, c, length = arrays.shape
        x = torch.as_tensor(arrays.reshape(b * c, length), dtype=model.dtype)
        pooled = model(x)[1]
        return pooled.reshape(b, c * model.cfg.model_dim)
    x = torch.as_tensor(np.stack([w.values for w in items]), dtype=model.dtype)
    return model(x)[1]


def evaluate(
    model: SignalEncoder,
    head: AdapterHead,
    test_items: Sequence[Item],
    num_classes: int,
    seed: int = 0,
) -> Metrics:
    """Accuracy and macro/micro F1 of adapter predictions on a labeled set."""
    test_items = list(test_items)
    if not test_items:
        raise DataError("cannot evaluate on an empty test corpus")
    labels = [_item_label(item) for item in test_items]
    pooled = encode(model, test_items).pooled
    with torch.no_grad():
        predictions = head(pooled).argmax(dim=1).tolist()
    return metrics_from_predictions(predictions, labels, num_classes, seed=seed)


def evaluate_cached(
    head: AdapterHead, pooled: torch.Tensor, labels: Sequence[int], num_classes: int, seed: int = 0
) -> Metrics:
    """Like evaluate(), but over precomputed pooled embeddings."""
    with torch.no_grad():
        predictions = head(pooled).argmax(dim=1).tolist()
    return metrics_from_predictions(predictions, list(labels), num_classes, seed=seed)


def export_embeddings(
    model: SignalEncoder, items: Sequence[Item], path: str | Path
) -> Path:
    """Write (window id, label, pooled embedding) rows as CSV.

    Values carry 9 significant digits so a checkpoint round-trip re-export is
    byte-identical.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pooled = encode(model, items).pooled.numpy()
    width = pooled.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["window_id", "label"] + [f"e{i}" for i in range(width)])
        for item, row in zip(items, pooled):
            label = item.label
            writer.writerow(
                [_item_id(item), "" if label is None else label]
                + [f"{v:.9g}" for v in row]
            )
    return path


def aggregate_metrics(runs: Sequence[Metrics]) -> dict:
    """Mean and sample std (ddof=1) of accuracy and macro-F1 across seeds."""
    acc = np.array([m.accuracy for m in runs], dtype=np.float64)
    f1 = np.array([m.macro_f1 for m in runs], dtype=np.float64)

    def stats(values: np.ndarray) -> dict:
        return {
            "mean": float(values.mean()),
            "std": float(values.std(ddof=1)) if len(values) > 1 else 0.0,
        }

    return {
        "seeds": [m.seed for m in runs],
        "n_runs": len(runs),
        "accuracy": stats(acc),
        "macro_f1": stats(f1),
    }


def format_aggregate(aggregate: dict, scale: float = 100.0) -> str:
    """Human-readable ``mean ± std`` line, in percentage points by default."""
    acc = aggregate["accuracy"]
    f1 = aggregate["macro_f1"]
    return (
        f"ACC {acc['mean'] * scale:.2f} ± {acc['std'] * scale:.2f}  "
        f"F1 {f1['mean'] * scale:.2f} ± {f1['std'] * scale:.2f}  "
        f"(n={aggregate['n_runs']})"
    )
