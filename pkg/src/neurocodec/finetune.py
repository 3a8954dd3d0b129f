"""Downstream fine-tuning: task heads, partial freezing, layer-wise LR decay."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ConfigError
from .metrics import classification_metrics, regression_metrics
from .model import Classifier
from .optim import AdamW, cosine_lr, param_groups

MONITORS = {"binary": "auroc", "multiclass": "kappa", "regression": "r2"}
LOSSES = {"binary": "bce", "multiclass": "ce", "regression": "mse"}


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "multiclass"
    n_out: int = 4  # classes (multiclass), 1 (binary) or number of regression targets
    loss: str = ""
    label_smoothing: float = 0.1
    monitor: str = ""
    angle_norm: bool = False  # divide regression targets by 90

    def __post_init__(self):
        if self.kind not in MONITORS:
            raise ConfigError(f"unknown task kind {self.kind!r}")
        if not self.loss:
            object.__setattr__(self, "loss", LOSSES[self.kind])
        if not self.monitor:
            object.__setattr__(self, "monitor", MONITORS[self.kind])
        if self.monitor != MONITORS[self.kind]:
            raise ConfigError(f"{self.kind} tasks monitor {MONITORS[self.kind]}, not {self.monitor}")
        if self.loss != LOSSES[self.kind]:
            raise ConfigError(f"{self.kind} tasks use {LOSSES[self.kind]} loss, not {self.loss}")
        if self.kind == "binary" and self.n_out != 1:
            object.__setattr__(self, "n_out", 1)


@dataclass(frozen=True)
class FreezeSpec:
    mode: str = "all"  # all | last-k | linear-probe
    k: int = 0

    @classmethod
    def parse(cls, text: str) -> "FreezeSpec":
        text = text.strip()
        if text in ("all", "linear-probe"):
            return cls(text)
        if text.startswith("last-"):
            try:
                return cls("last-k", int(text[5:]))
            except ValueError:
                pass
        raise ConfigError(f"bad freeze spec {text!r}; use all, last-<k> or linear-probe")

    def trainable(self, name: str, n_layers: int) -> bool:
        if self.mode == "all":
            return True
        if name.startswith("head."):
            return True
        if self.mode == "linear-probe":
            return False
        if name.startswith("backbone.norm."):
            return True
        if name.startswith("backbone.blocks."):
            return int(name.split(".")[2]) >= n_layers - self.k
        return False


def parse_task_file(path) -> tuple[TaskSpec, FreezeSpec]:
    kv = {}
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"task spec {path} not found")
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise ConfigError(f"{path}: malformed line {line!r}")
        kv[k.strip()] = v.strip()
    known = {"kind", "classes", "targets", "loss", "monitor", "freeze", "label_smoothing", "angle_norm"}
    unknown = set(kv) - known
    if unknown:
        raise ConfigError(f"{path}: unknown task keys {sorted(unknown)}")
    kind = kv.get("kind", "multiclass")
    n_out = int(kv.get("classes", kv.get("targets", 1 if kind == "binary" else 4)))
    task = TaskSpec(kind, n_out, kv.get("loss", ""), float(kv.get("label_smoothing", 0.1)),
                    kv.get("monitor", ""), kv.get("angle_norm", "false").lower() == "true")
    return task, FreezeSpec.parse(kv.get("freeze", "all"))


def layer_id(name: str, n_layers: int) -> int:
    if name.startswith("backbone.blocks."):
        return int(name.split(".")[2])
    if name.startswith("head.") or name.startswith("backbone.norm."):
        return n_layers
    return -1


def layer_lr_scale(name: str, n_layers: int, decay: float) -> float:
    return decay ** (n_layers - layer_id(name, n_layers))


@dataclass
class FinetuneConfig:
    epochs: int = 50
    batch_size: int = 512
    lr: float = 5e-4
    min_lr: float = 1e-6
    warmup_epochs: int = 5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    layer_decay: float = 0.65
    drop_path: float = 0.1
    clip: float | None = None
    use_spatial: bool = True
    seed: int = 0


def make_optimizer(model: Classifier, freeze: FreezeSpec, fcfg: FinetuneConfig) -> AdamW:
    L = len(model.backbone.blocks)
    named = []
    for name, p in model.named_parameters():
        p.requires_grad_(freeze.trainable(name, L))
        named.append((name, p))
    wd = 0.0 if freeze.mode == "linear-probe" else fcfg.weight_decay
    groups = param_groups(named, lambda n: layer_lr_scale(n, L, fcfg.layer_decay), wd)
    return AdamW(groups, fcfg.betas, clip=fcfg.clip)


def task_loss(out: torch.Tensor, y: torch.Tensor, task: TaskSpec) -> torch.Tensor:
    if task.kind == "binary":
        if out.shape[-1] != 1:
            raise ConfigError(f"binary head must have 1 output, got {out.shape[-1]}")
        return F.binary_cross_entropy_with_logits(out[:, 0], y.to(out.dtype))
    if task.kind == "multiclass":
        if out.shape[-1] != task.n_out:
            raise ConfigError(f"head has {out.shape[-1]} outputs for {task.n_out} classes")
        return F.cross_entropy(out, y.long(), label_smoothing=task.label_smoothing)
    y = y.to(out.dtype).reshape(out.shape[0], -1)
    if y.shape[-1] != out.shape[-1]:
        raise ConfigError(f"head has {out.shape[-1]} outputs for {y.shape[-1]} targets")
    if task.angle_norm:
        y = y / 90.0
    return F.mse_loss(out, y)


def finetune_step(model: Classifier, batch: dict, task: TaskSpec, opt: AdamW, lr: float) -> float:
    model.train()
    out = model(batch["x"], batch["chan"], batch["time"])
    loss = task_loss(out, batch["label"], task)
    opt.zero_grad()
    loss.backward()
    opt.step(lr)
    return loss.item()


@torch.no_grad()
def predict(model: Classifier, batches) -> tuple[np.ndarray, np.ndarray]:
    model.eval()
    outs, ys = [], []
    for b in batches:
        outs.append(model(b["x"], b["chan"], b["time"]).double().numpy())
        ys.append(b["label"].numpy())
    return np.concatenate(outs), np.concatenate(ys)


def evaluate(model: Classifier, batches, task: TaskSpec) -> dict[str, float]:
    out, y = predict(model, batches)
    if task.kind == "binary":
        scores = 1 / (1 + np.exp(-out[:, 0]))
        return classification_metrics(y, (scores >= 0.5).astype(int), scores, classes=[0, 1])
    if task.kind == "multiclass":
        return classification_metrics(y, out.argmax(-1), classes=list(range(task.n_out)))
    y = y.reshape(len(y), -1)
    if task.angle_norm:
        y = y / 90.0
    return regression_metrics(y, out)


@dataclass
class FinetuneResult:
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid: float = float("-inf")
    test: dict = field(default_factory=dict)
    model: Classifier | None = None


def finetune(model: Classifier, train_items, valid_items, task: TaskSpec, freeze: FreezeSpec,
             fcfg: FinetuneConfig, test_items=None, log=None) -> FinetuneResult:
    """Fine-tune with best-epoch selection on the validation monitor (ties keep the earlier epoch).

    Epoch 0 is the initialization, so the selected model never scores
    below it on validation.
    """
    from .data import batches, eval_batches

    dtype = next(model.parameters()).dtype
    torch.manual_seed(fcfg.seed)
    model.backbone.set_drop_path(fcfg.drop_path)
    model.backbone.pos.use_spatial = fcfg.use_spatial
    opt = make_optimizer(model, freeze, fcfg)
    valid_b = eval_batches(valid_items, fcfg.batch_size, dtype)
    steps_per_epoch = len(list(batches(train_items, fcfg.batch_size, 0)))
    total = fcfg.epochs * steps_per_epoch
    warm = fcfg.warmup_epochs * steps_per_epoch

    res = FinetuneResult()
    best_state = copy.deepcopy(model.state_dict())
    res.best_valid = evaluate(model, valid_b, task)[task.monitor]
    res.history.append({"epoch": 0, "train_loss": float("nan"), "lr": 0.0,
                        **{f"valid_{k}": v for k, v in evaluate(model, valid_b, task).items()}})
    step = 0
    for epoch in range(1, fcfg.epochs + 1):
        losses = []
        for b in batches(train_items, fcfg.batch_size, fcfg.seed * 100003 + epoch, dtype):
            lr = cosine_lr(step, total, warm, fcfg.lr, fcfg.min_lr)
            losses.append(finetune_step(model, b, task, opt, lr))
            step += 1
        metrics = evaluate(model, valid_b, task)
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "lr": lr,
               **{f"valid_{k}": v for k, v in metrics.items()}}
        res.history.append(row)
        if log:
            log(row)
        if metrics[task.monitor] > res.best_valid:
            res.best_valid = metrics[task.monitor]
            res.best_epoch = epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    res.model = model
    if test_items:
        res.test = evaluate(model, eval_batches(test_items, fcfg.batch_size, dtype), task)
    return res
