"""Losses, optimizers, patient-level k-fold cross-validation and ablation runs."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .augment import AugmentSpec, Case, as_cases, augment_dataset
from .errors import ConfigError, ContractError, TrainingError
from .metrics import MetricReport, patient_report, summarize
from .model import SwtrConfig, SwtrModel, build, labels_from_probs, predict_slices
from .tensor import Tensor
from .volume import VoxelMask
from .weights import RESERVED_PREFIX, load_into, read_tensor_file, save_weights

log = logging.getLogger(__name__)

DICE_EPS = 1e-5
LOSSES = ("dice", "ce", "bce", "dice+ce")
OPTIMIZERS = ("sgd", "adam", "rmsprop")


# -- losses ------------------------------------------------------------------

def one_hot(labels: np.ndarray, num_classes: int, dtype=np.float32) -> np.ndarray:
    """``[b, h, w]`` integer labels -> ``[b, C, h, w]``."""
    labels = np.asarray(labels)
    return (labels[:, None] == np.arange(num_classes)[None, :, None, None]).astype(dtype)


def soft_dice_loss(probs: Tensor, target: np.ndarray, eps: float = DICE_EPS) -> Tensor:
    """1 - mean over foreground classes of (2 sum(pt) + eps) / (sum(p) + sum(t) + eps)."""
    if probs.shape != target.shape:
        raise T.DimensionError(f"dice loss: probs {probs.shape} vs target {target.shape}")
    t = Tensor(target.astype(probs.dtype))
    axes = (0, 2, 3)
    inter = T.sum(probs * t, axes)
    denom = T.sum(probs, axes) + target.sum(axis=axes).astype(probs.dtype) + eps
    score = (inter * 2.0 + eps) / denom
    return 1.0 - T.mean(score[1:])


def cross_entropy_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood with a stabilized log-softmax."""
    target = one_hot(labels, logits.shape[1], logits.dtype)
    if target.shape != logits.shape:
        raise T.DimensionError(f"cross entropy: logits {logits.shape} vs labels {np.shape(labels)}")
    nll = T.sum(T.log_softmax(logits, axis=1) * Tensor(target), 1)
    return -T.mean(nll)


def binary_cross_entropy_loss(probs: Tensor, target: np.ndarray, eps: float = 1e-7) -> Tensor:
    t = Tensor(target.astype(probs.dtype))
    pos = T.log(probs + eps) * t
    neg = T.log((1.0 + eps) - probs) * (1.0 - t)
    return -T.mean(pos + neg)


def dice_ce_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    probs = T.softmax(logits, axis=1)
    return soft_dice_loss(probs, one_hot(labels, logits.shape[1], logits.dtype)) + cross_entropy_loss(logits, labels)


def compute_loss(kind: str, logits: Tensor, labels: np.ndarray) -> Tensor:
    if kind == "ce":
        return cross_entropy_loss(logits, labels)
    if kind == "dice+ce":
        return dice_ce_loss(logits, labels)
    target = one_hot(labels, logits.shape[1], logits.dtype)
    probs = T.softmax(logits, axis=1)
    if kind == "dice":
        return soft_dice_loss(probs, target)
    if kind == "bce":
        return binary_cross_entropy_loss(probs, target)
    raise ConfigError(f"unknown loss {kind!r}; choose from {LOSSES}")


# -- optimizers --------------------------------------------------------------

class Optimizer:
    kind = "base"
    slots: tuple = ()

    def __init__(self, named_params, lr: float):
        if lr < 0:
            raise ConfigError(f"learning rate must be non-negative, got {lr}")
        self.params = list(named_params)
        self.lr = lr
        self.step_count = 0
        self.state = {slot: {name: np.zeros_like(p.data) for name, p in self.params} for slot in self.slots}

    def _grads(self):
        for name, p in self.params:
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient; run backward first")
            yield name, p, p.grad

    def step(self) -> None:
        self.step_count += 1
        for name, p, g in list(self._grads()):
            p.data -= self._update(name, g)

    def _update(self, name, g):  # pragma: no cover - overridden
        raise NotImplementedError

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_arrays(self) -> dict:
        return {f"{RESERVED_PREFIX}optim.{slot}.{name}": arr
                for slot, per in self.state.items() for name, arr in per.items()}

    def load_state_arrays(self, arrays: dict, step_count: int) -> None:
        for slot, per in self.state.items():
            for name in per:
                key = f"{RESERVED_PREFIX}optim.{slot}.{name}"
                if key not in arrays:
                    raise ContractError(f"checkpoint lacks optimizer state {key!r}")
                per[name] = arrays[key].astype(per[name].dtype)
        self.step_count = step_count


class SGD(Optimizer):
    """v <- momentum * v + g;  w <- w - lr * v."""

    kind = "sgd"
    slots = ("velocity",)

    def __init__(self, named_params, lr: float, momentum: float = 0.9):
        super().__init__(named_params, lr)
        self.momentum = momentum

    def _update(self, name, g):
        if self.momentum == 0:
            return self.lr * g
        v = self.state["velocity"][name]
        v *= self.momentum
        v += g
        return self.lr * v


class Adam(Optimizer):
    kind = "adam"
    slots = ("m", "v")

    def __init__(self, named_params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(named_params, lr)
        self.betas = betas
        self.eps = eps

    def _update(self, name, g):
        b1, b2 = self.betas
        m, v = self.state["m"][name], self.state["v"][name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1 ** self.step_count)
        vhat = v / (1 - b2 ** self.step_count)
        return self.lr * mhat / (np.sqrt(vhat) + self.eps)


class RMSProp(Optimizer):
    kind = "rmsprop"
    slots = ("square_avg",)

    def __init__(self, named_params, lr: float, alpha: float = 0.99, eps: float = 1e-8):
        super().__init__(named_params, lr)
        self.alpha = alpha
        self.eps = eps

    def _update(self, name, g):
        s = self.state["square_avg"][name]
        s *= self.alpha
        s += (1 - self.alpha) * g * g
        return self.lr * g / (np.sqrt(s) + self.eps)


def make_optimizer(kind: str, named_params, lr: float, momentum: float = 0.9) -> Optimizer:
    if kind == "sgd":
        return SGD(named_params, lr, momentum)
    if kind == "adam":
        return Adam(named_params, lr)
    if kind == "rmsprop":
        return RMSProp(named_params, lr)
    raise ConfigError(f"unknown optimizer {kind!r}; choose from {OPTIMIZERS}")


def optimizer_step(optimizer: Optimizer) -> None:
    optimizer.step()


# -- configuration and fold plans ------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "dice+ce"
    optimizer: str = "sgd"
    lr: float = 1e-4
    momentum: float = 0.9
    epochs: int = 70
    batch_size: int = 32
    fold_count: int = 7
    seed: int = 0

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ConfigError(f"TrainConfig.loss {self.loss!r} not in {LOSSES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"TrainConfig.optimizer {self.optimizer!r} not in {OPTIMIZERS}")
        if not self.lr > 0:
            raise ConfigError("TrainConfig.lr must be > 0")
        if self.epochs < 1 or self.batch_size < 1 or self.fold_count < 2:
            raise ConfigError("TrainConfig needs epochs >= 1, batch_size >= 1, fold_count >= 2")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class FoldPlan:
    folds: list  # [(train_ids, val_ids), ...]

    def validate(self, all_ids: Sequence[str] | None = None) -> None:
        seen = set()
        for train, val in self.folds:
            if set(train) & set(val):
                raise ValueError("a patient appears in both train and validation of one fold")
            if seen & set(val):
                raise ValueError("validation sets overlap")
            seen |= set(val)
        if all_ids is not None and seen != set(all_ids):
            raise ValueError("validation sets do not cover all patients")

    @property
    def validation_sets(self) -> list:
        return [v for _, v in self.folds]


def make_folds(patient_ids: Sequence[str], k: int = 7, seed: int = 0) -> FoldPlan:
    ids = list(patient_ids)
    if k < 2 or k > len(ids):
        raise ValueError(f"cannot split {len(ids)} patients into {k} folds")
    order = np.random.default_rng(seed).permutation(len(ids))
    chunks = np.array_split(order, k)
    folds = []
    for chunk in chunks:
        val = [ids[i] for i in sorted(chunk)]
        val_set = set(val)
        folds.append(([p for p in ids if p not in val_set], val))
    plan = FoldPlan(folds)
    plan.validate(ids)
    return plan


def holdout_plan(patient_ids: Sequence[str], n_val: int, seed: int = 0) -> FoldPlan:
    ids = list(patient_ids)
    order = np.random.default_rng(seed).permutation(len(ids))
    val = [ids[i] for i in sorted(order[:n_val])]
    return FoldPlan([([p for p in ids if p not in set(val)], val)])


# -- training ------------------------------------------------------------------------

def slices_of(cases: Sequence[Case]) -> tuple[np.ndarray, np.ndarray]:
    xs = [np.moveaxis(c.image.data, 2, 0) for c in cases]
    ys = [np.moveaxis(c.mask.labels, 2, 0) for c in cases]
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys)


def training_slices(cases: Sequence[Case], spec: AugmentSpec) -> tuple[np.ndarray, np.ndarray, list]:
    """All axial slices of every augmented copy, with (patient, copy, slice) provenance."""
    aug = augment_dataset(cases, spec)
    xs, ys = [], []
    for _, _, v, m in aug:
        xs.append(np.moveaxis(v.data, 2, 0))
        ys.append(np.moveaxis(m.labels, 2, 0))
    return np.concatenate(xs).astype(np.float32), np.concatenate(ys), aug.slice_index()


def predict_case(model: SwtrModel, case: Case, batch_size: int = 16) -> VoxelMask:
    probs = predict_slices(model, np.moveaxis(case.image.data, 2, 0), batch_size)
    return VoxelMask(np.moveaxis(labels_from_probs(probs), 0, 2), case.mask.spacing)


def evaluate_cases(model: SwtrModel, cases: Sequence[Case], batch_size: int = 16):
    preds, reports = {}, []
    for c in cases:
        pred = predict_case(model, c, batch_size)
        preds[c.patient_id] = pred
        reports.append(patient_report(pred, c.mask, c.patient_id))
    return reports, preds


class Trainer:
    """Owns one model and its optimizer; one instance per fold."""

    def __init__(self, model_config: SwtrConfig, train_config: TrainConfig, fold: int = 0):
        self.model_config = model_config
        self.cfg = train_config
        self.fold = fold
        self.model = build(model_config)
        self.optimizer = make_optimizer(train_config.optimizer, self.model.named_parameters(),
                                        train_config.lr, train_config.momentum)
        self.epoch = 0

    def loss(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        logits = self.model(Tensor(x[:, None].astype(self.model.dtype)))
        return compute_loss(self.cfg.loss, logits, y)

    def train_step(self, x: np.ndarray, y: np.ndarray) -> float:
        self.optimizer.zero_grad()
        loss = self.loss(x, y)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError(f"non-finite loss {value} (fold {self.fold}, epoch {self.epoch}, "
                                f"step {self.optimizer.step_count})")
        loss.backward()
        self.optimizer.step()
        return value

    def epoch_order(self, n: int) -> np.ndarray:
        rng = np.random.default_rng([self.cfg.seed, self.fold, self.epoch])
        return rng.permutation(n)

    def run_epoch(self, X: np.ndarray, Y: np.ndarray) -> float:
        order = self.epoch_order(len(X))
        bs = self.cfg.batch_size
        losses = []
        for b, start in enumerate(range(0, len(order), bs)):
            idx = order[start:start + bs]
            try:
                losses.append(self.train_step(X[idx], Y[idx]))
            except TrainingError as exc:
                raise TrainingError(f"{exc} at batch {b}") from None
        self.epoch += 1
        return float(np.mean(losses))

    def save_checkpoint(self, path) -> None:
        meta = {"fold": self.fold, "epoch": self.epoch, "optimizer": self.optimizer.kind,
                "step": self.optimizer.step_count, "train_config": asdict(self.cfg)}
        save_weights(self.model, path, extra=self.optimizer.state_arrays(), meta=meta)

    @classmethod
    def from_checkpoint(cls, path, train_config: TrainConfig | None = None) -> "Trainer":
        tensors, cfg, meta = read_tensor_file(path)
        tcfg = train_config or TrainConfig.from_dict(meta["train_config"])
        trainer = cls(SwtrConfig.from_dict(cfg), tcfg, meta.get("fold", 0))
        load_into(trainer.model, tensors)
        trainer.optimizer.load_state_arrays(tensors, int(meta.get("step", 0)))
        trainer.epoch = int(meta.get("epoch", 0))
        return trainer


@dataclass
class FoldResult:
    fold: int
    train_ids: list
    val_ids: list
    reports: list
    epoch_log: list
    checkpoint: str | None = None
    train_index: list = field(default_factory=list, repr=False)
    predictions: dict = field(default_factory=dict, repr=False)
    model: SwtrModel | None = field(default=None, repr=False)


@dataclass
class TrainResult:
    folds: list

    @property
    def reports(self) -> list[MetricReport]:
        return [r for f in self.folds for r in f.reports]

    def per_fold(self) -> dict:
        return {f.fold: f.reports for f in self.folds}

    def summary(self) -> dict:
        return summarize(self.reports)

    @property
    def predictions(self) -> dict:
        out = {}
        for f in self.folds:
            out.update(f.predictions)
        return out


def format_log_line(fold: int, epoch: int, loss: float, dice_liver: float, dice_lesion: float) -> str:
    return f"fold={fold}\tepoch={epoch}\tloss={loss:.6f}\tval_dice_liver={dice_liver:.6f}\tval_dice_lesion={dice_lesion:.6f}"


def train(model_config: SwtrConfig, plan: FoldPlan, cases, train_config: TrainConfig,
          augment_spec: AugmentSpec, out_dir=None, folds: Sequence[int] | None = None,
          log_fn: Callable[[str], None] | None = None, val_every: int = 1,
          keep_model: bool = False) -> TrainResult:
    """Train one model per fold on augmented slices of its training patients and
    evaluate patient-wise on the untouched validation volumes."""
    cases = as_cases(cases)
    by_id = {c.patient_id: c for c in cases}
    missing = {p for tr, va in plan.folds for p in (*tr, *va)} - set(by_id)
    if missing:
        raise ValueError(f"fold plan references unknown patients {sorted(missing)}")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for k, (train_ids, val_ids) in enumerate(plan.folds):
        if folds is not None and k not in folds:
            continue
        train_cases = [by_id[p] for p in train_ids]
        val_cases = [by_id[p] for p in val_ids]
        X, Y, index = training_slices(train_cases, augment_spec)
        leaked = {pid for pid, _, _ in index} & set(val_ids)
        if leaked:
            raise TrainingError(f"validation patients {sorted(leaked)} found in training slices")
        trainer = Trainer(model_config, train_config, fold=k)
        epoch_log = []
        for epoch in range(train_config.epochs):
            loss = trainer.run_epoch(X, Y)
            last = epoch == train_config.epochs - 1
            if val_cases and val_every and ((epoch + 1) % val_every == 0 or last):
                reports, _ = evaluate_cases(trainer.model, val_cases)
                s = summarize(reports)
                dl, dt = s["dsc_liver"][0], s["dsc_lesion"][0]
            else:
                dl = dt = float("nan")
            line = format_log_line(k, epoch + 1, loss, dl, dt)
            epoch_log.append(line)
            log.info(line)
            if log_fn is not None:
                log_fn(line)
        reports, preds = evaluate_cases(trainer.model, val_cases)
        ckpt = None
        if out_dir is not None:
            ckpt = str(out_dir / f"fold{k}.swtr")
            trainer.save_checkpoint(ckpt)
        results.append(FoldResult(k, list(train_ids), list(val_ids), reports, epoch_log, ckpt, index, preds,
                                  trainer.model if keep_model else None))
    return TrainResult(results)


# -- ablations ---------------------------------------------------------------------

ABLATION_AXES = {
    "skips": ("num_skip_connections", (0, 1, 2, 3)),
    "layers": ("num_transformer_layers", (8, 10, 12)),
    "train_cases": (None, (25, 30, 35, 40)),
}
_AXIS_HEADERS = {"skips": "#sc", "layers": "#tl", "train_cases": "#pc"}


@dataclass
class AblationRow:
    value: int
    seed: int
    liver: tuple  # (mean, std)
    lesion: tuple


def ablation_run(axis: str, model_config: SwtrConfig, train_config: TrainConfig, cases,
                 augment_spec: AugmentSpec, values: Sequence[int] | None = None,
                 seeds: Sequence[int] = (0,), n_val: int | None = None, plan_seed: int = 0,
                 log_fn=None) -> list[AblationRow]:
    """Train one arm per value on a fixed patient holdout and report validation Dice.

    For ``train_cases`` the arm value is the number of training patients, drawn
    as a prefix of a seeded permutation of the non-validation pool (so smaller
    arms are subsets of larger ones).
    """
    if axis not in ABLATION_AXES:
        raise ConfigError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    field_name, default_values = ABLATION_AXES[axis]
    values = tuple(values or default_values)
    cases = as_cases(cases)
    ids = [c.patient_id for c in cases]
    n_val = n_val or max(1, len(ids) // train_config.fold_count)
    base_plan = holdout_plan(ids, n_val, plan_seed)
    pool, val_ids = base_plan.folds[0]
    pool_order = [pool[i] for i in np.random.default_rng(plan_seed + 1).permutation(len(pool))]
    rows = []
    for seed in seeds:
        for value in values:
            mcfg = model_config.replace(seed=seed)
            train_ids = pool
            if field_name is not None:
                mcfg = mcfg.replace(**{field_name: value})
            else:
                if value > len(pool):
                    raise ValueError(f"{value} training cases requested, only {len(pool)} available")
                train_ids = pool_order[:value]
            tcfg = TrainConfig(**{**asdict(train_config), "seed": seed})
            aspec = AugmentSpec(**{**asdict(augment_spec), "seed": augment_spec.seed + seed})
            res = train(mcfg, FoldPlan([(list(train_ids), list(val_ids))]), cases, tcfg, aspec, val_every=0)
            s = res.summary()
            row = AblationRow(value, seed, s["dsc_liver"][:2], s["dsc_lesion"][:2])
            rows.append(row)
            if log_fn is not None:
                log_fn(f"axis={axis}\tvalue={value}\tseed={seed}\tliver={row.liver[0]:.4f}\tlesion={row.lesion[0]:.4f}")
    return rows


def format_ablation_table(axis: str, rows: list[AblationRow]) -> str:
    """One line per (arm, seed) with mean +- std over validation patients."""
    head = _AXIS_HEADERS.get(axis, axis)
    lines = [f"{head}\tseed\tDSC_liver\tDSC_lesion"]
    for r in rows:
        lines.append(f"{r.value}\t{r.seed}\t{r.liver[0]:.2f} +- {r.liver[1]:.2f}\t{r.lesion[0]:.2f} +- {r.lesion[1]:.2f}")
    return "\n".join(lines) + "\n"
