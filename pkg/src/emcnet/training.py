"""Supervised training: cross-entropy, momentum SGD, plateau schedule,
early stopping, stratified k-fold splits, and Top-N / precision-recall
reporting.

The experiment harness holds out the manifest's test split once, runs
k-fold cross-validation on the remaining samples for every configured
seed, evaluates each seed's best fold model on the held-out test set, and
reports the per-seed metrics together with their mean and standard
deviation. All shuffling, fold assignment, and initialization derive from
named substreams of the run seed, so identical configurations reproduce
byte-identical outputs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import ConfigError, DimensionError, EmptyInputError, NumericError
from .imaging import DatasetManifest, Image, load_dataset, patchify
from .model import (
    ModelConfig,
    ModelParams,
    forward_from_patches,
    init_params,
    save_checkpoint,
)
from .rng import substream


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 24
    epochs: int = 100
    lr0: float = 5e-3
    momentum: float = 0.9
    plateau_factor: float = 0.5
    plateau_patience: int = 10
    early_stop_patience: int | None = None  # None: reuse plateau_patience
    k_folds: int = 10
    seeds: tuple[int, ...] = (0,)
    top_n: tuple[int, ...] = (1, 2, 3, 5)
    optimizer: str = "sgd"  # or "adam"
    train_top1_target: float | None = None  # optional capacity-check exit

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigError(f"plateau factor must be in (0, 1), got {self.plateau_factor}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("seeds", "top_n"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


# ---------------------------------------------------------------------------
# loss


def cross_entropy(q: Tensor, label: int) -> Tensor:
    """Negative log-probability of the true class, input clamped at 1e-12."""
    if q.ndim == 1:
        q = ad.reshape(q, (1, q.shape[0]))
    n_classes = q.shape[1]
    if not 0 <= label < n_classes:
        raise DimensionError(f"label {label} out of range for {n_classes} classes")
    onehot = np.zeros((n_classes, 1))
    onehot[label, 0] = 1.0
    picked = ad.matmul(q, ad.constant(onehot))
    return ad.neg(ad.log(ad.clip_min(picked, 1e-12)))


def batch_cross_entropy(qs: list[Tensor], labels) -> Tensor:
    losses = [cross_entropy(q, int(y)) for q, y in zip(qs, labels)]
    return ad.reduce_mean(ad.concat(losses, axis=0))


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    """Momentum SGD: velocity = momentum * velocity + grad; p -= lr * velocity."""

    def __init__(self, params: dict[str, Tensor], lr: float, momentum: float = 0.9):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        for name, t in self.params.items():
            g = grads[name]
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name}")
            v = self.velocity[name]
            v *= self.momentum
            v += g
            t.data -= self.lr * v


class Adam:
    """Optional optimizer; momentum SGD remains the default."""

    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        for name, t in self.params.items():
            g = grads[name]
            if np.isnan(g).any():
                raise NumericError(f"NaN gradient in parameter {name}")
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1**self.t)
            v_hat = self.v[name] / (1 - self.beta2**self.t)
            t.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def make_optimizer(config: TrainConfig, params: dict[str, Tensor]):
    if config.optimizer == "adam":
        return Adam(params, config.lr0)
    return SGD(params, config.lr0, config.momentum)


class PlateauScheduler:
    """Halve the rate when the monitored metric stalls for ``patience`` epochs."""

    def __init__(self, lr0: float, factor: float = 0.5, patience: int = 10):
        self.lr = lr0
        self.factor = factor
        self.patience = patience
        self.best = -np.inf
        self.wait = 0

    def update(self, metric: float) -> float:
        if metric > self.best:
            self.best = metric
            self.wait = 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr *= self.factor
                self.wait = 0
        return self.lr


# ---------------------------------------------------------------------------
# splits and metrics


def kfold_splits(labels, k: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Stratified folds over range(len(labels)), deterministic per seed.

    Classes with fewer samples than folds are pooled and dealt round-robin
    (with a warning), so every index lands in exactly one validation fold.
    """
    labels = np.asarray(labels)
    n = len(labels)
    if k < 2:
        raise ConfigError(f"k-fold needs k >= 2, got {k}")
    if n < k:
        raise ConfigError(f"dataset of {n} samples cannot be split into {k} folds")
    rng = substream(seed, "folds")
    fold_of = np.empty(n, dtype=int)
    next_fold = 0
    small: list[int] = []
    for c in np.unique(labels):
        members = np.nonzero(labels == c)[0]
        members = members[rng.permutation(len(members))]
        if len(members) < k:
            small.extend(members.tolist())
            continue
        for j, idx in enumerate(members):
            fold_of[idx] = (next_fold + j) % k
        next_fold = (next_fold + len(members)) % k
    if small:
        warnings.warn(
            f"{len(small)} samples from classes smaller than k={k} assigned unstratified"
        )
        small = [small[j] for j in rng.permutation(len(small))]
        for j, idx in enumerate(small):
            fold_of[idx] = (next_fold + j) % k
    splits = []
    for f in range(k):
        val = np.nonzero(fold_of == f)[0]
        train = np.nonzero(fold_of != f)[0]
        splits.append((train, val))
    return splits


@dataclass
class Metrics:
    top_n: dict[int, float]
    precision: dict[int, float]
    recall: dict[int, float]
    precision_macro: float
    recall_macro: float
    n_samples: int
    confusion: np.ndarray = field(repr=False)

    @property
    def top1(self) -> float:
        return self.top_n[1]

    def to_dict(self, class_names: list[str] | None = None) -> dict:
        name = (lambda c: class_names[c]) if class_names else str
        return {
            "topk": {str(n): v for n, v in sorted(self.top_n.items())},
            "precision_macro": self.precision_macro,
            "recall_macro": self.recall_macro,
            "per_class": {
                name(c): {"precision": self.precision[c], "recall": self.recall[c]}
                for c in sorted(self.precision)
            },
            "n_samples": self.n_samples,
        }


def compute_metrics(probs: np.ndarray, labels, top_n=(1, 2, 3, 5)) -> Metrics:
    """Top-N accuracy plus per-class precision/recall from the confusion matrix."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(labels) != probs.shape[0]:
        raise DimensionError(f"probabilities {probs.shape} do not match {len(labels)} labels")
    if len(labels) == 0:
        raise EmptyInputError("empty evaluation split")
    n, n_classes = probs.shape
    ranking = np.argsort(-probs, axis=1, kind="stable")
    tops = {}
    for k in top_n:
        kk = min(k, n_classes)
        tops[k] = float(np.mean([labels[i] in ranking[i, :kk] for i in range(n)]))
    preds = ranking[:, 0]
    confusion = np.zeros((n_classes, n_classes), dtype=int)
    for t, p in zip(labels, preds):
        confusion[t, p] += 1
    precision, recall = {}, {}
    for c in range(n_classes):
        pred_c = confusion[:, c].sum()
        true_c = confusion[c, :].sum()
        precision[c] = float(confusion[c, c] / pred_c) if pred_c else 0.0
        recall[c] = float(confusion[c, c] / true_c) if true_c else 0.0
    return Metrics(
        top_n=tops,
        precision=precision,
        recall=recall,
        precision_macro=float(np.mean(list(precision.values()))),
        recall_macro=float(np.mean(list(recall.values()))),
        n_samples=n,
        confusion=confusion,
    )


def predict_proba_patches(patch_mats: list[np.ndarray], params: ModelParams, config: ModelConfig) -> np.ndarray:
    return np.vstack([forward_from_patches(p, params, config).data for p in patch_mats])


def evaluate_model(
    patch_mats: list[np.ndarray], labels, params: ModelParams, config: ModelConfig, top_n=(1, 2, 3, 5)
) -> Metrics:
    return compute_metrics(predict_proba_patches(patch_mats, params, config), labels, top_n)


def permutation_baseline(labels, predictions, n_permutations: int = 200, seed: int = 0) -> tuple[float, float]:
    """Accuracy mean and std of the predictions against shuffled labels."""
    labels = np.asarray(labels)
    predictions = np.asarray(predictions)
    rng = substream(seed, "permutation")
    accs = [
        float(np.mean(labels[rng.permutation(len(labels))] == predictions))
        for _ in range(n_permutations)
    ]
    return float(np.mean(accs)), float(np.std(accs))


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainResult:
    params: ModelParams
    history: list[dict]
    best_epoch: int
    stopped_epoch: int


def patch_stack(images: list[Image], config: ModelConfig) -> list[np.ndarray]:
    return [patchify(img, config.patch_size).flat for img in images]


def train_model(
    train_patches: list[np.ndarray],
    train_labels,
    model_config: ModelConfig,
    train_config: TrainConfig,
    seed: int,
    val_patches: list[np.ndarray] | None = None,
    val_labels=None,
) -> TrainResult:
    """Mini-batch training with plateau halving and early stopping.

    The validation Top-1 drives both the scheduler and early stopping; the
    best-epoch parameters are restored into the result. Without a validation
    split, the running train Top-1 is monitored instead. When
    ``train_top1_target`` is set, training stops as soon as the running
    train accuracy reaches it and keeps the current (not best-epoch)
    parameters, since the target expresses a fit-the-train-set goal.
    """
    train_labels = np.asarray(train_labels)
    params = init_params(model_config, seed)
    named = params.as_dict()
    opt = make_optimizer(train_config, named)
    sched = PlateauScheduler(train_config.lr0, train_config.plateau_factor, train_config.plateau_patience)
    stop_patience = (
        train_config.early_stop_patience
        if train_config.early_stop_patience is not None
        else train_config.plateau_patience
    )
    shuffle_rng = substream(seed, "shuffle")
    n = len(train_patches)
    has_val = val_patches is not None and val_labels is not None and len(val_patches) > 0

    history: list[dict] = []
    best_metric = -np.inf
    best_params = params.copy()
    best_epoch = 0
    wait = 0
    target_hit = False

    for epoch in range(1, train_config.epochs + 1):
        order = shuffle_rng.permutation(n)
        epoch_loss = 0.0
        correct = 0
        for start in range(0, n, train_config.batch_size):
            batch = order[start : start + train_config.batch_size]
            with Tape() as tape:
                for t in named.values():
                    tape.watch(t)
                qs = [forward_from_patches(train_patches[i], params, model_config) for i in batch]
                loss = batch_cross_entropy(qs, train_labels[batch])
            grads = tape.backward(loss)
            opt.step({name: grads[t] for name, t in named.items()})
            epoch_loss += loss.item() * len(batch)
            correct += sum(int(np.argmax(q.data)) == train_labels[i] for q, i in zip(qs, batch))
        train_loss = epoch_loss / n
        train_top1 = correct / n

        if has_val:
            val_metrics = evaluate_model(val_patches, val_labels, params, model_config, train_config.top_n)
            monitored = val_metrics.top1
        else:
            monitored = train_top1
        lr_used = opt.lr
        opt.lr = sched.update(monitored)
        history.append(
            {
                "epoch": epoch,
                "lr": lr_used,
                "train_loss": train_loss,
                "train_top1": float(train_top1),
                "val_top1": float(monitored) if has_val else None,
            }
        )

        if monitored > best_metric:
            best_metric = monitored
            best_params = params.copy()
            best_epoch = epoch
            wait = 0
        else:
            wait += 1

        if train_config.train_top1_target is not None and train_top1 >= train_config.train_top1_target:
            target_hit = True
            break
        if wait >= stop_patience:
            break

    final = params if target_hit else best_params
    return TrainResult(params=final, history=history, best_epoch=best_epoch, stopped_epoch=len(history))


# ---------------------------------------------------------------------------
# experiment harness


def write_metrics_csv(rows: list[dict], path: str | Path) -> None:
    fields = ["seed", "fold", "epoch", "lr", "train_loss", "train_top1", "val_top1"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fields})


def _mean_std(per_seed: list[dict]) -> tuple[dict, dict]:
    keys = per_seed[0].keys()
    mean, std = {}, {}
    for key in keys:
        if isinstance(per_seed[0][key], dict):
            mean[key], std[key] = _mean_std([m[key] for m in per_seed])
        else:
            vals = np.array([m[key] for m in per_seed], dtype=float)
            mean[key] = float(vals.mean())
            std[key] = float(vals.std())
    return mean, std


def run_experiment(
    manifest: DatasetManifest,
    root: str | Path,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path,
    jobs: int = 1,
) -> dict:
    """Hold out the test split, run per-seed k-fold CV, report and checkpoint.

    Returns the summary dictionary; also writes ``summary.json``,
    ``metrics.csv``, ``run_config.json`` and the best checkpoint (by
    validation Top-1 across seeds and folds) into ``out_dir``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    images, labels = load_dataset(manifest, root, image_side=model_config.image_side)
    patches = patch_stack(images, model_config)
    test_idx = list(manifest.splits.get("test", []))
    remainder = sorted(set(range(len(images))) - set(test_idx))
    if not remainder:
        raise ConfigError("no training samples outside the test split")

    rem_labels = labels[remainder]
    tasks = []
    for seed in train_config.seeds:
        folds = kfold_splits(rem_labels, train_config.k_folds, seed)
        for fold_id, (tr, va) in enumerate(folds):
            tasks.append((seed, fold_id, [remainder[i] for i in tr], [remainder[i] for i in va]))

    results = _run_tasks(tasks, patches, labels, model_config, train_config, jobs)

    csv_rows: list[dict] = []
    per_seed_best: dict[int, dict] = {}
    for (seed, fold_id, tr_idx, va_idx), result in zip(tasks, results):
        for row in result.history:
            csv_rows.append({"seed": seed, "fold": fold_id, **row})
        val_metrics = evaluate_model(
            [patches[i] for i in va_idx], labels[va_idx], result.params, model_config, train_config.top_n
        )
        entry = {
            "fold": fold_id,
            "val_top1": val_metrics.top1,
            "result": result,
            "train_idx": tr_idx,
        }
        best = per_seed_best.get(seed)
        if best is None or entry["val_top1"] > best["val_top1"]:
            per_seed_best[seed] = entry

    per_seed_summaries: dict[str, dict] = {}
    test_metric_dicts: list[dict] = []
    overall_best: tuple[float, int] | None = None
    for seed in train_config.seeds:
        best = per_seed_best[seed]
        if test_idx:
            test_metrics = evaluate_model(
                [patches[i] for i in test_idx], labels[test_idx], best["result"].params,
                model_config, train_config.top_n,
            )
            metric_dict = test_metrics.to_dict(manifest.classes)
        else:
            metric_dict = {}
        per_seed_summaries[str(seed)] = {
            "best_fold": best["fold"],
            "val_top1": best["val_top1"],
            "test": metric_dict,
        }
        if metric_dict:
            test_metric_dicts.append(metric_dict)
        if overall_best is None or best["val_top1"] > overall_best[0]:
            overall_best = (best["val_top1"], seed)

    best_seed = overall_best[1]
    best_entry = per_seed_best[best_seed]
    checkpoint_path = out_dir / "checkpoint.bin"
    save_checkpoint(checkpoint_path, best_entry["result"].params, model_config)

    train_split = manifest.splits.get("train", [])
    checkpoint_train_top1 = None
    if train_split:
        ckpt_train = evaluate_model(
            [patches[i] for i in train_split], labels[train_split], best_entry["result"].params,
            model_config, train_config.top_n,
        )
        checkpoint_train_top1 = ckpt_train.top1

    summary: dict = {
        "ablation": {
            "use_genc": model_config.use_genc,
            "use_hgenc": model_config.use_hgenc,
            "use_ctenc": model_config.use_ctenc,
        },
        "seeds": list(train_config.seeds),
        "per_seed": per_seed_summaries,
        "checkpoint": {
            "path": checkpoint_path.name,
            "seed": best_seed,
            "fold": best_entry["fold"],
            "val_top1": best_entry["val_top1"],
            "train_top1": checkpoint_train_top1,
        },
    }
    if test_metric_dicts:
        mean, std = _mean_std(test_metric_dicts)
        summary["topk"] = mean["topk"]
        summary["precision_macro"] = mean["precision_macro"]
        summary["recall_macro"] = mean["recall_macro"]
        summary["per_class"] = mean["per_class"]
        summary["std"] = {"topk": std["topk"], "precision_macro": std["precision_macro"],
                          "recall_macro": std["recall_macro"]}

    write_metrics_csv(csv_rows, out_dir / "metrics.csv")
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    (out_dir / "run_config.json").write_text(
        json.dumps({"model": model_config.to_dict(), "train": train_config.to_dict()},
                   indent=2, sort_keys=True)
    )
    return summary


def _train_one(args) -> TrainResult:
    seed, tr_idx, va_idx, patches, labels, model_config, train_config = args
    return train_model(
        [patches[i] for i in tr_idx],
        labels[tr_idx],
        model_config,
        train_config,
        seed,
        val_patches=[patches[i] for i in va_idx],
        val_labels=labels[va_idx],
    )


def _run_tasks(tasks, patches, labels, model_config, train_config, jobs) -> list[TrainResult]:
    args = [
        (seed, tr_idx, va_idx, patches, labels, model_config, train_config)
        for seed, _, tr_idx, va_idx in tasks
    ]
    if jobs <= 1 or len(args) <= 1:
        return [_train_one(a) for a in args]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=min(jobs, len(args))) as pool:
        return list(pool.map(_train_one, args))
