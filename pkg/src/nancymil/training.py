"""Weakly supervised optimization: Adam from scratch, class-balanced
batching, case-level splits, k-fold cross-validation, early stopping.

Everything is deterministic given (seed, data, config): single-threaded
float64 numpy, seeded generators, and no wall-clock dependence, so
fixed-seed retrains produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict


import numpy as np

from .core import EmbeddingBag, TaskSpec, reduced_task
from .embedding import EmbeddingStore
from .errors import DataError, NumericalError
from .mil import MilModel, forward, backward, loss


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    batch_size: int = 8
    max_epochs: int = 300
    patience: int = 20
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    folds: int = 5
    seed: int = 0
    balance: str = "oversample"   # or "undersample"
    attention_dim: int = 128

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.patience > self.max_epochs:
            raise DataError("patience must not exceed max_epochs")
        if self.folds < 2:
            raise DataError("folds must be at least 2")
        if self.balance not in ("oversample", "undersample"):
            raise DataError(f"unknown balance mode {self.balance!r}")

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        with open(path) as fh:
            data = json.load(fh)
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls(m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState, config: TrainConfig) -> None:
    """Standard bias-corrected Adam update, in place."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + config.adam_eps)


def balanced_batches(labels, batch_size: int, mode: str,
                     rng: np.random.Generator) -> list[list[int]]:
    """One epoch of class-balanced batches (lists of indices into labels).

    oversample: every class is drawn exactly max-class-count times, minority
    classes repeated (each repetition an independent shuffle).
    undersample: every class is drawn exactly min-class-count times, without
    replacement.
    """
    labels = list(labels)
    by_class: dict[int, list[int]] = {}
    for i, lab in enumerate(labels):
        by_class.setdefault(int(lab), []).append(i)
    counts = {c: len(ix) for c, ix in by_class.items()}
    if mode == "oversample":
        per_class = max(counts.values())
    elif mode == "undersample":
        per_class = min(counts.values())
    else:
        raise DataError(f"unknown balance mode {mode!r}")
    pool: list[int] = []
    for c in sorted(by_class):
        idx = np.array(by_class[c])
        draws: list[int] = []
        while len(draws) < per_class:
            draws.extend(rng.permutation(idx).tolist())
        pool.extend(draws[:per_class])
    order = rng.permutation(len(pool))
    shuffled = [pool[i] for i in order]
    return [shuffled[i:i + batch_size]
            for i in range(0, len(shuffled), batch_size)]


@dataclass
class SplitAssignment:
    """Case-level split plus, within train, a fold index per case."""

    split: dict[str, str]        # case_id -> train | preliminary | final
    fold: dict[str, int]         # train cases only

    def split_of_bag(self, bag: EmbeddingBag) -> str:
        return self.split[bag.case_id]


def make_splits(case_ids, ratios=(0.7, 0.15, 0.15), seed: int = 0,
                folds: int = 5) -> SplitAssignment:
    """Seeded case-level assignment honoring the ratios within rounding;
    train cases get round-robin folds after a second shuffle."""
    cases = sorted(set(case_ids))
    if abs(sum(ratios) - 1.0) > 1e-9 or len(ratios) != 3:
        raise DataError(f"ratios must be 3 values summing to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    order = [cases[i] for i in rng.permutation(len(cases))]
    n = len(order)
    counts = [int(np.floor(n * r)) for r in ratios]
    remainders = [n * r - c for r, c in zip(ratios, counts)]
    for _ in range(n - sum(counts)):
        k = int(np.argmax(remainders))
        counts[k] += 1
        remainders[k] = -1.0
    names = ("train", "preliminary", "final")
    split: dict[str, str] = {}
    pos = 0
    for name, c in zip(names, counts):
        for case in order[pos:pos + c]:
            split[case] = name
        pos += c
    train_cases = [c for c in order if split[c] == "train"]
    if train_cases and len(train_cases) < folds:
        raise DataError(f"{len(train_cases)} training cases is fewer than "
                        f"{folds} folds")
    fold_order = [train_cases[i] for i in rng.permutation(len(train_cases))]
    fold = {case: i % folds for i, case in enumerate(fold_order)}
    return SplitAssignment(split=split, fold=fold)


def split_bags(bags, assignment: SplitAssignment) -> dict[str, list[EmbeddingBag]]:
    out: dict[str, list[EmbeddingBag]] = {"train": [], "preliminary": [],
                                          "final": []}
    for bag in bags:
        if bag.case_id not in assignment.split:
            raise DataError(f"case {bag.case_id} has no split assignment")
        out[assignment.split[bag.case_id]].append(bag)
    return out


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    best_so_far: float


@dataclass
class FoldResult:
    fold: int
    model: MilModel
    best_val_loss: float
    history: list[EpochRecord] = field(default_factory=list)


@dataclass
class TrainResult:
    task: TaskSpec
    folds: list[FoldResult]

    @property
    def best(self) -> FoldResult:
        """Deployed model: the fold with the best validation loss."""
        return min(self.folds, key=lambda f: (f.best_val_loss, f.fold))


def _mean_val_loss(bags, labels, model) -> float:
    total = 0.0
    for bag, lab in zip(bags, labels):
        total += loss(forward(bag.embeddings, model).s, lab, model.task)
    return total / len(bags)


def _check_classes_present(labels, task: TaskSpec, where: str) -> None:
    present = set(int(l) for l in labels)
    missing = [task.classes[c] for c in range(task.n_classes)
               if c not in present]
    if missing:
        raise DataError(f"{where}: task classes {missing} absent from data")


def train_task(data, task: TaskSpec, config: TrainConfig,
               drop_placeholder: bool = False) -> TrainResult:
    """Per-fold training with class-balanced batches, Adam, early stopping.

    data is an EmbeddingStore or list of bags — the cross-validation pool.
    Each bag contributes all of its tiles; the batch gradient is the mean of
    per-bag gradients. drop_placeholder switches a specialist to its
    gate-mode variant (placeholder class removed, out-of-group bags
    filtered out).
    """
    bags = list(data.bags if isinstance(data, EmbeddingStore) else data)
    if not bags:
        raise DataError("no bags to train on")
    if drop_placeholder:
        task = reduced_task(task)
        if task.specific_classes:
            representable = {int(c) for c in task.classes}
            bags = [b for b in bags if b.label in representable]
        if not bags:
            raise DataError("no bags left after placeholder-class filtering")
    d = bags[0].dim
    assignment = make_splits([b.case_id for b in bags], ratios=(1.0, 0.0, 0.0),
                             seed=config.seed, folds=config.folds)
    fold_of = {b.slide_id: assignment.fold[b.case_id] for b in bags}

    results: list[FoldResult] = []
    for f in range(config.folds):
        train = [b for b in bags if fold_of[b.slide_id] != f]
        val = [b for b in bags if fold_of[b.slide_id] == f]
        if not train or not val:
            raise DataError(f"fold {f}: empty train or validation part")
        train_labels = [task.map_label(b.label) for b in train]
        val_labels = [task.map_label(b.label) for b in val]
        _check_classes_present(train_labels, task, f"fold {f}")

        model = MilModel.init(task, d=d, m=config.attention_dim,
                              seed=config.seed + 7919 * (f + 1))
        adam = AdamState.init(model.params())
        rng = np.random.default_rng(config.seed + 104729 * (f + 1))

        best_val = np.inf
        best_params = None
        bad = 0
        history: list[EpochRecord] = []
        for epoch in range(1, config.max_epochs + 1):
            batches = balanced_batches(train_labels, config.batch_size,
                                       config.balance, rng)
            epoch_loss = 0.0
            for batch in batches:
                grads = {k: np.zeros_like(p)
                         for k, p in model.params().items()}
                batch_loss = 0.0
                for i in batch:
                    trace = forward(train[i].embeddings, model)
                    try:
                        L, g = backward(train[i].embeddings, train_labels[i],
                                        model, trace)
                    except NumericalError as exc:
                        raise NumericalError(
                            f"epoch {epoch}, bag {train[i].slide_id}: "
                            f"{exc}") from exc
                    batch_loss += L
                    for k in grads:
                        grads[k] += g[k]
                # mean reduction keeps lr semantics stable across batch sizes
                for k in grads:
                    grads[k] /= len(batch)
                adam_step(model.params(), grads, adam, config)
                epoch_loss += batch_loss / len(batch)
            train_loss = epoch_loss / len(batches)
            val_loss = _mean_val_loss(val, val_labels, model)
            if not np.isfinite(val_loss):
                raise NumericalError(f"fold {f}, epoch {epoch}: "
                                     "non-finite validation loss")
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: p.copy() for k, p in model.params().items()}
                bad = 0
            else:
                bad += 1
            history.append(EpochRecord(epoch, train_loss, val_loss, best_val))
            if bad >= config.patience:
                break
        best_model = MilModel(task=task, d=d, m=config.attention_dim,
                              V=best_params["V"], w=best_params["w"],
                              psi_W=best_params["psi_W"],
                              psi_b=best_params["psi_b"],
                              seed=model.seed)
        results.append(FoldResult(fold=f, model=best_model,
                                  best_val_loss=best_val, history=history))
    return TrainResult(task=task, folds=results)


def write_history(path, history: list[EpochRecord]) -> None:
    with open(path, "w") as fh:
        fh.write("epoch\ttrain_loss\tval_loss\tbest_so_far\n")
        for rec in history:
            fh.write(f"{rec.epoch}\t{rec.train_loss!r}\t{rec.val_loss!r}\t"
                     f"{rec.best_so_far!r}\n")
