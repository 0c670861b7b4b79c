"""SGD training, target-domain evaluation and the fold-based protocols."""
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np
from scipy import stats

from siamxd import autodiff as ad
from siamxd.autodiff import ContractError, Tensor
from siamxd.data import (
    DEFAULT_GROUP_SIZE,
    build_pairs,
    select_n_shot,
    select_source_group,
    source_only_batches,
    staggered_batches,
)
from siamxd.losses import (
    BatchSplit,
    LossBreakdown,
    classification_loss,
    detaching_loss,
    overall_loss,
    pairing_loss,
)
from siamxd.model import ConfigError, ModelConfig, init_params
from siamxd.seeding import derive_seed

log = logging.getLogger(__name__)

METHODS = ("ours", "source-only")
DEFAULT_SHOTS = (1, 3, 5, 7, 9)


class TrainingError(RuntimeError):
    """A training step produced a non-finite loss."""

    def __init__(self, message, breakdown=None, step=None):
        super().__init__(message)
        self.breakdown = breakdown
        self.step = step


class ProtocolError(RuntimeError):
    """One or more folds failed; ``failures`` maps fold index to message."""

    def __init__(self, message, failures, results=()):
        super().__init__(message)
        self.failures = failures
        self.results = list(results)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.95
    decay_every: str = "epoch"   # or "step"
    alpha: float = 0.25
    epochs: int = 30
    batch_size: int = 32
    use_cp: bool = True
    use_cd: bool = True
    momentum: float = 0.0
    squared_distance: bool = False
    cd_margin: Optional[float] = None
    seed: int = 0

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.decay_every not in ("epoch", "step"):
            raise ConfigError(f"decay_every must be 'epoch' or 'step', got {self.decay_every!r}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 4 or self.batch_size % 2:
            raise ConfigError(f"batch_size must be even and >= 4, got {self.batch_size}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.cd_margin is not None and self.cd_margin <= 0:
            raise ConfigError("cd_margin must be positive when set")

    @property
    def loss_mask(self):
        return mask_name(self.use_cp, self.use_cd)

    def epoch_lr(self, epoch):
        return self.lr * self.lr_decay ** epoch


def mask_name(use_cp, use_cd):
    return {(True, True): "cp+cd", (True, False): "cp", (False, True): "cd", (False, False): "none"}[(use_cp, use_cd)]


# --- one optimisation step ------------------------------------------------------------

def _flat(images):
    return Tensor(images.reshape(images.shape[0], -1))


def compute_losses(model, batch, config):
    """Build the loss graph for one batch.

    Returns ``(objective, l_c, l_cp, l_cd)``; the last two are floats and
    already zero for masked terms. Cross-domain terms only join the graph
    when they actually contribute, so ``alpha == 0`` or an all-off mask
    yields exactly the plain cross-entropy graph.
    """
    fs = model.embed(_flat(batch.source))
    l_c = classification_loss(model.predict(fs), batch.source_labels)
    objective = l_c
    l_cp = l_cd = 0.0
    if batch.target is None or not (config.use_cp or config.use_cd):
        return objective, l_c, l_cp, l_cd

    def cross_terms(fs_):
        ft = model.embed(_flat(batch.target))
        split = BatchSplit.from_embeddings(fs_, ft, batch.source_labels, batch.target_labels)
        cp = pairing_loss(split, config.squared_distance) if config.use_cp else None
        cd = detaching_loss(split, config.squared_distance, config.cd_margin) if config.use_cd else None
        return cp, cd

    if config.alpha > 0:
        cp, cd = cross_terms(fs)
        zero = Tensor(0.0)
        objective = overall_loss(l_c, cp if cp is not None else zero, cd if cd is not None else zero, config.alpha)
    else:
        with ad.no_grad():
            cp, cd = cross_terms(Tensor(fs.data))
    l_cp = float(cp.data) if cp is not None else 0.0
    l_cd = float(cd.data) if cd is not None else 0.0
    return objective, l_c, l_cp, l_cd


def sgd_update(model, lr, momentum=0.0, velocity=None):
    for name, p in model.params.items():
        g = p.grad
        if momentum:
            v = velocity.get(name)
            v = g.copy() if v is None else momentum * v + g
            velocity[name] = v
            g = v
        p.data -= lr * g


def train_step(model, batch, config, lr=None, velocity=None, step=None):
    """One SGD update on ``batch``; returns the pre-update loss breakdown."""
    lr = config.lr if lr is None else lr
    model.zero_grad()
    objective, l_c, l_cp, l_cd = compute_losses(model, batch, config)
    breakdown = LossBreakdown(float(l_c.data), l_cp, l_cd, float(objective.data), config.alpha)
    if not all(math.isfinite(v) for v in (breakdown.l_c, l_cp, l_cd, breakdown.l_overall)):
        raise TrainingError(f"non-finite loss at step {step}: {breakdown}", breakdown, step)
    ad.backward(objective, model.parameters())
    sgd_update(model, lr, config.momentum, velocity if velocity is not None else {})
    return breakdown


def train(model, epoch_batches, config):
    """Run ``config.epochs`` epochs; ``epoch_batches(e)`` yields that epoch's batches.

    Returns the per-epoch mean :class:`LossBreakdown` history.
    """
    history = []
    velocity = {}
    step = 0
    for epoch in range(config.epochs):
        rows = []
        for batch in epoch_batches(epoch):
            if config.decay_every == "epoch":
                lr = config.epoch_lr(epoch)
            else:
                lr = config.lr * config.lr_decay ** step
            rows.append(train_step(model, batch, config, lr, velocity, step))
            step += 1
        if not rows:
            raise ContractError(f"epoch {epoch} produced no batches")
        m = np.array([[r.l_c, r.l_cp, r.l_cd, r.l_overall] for r in rows]).mean(axis=0)
        history.append(LossBreakdown(float(m[0]), float(m[1]), float(m[2]), float(m[3]), config.alpha))
        log.debug("epoch %d: %s", epoch, history[-1])
    return history


# --- evaluation ---------------------------------------------------------------------------

def binary_metrics(y_true, y_pred):
    """Accuracy and F1 of 0/1 predictions; F1 is 0 when precision + recall is 0."""
    y_true = np.asarray(y_true).astype(bool)
    y_pred = np.asarray(y_pred).astype(bool)
    if y_true.size == 0:
        raise ContractError("metrics on an empty set")
    tp = int(np.sum(y_true & y_pred))
    tn = int(np.sum(~y_true & ~y_pred))
    fp = int(np.sum(~y_true & y_pred))
    fn = int(np.sum(y_true & ~y_pred))
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return {"accuracy": (tp + tn) / y_true.size, "f1": f1}


def predict_proba(model, images, chunk=512):
    out = []
    with ad.no_grad():
        for i in range(0, len(images), chunk):
            out.append(model.forward(_flat(images[i:i + chunk])).data.reshape(-1))
    return np.concatenate(out)


def evaluate(model, test, threshold=0.5):
    if len(test) == 0:
        raise ContractError("evaluation on an empty test set")
    probs = predict_proba(model, test.images)
    return binary_metrics(test.labels, probs >= threshold)


# --- confidence intervals ---------------------------------------------------------------

def t_critical(k):
    """Two-sided 95% Student-t critical value for k folds, at table precision (3 dp)."""
    if k < 2:
        raise ContractError("confidence interval needs k >= 2")
    return round(float(stats.t.ppf(0.975, k - 1)), 3)


def mean_ci95(values):
    """``(mean, half_width)`` with half-width ``t * s / sqrt(k)``."""
    v = np.asarray(values, dtype=np.float64)
    k = v.size
    t = t_critical(k)
    if np.all(v == v[0]):
        return float(v[0]), 0.0
    mean = math.fsum(v) / k
    s = math.sqrt(math.fsum((v - mean) ** 2) / (k - 1))
    return mean, t * s / math.sqrt(k)


def format_ci(mean, half_width, digits=4):
    return f"{mean:.{digits}f}±{half_width:.{digits}f}"


@dataclass
class FoldResult:
    fold: int
    seed: int
    accuracy: float = float("nan")
    f1: float = float("nan")
    history: list = field(default_factory=list)
    shot_ids: list = field(default_factory=list)
    source_ids: list = field(default_factory=list)
    error: Optional[str] = None
    model: object = field(default=None, repr=False, compare=False)


@dataclass
class FoldReport:
    per_fold: list
    mean_accuracy: float
    ci95_accuracy: float
    mean_f1: float
    ci95_f1: float
    folds: list = field(default_factory=list, repr=False)

    @classmethod
    def from_folds(cls, folds):
        acc = [f.accuracy for f in folds]
        f1 = [f.f1 for f in folds]
        ma, ca = mean_ci95(acc)
        mf, cf = mean_ci95(f1)
        per = [{"accuracy": a, "f1": b} for a, b in zip(acc, f1)]
        return cls(per, ma, ca, mf, cf, list(folds))

    @property
    def k(self):
        return len(self.per_fold)

    def accuracy_str(self):
        return format_ci(self.mean_accuracy, self.ci95_accuracy)

    def f1_str(self):
        return format_ci(self.mean_f1, self.ci95_f1)


# --- fold protocol ------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchmarkData:
    source: object
    target_train: object
    target_test: object


def fold_seed(seed, fold):
    return derive_seed(seed, "fold", fold)


def run_fold(data, n, config, model_config, fold, seed, method="ours", group_size=DEFAULT_GROUP_SIZE):
    """Train one fold from scratch and evaluate it on the fixed target test set."""
    if method not in METHODS:
        raise ConfigError(f"method must be one of {METHODS}, got {method!r}")
    fs = fold_seed(seed, fold)
    result = FoldResult(fold, fs)
    shots = select_n_shot(data.target_train, n, derive_seed(fs, "shots"))
    group = select_source_group(data.source, derive_seed(fs, "source-group"), group_size)
    result.source_ids = [s.id for s in group]
    model = init_params(replace(model_config, seed=derive_seed(fs, "init")))
    if method == "ours":
        result.shot_ids = [s.id for s in shots]

        def epoch_batches(e):
            stream = build_pairs(group, shots, derive_seed(fs, "pairs", e), group_size)
            return staggered_batches(stream, config.batch_size)
    else:
        config = replace(config, use_cp=False, use_cd=False)

        def epoch_batches(e):
            return source_only_batches(group, 2 * n, config.batch_size, derive_seed(fs, "pairs", e))

    result.history = train(model, epoch_batches, config)
    metrics = evaluate(model, data.target_test)
    result.accuracy, result.f1 = metrics["accuracy"], metrics["f1"]
    return result, model


def _fold_worker(args):
    data, n, config, model_config, fold, seed, method, group_size = args
    try:
        result, model = run_fold(data, n, config, model_config, fold, seed, method, group_size)
        result.model = model
        return result
    except Exception as exc:  # noqa: BLE001 - reported per fold
        return FoldResult(fold, fold_seed(seed, fold), error=f"{type(exc).__name__}: {exc}")


def k_fold_protocol(data, n, config, k=10, model_config=None, seed=0, method="ours",
                    group_size=DEFAULT_GROUP_SIZE, jobs=1):
    """Re-sample shots and source group ``k`` times, train each fold from scratch.

    Fold ``i`` derives all of its randomness from ``derive_seed(seed, "fold", i)``
    and never from the loss mask, so variants run with the same seed see the
    same shots, source group, initialisation and batch order.
    """
    if k < 2:
        raise ConfigError(f"k must be >= 2, got {k}")
    model_config = model_config or ModelConfig(input_dim=int(np.prod(data.source[0].pixels.shape)))
    tasks = [(data, n, config, model_config, i, seed, method, group_size) for i in range(k)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_fold_worker, tasks))
    else:
        results = [_fold_worker(t) for t in tasks]
    for r in results:
        log.info("n=%d method=%s mask=%s fold %d: acc=%.4f f1=%.4f%s", n, method, config.loss_mask,
                 r.fold, r.accuracy, r.f1, f" ERROR {r.error}" if r.error else "")
    failures = {r.fold: r.error for r in results if r.error}
    if failures:
        raise ProtocolError(f"{len(failures)} of {k} folds failed: {failures}", failures, results)
    return FoldReport.from_folds(results)


ABLATION_MASKS = (("cp+cd", True, True), ("cp", True, False), ("cd", False, True))


def ablation_run(data, n, base_config, k=10, **kw):
    """Fold protocol per loss mask, all sharing fold seeds; keyed by mask name."""
    return {name: k_fold_protocol(data, n, replace(base_config, use_cp=cp, use_cd=cd), k, **kw)
            for name, cp, cd in ABLATION_MASKS}


def n_shot_sweep(data, base_config, ns=DEFAULT_SHOTS, k=10, **kw):
    """Fold protocol for each shot count; returns ``[(n, FoldReport), ...]``."""
    labels = np.array([s.label for s in data.target_train])
    need = max(ns)
    if min(np.sum(labels == 1), np.sum(labels == 0)) < need:
        raise ContractError(f"target train pool cannot supply {need} shots per label")
    return [(n, k_fold_protocol(data, n, base_config, k, **kw)) for n in ns]
