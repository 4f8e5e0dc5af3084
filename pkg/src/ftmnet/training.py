"""Two-stage optimization and the few-shot evaluation harness.

Stage 1 trains everything on the source domain. Stage 2 freezes the
backbone (including batch-norm affine parameters), re-initializes the
head for the target class set, and updates only the channel transforms
plus the head; batch-norm layers keep running in train mode during
adaptation so their statistics track the target batches. The finetune
baseline runs the same loop with every partition trainable.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autograd import Tape, Tensor, backward, softmax_cross_entropy, softmax_probs
from .data import TEST, TRAIN, VAL, LabeledDataset, channel_stats
from .errors import (
    ConfigError,
    ContractError,
    DataError,
    InsufficientDataError,
    NumericError,
)
from .network import PART_BACKBONE, PART_FTM, PART_HEAD, ModelState, forward_model, reinit_head

TRAINABLE_SETS = {
    "all": {PART_BACKBONE, PART_FTM, PART_HEAD},
    "ftm+head": {PART_FTM, PART_HEAD},
}


@dataclass(frozen=True)
class StageConfig:
    batch_size: int
    epochs: int
    base_lr: float
    lr_step: int
    lr_decay: float
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    trainable: str = "all"
    seed: int = 0

    def validate(self) -> None:
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.trainable not in TRAINABLE_SETS:
            raise ConfigError(f"trainable must be one of {sorted(TRAINABLE_SETS)}")
        # base_lr of exactly 0 is allowed: it makes the stage a no-op, which
        # is useful as a control run.
        if self.batch_size < 1 or self.epochs < 1 or self.base_lr < 0 or self.lr_step < 1:
            raise ConfigError("batch_size, epochs, lr_step must be >= 1 and base_lr >= 0")


def stage1_defaults(seed: int = 0) -> StageConfig:
    """Full-scale source-training recipe."""
    return StageConfig(batch_size=128, epochs=30, base_lr=1e-4, lr_step=10, lr_decay=0.1, seed=seed)


def stage2_ftm_defaults(seed: int = 0) -> StageConfig:
    """Adaptation recipe for the channel-transform method."""
    return StageConfig(
        batch_size=64, epochs=50, base_lr=0.003, lr_step=15, lr_decay=0.1, trainable="ftm+head", seed=seed
    )


def stage2_ft_defaults(seed: int = 0) -> StageConfig:
    """Adaptation recipe for the full-finetune baseline."""
    return StageConfig(
        batch_size=64, epochs=50, base_lr=0.001, lr_step=15, lr_decay=0.1, trainable="all", seed=seed
    )


def desk_stage1(seed: int = 0) -> StageConfig:
    """Reduced stage-1 recipe sized for the synthetic desk benchmark."""
    return StageConfig(batch_size=32, epochs=12, base_lr=1e-3, lr_step=8, lr_decay=0.1, seed=seed)


def desk_stage2_ftm(seed: int = 0) -> StageConfig:
    return replace(stage2_ftm_defaults(seed), batch_size=32, epochs=20)


def desk_stage2_ft(seed: int = 0) -> StageConfig:
    return replace(stage2_ft_defaults(seed), batch_size=32, epochs=20)


@dataclass
class Episode:
    """Balanced k-shot training set drawn from a target dataset's train split."""

    shots_per_class: int
    images: np.ndarray
    labels: np.ndarray
    class_names: list[str]

    def __len__(self) -> int:
        return self.images.shape[0]


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns replacement tensors.

    All gradients are validated before anything moves, so a NaN cannot
    leave the parameters half-updated.
    """
    if lr < 0:
        raise ContractError(f"lr must be non-negative, got {lr}")
    for name, g in grads.items():
        if name not in params:
            raise ContractError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {params[name].shape} for {name!r}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name!r}; no update applied")

    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    out: dict[str, Tensor] = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        step = lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        out[name] = Tensor((p.data - step).astype(p.dtype), requires_grad=p.requires_grad)
    return out


def lr_at(epoch: int, cfg: StageConfig) -> float:
    """Step-decay schedule: base_lr * decay^(epoch // step).

    Rounded to 12 significant digits so decimal schedules stay decimal:
    0.003 decayed by 0.1 yields exactly 3e-4, not 3.0000000000000003e-4.
    """
    if epoch < 0:
        raise ContractError("epoch must be >= 0")
    return float(f"{cfg.base_lr * cfg.lr_decay ** (epoch // cfg.lr_step):.12g}")


def sample_shots(dataset: LabeledDataset, k: int, seed: int) -> Episode:
    """Uniform without-replacement draw of k train-split items per class."""
    if k < 1:
        raise ContractError("k must be >= 1")
    rng = np.random.default_rng(seed)
    chosen: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    for label, name in enumerate(dataset.fine_classes):
        pool = dataset.class_indices(TRAIN, label)
        if pool.size < k:
            raise InsufficientDataError(
                f"class {name!r} has {pool.size} train items, episode needs {k}"
            )
        pick = rng.choice(pool, size=k, replace=False)
        chosen.append(np.sort(pick))
        labels.append(np.full(k, label, dtype=np.int64))
    idx = np.concatenate(chosen)
    return Episode(
        shots_per_class=k,
        images=dataset.images[idx].copy(),
        labels=np.concatenate(labels),
        class_names=list(dataset.fine_classes),
    )


# ---------------------------------------------------------------------------
# loops
# ---------------------------------------------------------------------------


def predict_logits(model: ModelState, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits over an image stack, batched."""
    outputs = []
    for i in range(0, images.shape[0], batch_size):
        logits = forward_model(model, Tensor(images[i : i + batch_size]), mode="eval")
        outputs.append(logits.data)
    return np.concatenate(outputs, axis=0)


def evaluate(model: ModelState, images: np.ndarray, labels: np.ndarray, batch_size: int = 64) -> float:
    """Top-1 accuracy in eval mode."""
    if images.shape[0] == 0:
        raise DataError("cannot evaluate on an empty set")
    preds = predict_logits(model, images, batch_size).argmax(axis=1)
    return float((preds == labels).mean())


def evaluate_coarse(model: ModelState, ds: LabeledDataset, split: int = TEST, batch_size: int = 64) -> float:
    """Coarse-level accuracy: fine probabilities summed per coarse class."""
    idx = ds.indices(split)
    if idx.size == 0:
        raise DataError("split is empty")
    probs = softmax_probs(predict_logits(model, ds.images[idx], batch_size))
    lut = ds.coarse_lut
    n_coarse = len(ds.coarse_classes)
    coarse_probs = np.zeros((probs.shape[0], n_coarse), dtype=probs.dtype)
    for fine, coarse in enumerate(lut):
        coarse_probs[:, coarse] += probs[:, fine]
    truth = lut[ds.labels[idx]]
    return float((coarse_probs.argmax(axis=1) == truth).mean())


def frozen_transfer_accuracy(
    model: ModelState, source_names: list[str], target_ds: LabeledDataset, split: int = TEST
) -> float:
    """Coarse accuracy of an unadapted source model on the target domain.

    The source head predicts source classes; a prediction scores when its
    class name equals the true coarse class name of the target item.
    """
    idx = target_ds.indices(split)
    preds = predict_logits(model, target_ds.images[idx]).argmax(axis=1)
    coarse_names = target_ds.coarse_classes
    pred_coarse = np.array(
        [coarse_names.index(source_names[p]) if source_names[p] in coarse_names else -1 for p in preds],
        dtype=np.int64,
    )
    truth = target_ds.coarse_lut[target_ds.labels[idx]]
    return float((pred_coarse == truth).mean())


def _trainable_params(model: ModelState, cfg: StageConfig) -> dict[str, Tensor]:
    allowed = TRAINABLE_SETS[cfg.trainable]
    return {name: t for name, t in model.params.items() if model.partition[name] in allowed}


def _fit(
    model: ModelState,
    images: np.ndarray,
    labels: np.ndarray,
    cfg: StageConfig,
    val: tuple[np.ndarray, np.ndarray] | None,
    select_best: bool,
) -> tuple[ModelState, list[dict]]:
    cfg.validate()
    model.set_trainable(TRAINABLE_SETS[cfg.trainable])
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    n = images.shape[0]
    history: list[dict] = []
    best_acc = -1.0
    best: ModelState | None = None

    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        perm = rng.permutation(n)
        losses = []
        for i in range(0, n, cfg.batch_size):
            sel = perm[i : i + cfg.batch_size]
            xb = Tensor(images[sel])
            with Tape() as tape:
                logits = forward_model(model, xb, mode="train")
                loss = softmax_cross_entropy(logits, labels[sel])
            grad_map = backward(tape, loss)
            trainables = _trainable_params(model, cfg)
            grads = {
                name: grad_map.get(t.tid, np.zeros_like(t.data)) for name, t in trainables.items()
            }
            model.params.update(
                adam_step(trainables, grads, state, lr, cfg.beta1, cfg.beta2, cfg.eps_adam)
            )
            losses.append(loss.item())
        row = {"epoch": epoch, "lr": lr, "train_loss": float(np.mean(losses)), "val_acc": None}
        if val is not None:
            row["val_acc"] = evaluate(model, val[0], val[1])
            if select_best and row["val_acc"] > best_acc:
                best_acc = row["val_acc"]
                best = model.copy()
        history.append(row)

    return (best if select_best and best is not None else model), history


def train_source(
    model: ModelState, source: LabeledDataset, cfg: StageConfig
) -> tuple[ModelState, list[dict]]:
    """Stage 1: full training on the source domain; returns the best-validation snapshot."""
    if source.images.shape[0] == 0:
        raise DataError("source dataset is empty")
    if model.config.num_classes != source.num_classes:
        raise ContractError(
            f"model head has {model.config.num_classes} classes, source has {source.num_classes}"
        )
    work = model.copy()
    mean, std = channel_stats(source, TRAIN)
    work.buffers["norm.mean"] = mean
    work.buffers["norm.std"] = std

    tr = source.indices(TRAIN)
    va = source.indices(VAL)
    val = (source.images[va], source.labels[va]) if va.size else None
    return _fit(work, source.images[tr], source.labels[tr], cfg, val, select_best=val is not None)


def _check_episode_head(model: ModelState, episode: Episode) -> None:
    if model.config.num_classes != len(episode.class_names):
        raise ContractError(
            f"model head has {model.config.num_classes} classes, episode has {len(episode.class_names)}"
        )


def adapt_ftm(
    model: ModelState, episode: Episode, cfg: StageConfig | None = None
) -> tuple[ModelState, list[dict]]:
    """Stage 2: frozen backbone, trainable channel transforms + head, freed BN statistics."""
    if cfg is None:
        cfg = stage2_ftm_defaults()
    if cfg.trainable != "ftm+head":
        raise ConfigError("adaptation config must set trainable='ftm+head'")
    if not model.config.ftm_sites:
        raise ConfigError("model has no channel-transform sites to adapt")
    _check_episode_head(model, episode)
    work = model.copy()
    return _fit(work, episode.images, episode.labels, cfg, val=None, select_best=False)


def finetune_baseline(
    model: ModelState, episode: Episode, cfg: StageConfig | None = None
) -> tuple[ModelState, list[dict]]:
    """Baseline: identical loop with every partition trainable."""
    if cfg is None:
        cfg = stage2_ft_defaults()
    if cfg.trainable != "all":
        raise ConfigError("finetune config must set trainable='all'")
    _check_episode_head(model, episode)
    work = model.copy()
    return _fit(work, episode.images, episode.labels, cfg, val=None, select_best=False)


# ---------------------------------------------------------------------------
# shot sweep
# ---------------------------------------------------------------------------


def trial_seed(base: int, shots: int, trial: int) -> int:
    """Stable per-(shots, trial) seed schedule for episodes and head init."""
    return int(base + 7919 * trial + 104729 * shots)


def run_shot_sweep(
    model: ModelState,
    target: LabeledDataset,
    shots: list[int],
    trials: int,
    ftm_cfg: StageConfig | None = None,
    ft_cfg: StageConfig | None = None,
    seed: int = 0,
) -> list[dict]:
    """Accuracy table over shot counts for both adaptation methods.

    Each trial draws a fresh episode and head seed, shared by the two
    methods so the comparison is paired. Rows report mean/std of fine
    test accuracy over the trials.
    """
    if trials < 1:
        raise ContractError("trials must be >= 1")
    if ftm_cfg is None:
        ftm_cfg = stage2_ftm_defaults()
    if ft_cfg is None:
        ft_cfg = stage2_ft_defaults()
    te = target.indices(TEST)
    test_images, test_labels = target.images[te], target.labels[te]
    has_grouping = len(target.coarse_classes) < target.num_classes

    rows: list[dict] = []
    for k in shots:
        accs: dict[str, list[float]] = {"FT": [], "FTM": []}
        coarse: dict[str, list[float]] = {"FT": [], "FTM": []}
        for trial in range(trials):
            s = trial_seed(seed, k, trial)
            episode = sample_shots(target, k, seed=s)
            base = reinit_head(model, target.num_classes, seed=s)
            for method, fit in (("FTM", adapt_ftm), ("FT", finetune_baseline)):
                cfg = ftm_cfg if method == "FTM" else ft_cfg
                fitted, _ = fit(base, episode, replace(cfg, seed=s))
                acc = evaluate(fitted, test_images, test_labels)
                accs[method].append(acc)
                coarse[method].append(evaluate_coarse(fitted, target) if has_grouping else acc)
        for method in ("FT", "FTM"):
            vals = np.asarray(accs[method], dtype=np.float64)
            cvals = np.asarray(coarse[method], dtype=np.float64)
            rows.append(
                {
                    "shots": k,
                    "method": method,
                    "mean_acc": float(vals.mean()),
                    "std_acc": float(vals.std()),
                    "mean_coarse_acc": float(cvals.mean()),
                    "std_coarse_acc": float(cvals.std()),
                    "accs": [float(v) for v in vals],
                    "coarse_accs": [float(v) for v in cvals],
                }
            )
    return rows


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------


def history_to_csv(history: list[dict], path) -> None:
    lines = ["epoch,lr,train_loss,val_acc"]
    for row in history:
        val = "" if row["val_acc"] is None else f"{row['val_acc']:.6f}"
        lines.append(f"{row['epoch']},{row['lr']:.8g},{row['train_loss']:.6f},{val}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def sweep_to_csv(rows: list[dict], path) -> None:
    # fixed 4-column table; coarse-level numbers stay in the row dicts
    lines = ["shots,method,mean_acc,std_acc"]
    for row in rows:
        lines.append(f"{row['shots']},{row['method']},{row['mean_acc']:.6f},{row['std_acc']:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
