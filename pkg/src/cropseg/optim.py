"""SGD with classical momentum, fold management, the training loop, and
softmax-averaged ensemble inference.

The update rule is v <- mu*v + g, w <- w - lr*v. Batch averaging is built
into the losses (both normalize over the batch), so the learning rate is
batch-size independent. Batch order reshuffles every epoch from a seed
derived as (seed + epoch); the per-fold base seed makes folds independent,
and the whole trajectory is reproducible bit-for-bit for a fixed seed and
backend.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import metrics, network
from .errors import ConfigError, DimensionError
from .losses import GroundMask, compute_loss

DEFAULT_LEARNING_RATE = 0.005
DEFAULT_MOMENTUM = 0.9
DEFAULT_BATCH_SIZE = 2
DEFAULT_EPOCHS = 50
DEFAULT_FOLDS = 5


@dataclass
class OptimizerState:
    learning_rate: float = DEFAULT_LEARNING_RATE
    momentum: float = DEFAULT_MOMENTUM
    velocity: dict = field(default_factory=dict)


def sgd_step(param_set, grad_set, state):
    """One momentum update over congruent (layer, name, array) triples."""
    if len(param_set) != len(grad_set):
        raise DimensionError(
            f"parameter set has {len(param_set)} entries, gradients {len(grad_set)}"
        )
    for (lid, name, w), (glid, gname, g) in zip(param_set, grad_set):
        if (lid, name) != (glid, gname) or w.shape != g.shape:
            raise DimensionError(
                f"parameter/gradient mismatch at {lid}/{name} vs {glid}/{gname}"
            )
        v = state.velocity.get((lid, name))
        if v is None:
            v = np.zeros_like(w)
            state.velocity[(lid, name)] = v
        v *= state.momentum
        v += g
        w -= state.learning_rate * v


@dataclass
class FoldPlan:
    num_folds: int
    assignment: dict  # tile_id -> fold index
    seed: int

    def members(self, fold_id):
        return [tid for tid, f in self.assignment.items() if f == fold_id]


def split_folds(tile_ids, num_folds, seed):
    """Seeded shuffle then round-robin assignment into equal-size folds."""
    tile_ids = list(tile_ids)
    if len(set(tile_ids)) != len(tile_ids):
        raise ConfigError("tile ids must be unique")
    if num_folds < 1:
        raise ConfigError(f"num_folds must be >= 1, got {num_folds}")
    if num_folds > len(tile_ids):
        raise ConfigError(
            f"cannot split {len(tile_ids)} tiles into {num_folds} folds"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(tile_ids))
    assignment = {tile_ids[int(j)]: int(i % num_folds) for i, j in enumerate(order)}
    return FoldPlan(num_folds=num_folds, assignment=assignment, seed=seed)


def _batch_arrays(tiles, num_classes):
    cube = np.stack([t.cube for t in tiles])
    labels = np.stack([t.labels for t in tiles])
    valid = np.stack([t.valid for t in tiles])
    truth = GroundMask.from_labels(labels, valid, num_classes)
    return cube, truth, labels, valid


@dataclass
class EpochRecord:
    epoch: int
    fold: int
    train_loss: float
    val_kappa: float


def validation_kappa(model, tiles, batch_size=DEFAULT_BATCH_SIZE):
    """Kappa of argmax predictions over the valid pixels of the given tiles."""
    cm = metrics.new_confusion(model.config.num_classes)
    for i in range(0, len(tiles), batch_size):
        chunk = tiles[i : i + batch_size]
        cube = np.stack([t.cube for t in chunk])
        probs = model.forward(cube)
        pred = probs.argmax(axis=1)
        for j, tile in enumerate(chunk):
            metrics.accumulate(cm, pred[j], tile.labels, tile.valid)
    return metrics.kappa(cm), cm


def train_fold(tiles, plan, fold_id, config, *, loss_kind="iou",
               epochs=DEFAULT_EPOCHS, batch_size=DEFAULT_BATCH_SIZE,
               learning_rate=DEFAULT_LEARNING_RATE, momentum=DEFAULT_MOMENTUM,
               seed=0, log=None):
    """Train on out-of-fold tiles, validate on the fold, keep the best epoch.

    Returns (model, history). The model carries the weights of the epoch
    with the highest validation kappa (earliest on ties); history is a list
    of :class:`EpochRecord`.
    """
    if fold_id < 0 or fold_id >= plan.num_folds:
        raise ConfigError(f"fold_id {fold_id} out of range for {plan.num_folds} folds")
    by_id = {t.tile_id: t for t in tiles}
    if set(by_id) != set(plan.assignment):
        raise ConfigError("fold plan does not cover exactly the given tiles")
    val_tiles = [by_id[tid] for tid in sorted(plan.members(fold_id))]
    train_tiles = [by_id[tid] for tid in sorted(tid for tid, f in plan.assignment.items()
                                                if f != fold_id)]
    if not train_tiles or not val_tiles:
        raise ConfigError(
            f"fold {fold_id} leaves an empty train or validation split"
        )
    model = network.build(config, seed=seed)
    state = OptimizerState(learning_rate=learning_rate, momentum=momentum)
    history = []
    best_kappa = -np.inf
    best_params = None
    for epoch in range(epochs):
        rng = np.random.default_rng(seed + epoch)
        order = rng.permutation(len(train_tiles))
        losses_this_epoch = []
        for i in range(0, len(order), batch_size):
            chunk = [train_tiles[int(j)] for j in order[i : i + batch_size]]
            cube, truth, _, _ = _batch_arrays(chunk, config.num_classes)
            probs = model.forward(cube)
            loss = compute_loss(probs, truth, loss_kind)
            model.zero_grads()
            model.backward(loss.grad)
            sgd_step(model.param_set(), model.grad_set(), state)
            losses_this_epoch.append(loss.value)
        train_loss = float(np.mean(losses_this_epoch))
        val_kappa, _ = validation_kappa(model, val_tiles, batch_size)
        history.append(EpochRecord(epoch=epoch, fold=fold_id,
                                   train_loss=train_loss, val_kappa=val_kappa))
        if val_kappa > best_kappa:
            best_kappa = val_kappa
            best_params = [arr.copy() for _, _, arr in model.param_set()]
        if log:
            log(f"fold {fold_id} epoch {epoch}: loss={train_loss:.6f} "
                f"val_kappa={val_kappa:.4f}")
    for (_, _, arr), best in zip(model.param_set(), best_params):
        arr[...] = best
    return model, history


def write_history_csv(path, records):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "fold", "train_loss", "val_kappa"])
        for r in records:
            w.writerow([r.epoch, r.fold, f"{r.train_loss:.9e}", f"{r.val_kappa:.9f}"])


def ensemble_predict(models, cube):
    """Arithmetic mean of the models' probability maps (float64 accumulate)."""
    if not models:
        raise ConfigError("ensemble needs at least one model")
    cfg = models[0].config
    for m in models[1:]:
        if m.config != cfg:
            raise ConfigError(
                f"ensemble members disagree on architecture: {m.config} vs {cfg}"
            )
    acc = np.zeros((cube.shape[0], cfg.num_classes) + cube.shape[3:], dtype=np.float64)
    for m in models:
        acc += m.forward(cube)
    acc /= len(models)
    return acc.astype(np.float32)
