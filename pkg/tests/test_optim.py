"""Optimizer and training-loop contracts: the frozen two-step momentum
recursion, fold partitioning, trainer determinism, and ensembling."""

import numpy as np
import pytest

from cropseg import datapipe as dp
from cropseg import network, optim
from cropseg.errors import ConfigError
from cropseg.network import ArchitectureConfig

RNG = np.random.default_rng

TINY = ArchitectureConfig(levels=2, channel_schedule=(4, 8), input_bands=3,
                          time_steps=6, num_classes=3, tile_size=8)


def entry(arr):
    return [("lay", "w", arr)]


# ------------------------------------------------------------------ sgd_step

def test_sgd_zero_momentum_is_vanilla():
    w = np.array([1.0, 2.0])
    g = np.array([0.5, -0.5])
    state = optim.OptimizerState(learning_rate=0.1, momentum=0.0)
    optim.sgd_step(entry(w), entry(g), state)
    np.testing.assert_allclose(w, [0.95, 2.05], atol=1e-15)


def test_sgd_two_step_hand_recursion():
    # lr=0.1, mu=0.9, g=1 twice from w=0: v=1, w=-0.1 then v=1.9, w=-0.29
    w = np.zeros(1)
    g = np.ones(1)
    state = optim.OptimizerState(learning_rate=0.1, momentum=0.9)
    optim.sgd_step(entry(w), entry(g), state)
    assert state.velocity[("lay", "w")][0] == pytest.approx(1.0, abs=0)
    assert w[0] == pytest.approx(-0.1, abs=1e-15)
    optim.sgd_step(entry(w), entry(g), state)
    assert state.velocity[("lay", "w")][0] == pytest.approx(1.9, abs=1e-15)
    assert w[0] == pytest.approx(-0.29, abs=1e-15)


def test_sgd_zero_gradient_velocity_decays_geometrically():
    w = np.array([1.0])
    state = optim.OptimizerState(learning_rate=0.1, momentum=0.5)
    optim.sgd_step(entry(w), entry(np.array([1.0])), state)
    positions = [w[0]]
    for _ in range(60):
        optim.sgd_step(entry(w), entry(np.zeros(1)), state)
        positions.append(w[0])
    # velocity halves every step, so the tail converges geometrically
    assert abs(positions[-1] - positions[-2]) < 1e-15
    assert state.velocity[("lay", "w")][0] == pytest.approx(0.0, abs=1e-15)


def test_sgd_rejects_mismatched_sets():
    w = np.zeros(2)
    g = np.zeros(3)
    state = optim.OptimizerState()
    with pytest.raises(Exception, match="mismatch"):
        optim.sgd_step(entry(w), entry(g), state)


# --------------------------------------------------------------------- folds

def test_split_folds_even_partition():
    plan = optim.split_folds(list(range(10)), 5, seed=0)
    sizes = [len(plan.members(f)) for f in range(5)]
    assert sizes == [2, 2, 2, 2, 2]
    union = sorted(tid for f in range(5) for tid in plan.members(f))
    assert union == list(range(10))


def test_split_folds_deterministic_and_seed_sensitive():
    a = optim.split_folds(list(range(12)), 4, seed=3)
    b = optim.split_folds(list(range(12)), 4, seed=3)
    c = optim.split_folds(list(range(12)), 4, seed=4)
    assert a.assignment == b.assignment
    assert a.assignment != c.assignment


def test_split_folds_sizes_differ_by_at_most_one():
    plan = optim.split_folds(list(range(13)), 5, seed=1)
    sizes = sorted(len(plan.members(f)) for f in range(5))
    assert sizes == [2, 2, 3, 3, 3]


def test_split_folds_too_few_tiles():
    with pytest.raises(ConfigError, match="cannot split"):
        optim.split_folds([(2015, 0, 0)], 5, seed=0)


# ------------------------------------------------------------------ training

def tiny_tiles(n=6, seed=0):
    """Trivially learnable tiles: class equals a spatial half, distinct means."""
    rng = RNG(seed)
    tiles = []
    for i in range(n):
        labels = np.zeros((8, 8), dtype=np.uint8)
        labels[:, 4:] = (i % 2) + 1
        cube = np.zeros((3, 6, 8, 8), dtype=np.float32)
        for c in range(3):
            cube[:, :, labels == c] = c * 1.0
        cube += rng.normal(0, 0.05, cube.shape).astype(np.float32)
        valid = np.ones((8, 8), dtype=bool)
        tiles.append(dp.TileExample(cube=cube, labels=labels, valid=valid,
                                    year=2015, row0=0, col0=8 * i))
    return tiles


def test_train_fold_deterministic_given_seed():
    tiles = tiny_tiles()
    plan = optim.split_folds([t.tile_id for t in tiles], 3, seed=1)
    runs = []
    for _ in range(2):
        model, history = optim.train_fold(
            tiles, plan, 0, TINY, loss_kind="ce", epochs=3, batch_size=2, seed=7)
        checksum = np.concatenate([arr.ravel() for _, _, arr in model.param_set()])
        runs.append((checksum.copy(), [(h.train_loss, h.val_kappa) for h in history]))
    np.testing.assert_array_equal(runs[0][0], runs[1][0])
    assert runs[0][1] == runs[1][1]


def test_train_fold_learns_trivial_task():
    tiles = tiny_tiles()
    plan = optim.split_folds([t.tile_id for t in tiles], 3, seed=2)
    model, history = optim.train_fold(
        tiles, plan, 0, TINY, loss_kind="iou", epochs=10, batch_size=2, seed=3)
    losses = [h.train_loss for h in history]
    assert all(np.isfinite(losses))
    assert losses[-1] < losses[0]


def test_train_fold_bad_fold_id():
    tiles = tiny_tiles()
    plan = optim.split_folds([t.tile_id for t in tiles], 3, seed=1)
    with pytest.raises(ConfigError, match="fold_id"):
        optim.train_fold(tiles, plan, 9, TINY, epochs=1)


def test_history_csv_format(tmp_path):
    rows = [optim.EpochRecord(epoch=0, fold=1, train_loss=0.5, val_kappa=0.25)]
    path = tmp_path / "history.csv"
    optim.write_history_csv(path, rows)
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "epoch,fold,train_loss,val_kappa"
    assert lines[1].startswith("0,1,5.0")


# ------------------------------------------------------------------ ensemble

def test_ensemble_of_identical_models_matches_single():
    model = network.build(TINY, seed=4)
    cube = RNG(5).normal(size=(2, 3, 6, 8, 8)).astype(np.float32)
    single = model.forward(cube)
    avg = optim.ensemble_predict([model] * 5, cube)
    np.testing.assert_allclose(avg, single, atol=1e-7)
    np.testing.assert_allclose(avg.sum(axis=1), 1.0, atol=1e-6)


def test_ensemble_two_model_mean():
    class Fake:
        def __init__(self, value, config):
            self.config = config
            self._v = value

        def forward(self, cube):
            out = np.zeros((cube.shape[0], 2) + cube.shape[3:], dtype=np.float32)
            out[:, 0] = self._v
            out[:, 1] = 1.0 - self._v
            return out

    cfg = ArchitectureConfig(levels=2, channel_schedule=(4, 8), input_bands=3,
                             time_steps=6, num_classes=2, tile_size=8)
    cube = np.zeros((1, 3, 6, 8, 8), dtype=np.float32)
    avg = optim.ensemble_predict([Fake(1.0, cfg), Fake(0.0, cfg)], cube)
    np.testing.assert_allclose(avg[:, 0], 0.5)
    np.testing.assert_allclose(avg[:, 1], 0.5)


def test_ensemble_rejects_config_mismatch():
    a = network.build(TINY, seed=0)
    other = ArchitectureConfig(levels=2, channel_schedule=(4, 8), input_bands=3,
                               time_steps=6, num_classes=2, tile_size=8)
    b = network.build(other, seed=0)
    with pytest.raises(ConfigError, match="architecture"):
        optim.ensemble_predict([a, b], np.zeros((1, 3, 6, 8, 8), dtype=np.float32))
