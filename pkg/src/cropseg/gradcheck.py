"""Central finite-difference verification of every analytic gradient.

Each check builds a small randomized instance in float64, projects the
operation's output to a scalar with a fixed random tensor, and compares the
analytic gradient of that scalar against central differences
(f(x+eps) - f(x-eps)) / (2*eps) at eps = 1e-5. The comparison is a global
relative error: ||a - d||_inf / max(||a||_inf, ||d||_inf, 1e-12).

Inputs that feed max/relu kinks are drawn from a lattice of well-separated
values so a 1e-5 perturbation can never flip a maximum or cross zero;
everything else is plain Gaussian. The whole suite backs the ``gradcheck``
CLI command and the acceptance test.
"""

import time
from dataclasses import dataclass

import numpy as np

from . import layers as L
from . import losses, network, ops
from .losses import GroundMask
from .network import ArchitectureConfig

EPS = 1e-5
LAYER_TOL = 1e-4
END_TO_END_TOL = 1e-3

MICRO_CONFIG = ArchitectureConfig(levels=2, channel_schedule=(2, 3), input_bands=2,
                                  time_steps=4, num_classes=3, tile_size=8)


def central_difference(f, x, eps=EPS):
    """Dense central-difference gradient of scalar f at float64 x."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def rel_error(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-12)
    return float(np.abs(a - b).max(initial=0.0) / denom)


def lattice(rng, shape, scale=1.0):
    """Distinct values separated by >= 2*scale/size, none within scale/size
    of zero: safe on both sides of max and relu kinks for eps = 1e-5."""
    n = int(np.prod(shape))
    vals = ((rng.permutation(n) + 0.5) / n * 2.0 - 1.0) * scale
    return vals.reshape(shape)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_err <= self.tolerance


def _projected(forward, proj):
    def scalar(x):
        return float((forward(x) * proj).sum())

    return scalar


def _check_layer_case(layer, x, proj, check_params=True, perturb=0.0):
    """Max relative error over input gradient and every parameter gradient."""
    out = layer.forward(x)
    layer.zero_grads()
    gin = layer.backward(proj)
    worst = rel_error(gin + perturb * (1.0 + np.abs(gin).max()),
                      central_difference(_projected(layer.forward, proj), x))
    if check_params:
        for name in layer.params:
            p = layer.params[name]

            def scalar(v, _name=name, _p=p):
                _p[...] = v
                return float((layer.forward(x) * proj).sum())

            fd = central_difference(scalar, p.copy())
            worst = max(worst, rel_error(layer.grads[name], fd))
    return worst


def _seeded(seed):
    return np.random.default_rng(seed)


# -- per-layer checks ---------------------------------------------------------

def check_conv3d(seeds, perturb=0.0):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(1000 + seed)
        lay = L.Conv3d(2, 3, ksize=(2, 3, 3), padding=(1, 1, 0), rng=rng,
                       dtype=np.float64, layer_id="gc")
        x = rng.normal(size=(2, 2, 3, 4, 5))
        proj = rng.normal(size=lay.forward(x).shape)
        worst = max(worst, _check_layer_case(lay, x, proj, perturb=perturb))
    return CheckResult("conv3d", worst, LAYER_TOL)


def check_conv2d(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(2000 + seed)
        lay = L.Conv2d(3, 2, rng=rng, dtype=np.float64, layer_id="gc")
        x = rng.normal(size=(2, 3, 5, 4))
        proj = rng.normal(size=lay.forward(x).shape)
        worst = max(worst, _check_layer_case(lay, x, proj))
    return CheckResult("conv2d", worst, LAYER_TOL)


def check_relu(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(3000 + seed)
        lay = L.ReLU(layer_id="gc")
        x = lattice(rng, (2, 3, 2, 4, 4))
        proj = rng.normal(size=x.shape)
        worst = max(worst, _check_layer_case(lay, x, proj, check_params=False))
    return CheckResult("relu", worst, LAYER_TOL)


def check_maxpool3d(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(4000 + seed)
        lay = L.MaxPool3d(layer_id="gc")
        x = lattice(rng, (1, 2, 4, 6, 6))
        proj = rng.normal(size=lay.forward(x).shape)
        worst = max(worst, _check_layer_case(lay, x, proj, check_params=False))
    return CheckResult("maxpool3d", worst, LAYER_TOL)


def check_upsample2d(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(5000 + seed)
        lay = L.Upsample2d(2, layer_id="gc")
        x = rng.normal(size=(1, 3, 4, 4))
        proj = rng.normal(size=(1, 3, 8, 8))
        worst = max(worst, _check_layer_case(lay, x, proj, check_params=False))
    return CheckResult("upsample2d", worst, LAYER_TOL)


def check_concat(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(6000 + seed)
        lay = L.ConcatSkip(layer_id="gc")
        a = rng.normal(size=(1, 2, 4, 4))
        b = rng.normal(size=(1, 3, 4, 4))
        proj = rng.normal(size=(1, 5, 4, 4))
        lay.forward(a, b)
        ga, gb = lay.backward(proj)
        fa = central_difference(_projected(lambda v: lay.forward(v, b), proj), a)
        fb = central_difference(_projected(lambda v: lay.forward(a, v), proj), b)
        worst = max(worst, rel_error(ga, fa), rel_error(gb, fb))
    return CheckResult("concat_skip", worst, LAYER_TOL)


def check_temporal_collapse(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(7000 + seed)
        for mode in ("max", "mean"):
            lay = L.TemporalCollapse(mode, layer_id="gc")
            x = lattice(rng, (1, 2, 5, 3, 3))
            proj = rng.normal(size=(1, 2, 3, 3))
            worst = max(worst, _check_layer_case(lay, x, proj, check_params=False))
    return CheckResult("temporal_collapse", worst, LAYER_TOL)


def check_softmax_head(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(8000 + seed)
        lay = L.SoftmaxHead(layer_id="gc")
        x = rng.normal(size=(1, 3, 4, 4))
        proj = rng.normal(size=x.shape)
        worst = max(worst, _check_layer_case(lay, x, proj, check_params=False))
    return CheckResult("softmax_head", worst, LAYER_TOL)


# -- loss checks --------------------------------------------------------------

def _random_truth(rng, n, c, s, invalid_frac=0.25):
    labels = rng.integers(0, c, size=(n, s, s))
    valid = rng.random((n, s, s)) >= invalid_frac
    if not valid.any():
        valid[0, 0, 0] = True
    return GroundMask.from_labels(labels, valid, c)


def check_iou_loss(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(9000 + seed)
        truth = _random_truth(rng, 2, 3, 4)
        pred = ops.softmax_channels(rng.normal(size=(2, 3, 4, 4)))
        res = losses.iou_loss(pred, truth)
        fd = central_difference(lambda p: losses.iou_loss(p, truth).value, pred)
        worst = max(worst, rel_error(res.grad, fd))
    return CheckResult("iou_loss", worst, LAYER_TOL)


def check_cross_entropy(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(10000 + seed)
        truth = _random_truth(rng, 2, 3, 4)
        pred = ops.softmax_channels(rng.normal(size=(2, 3, 4, 4)))
        res = losses.cross_entropy_loss(pred, truth)
        fd = central_difference(lambda p: losses.cross_entropy_loss(p, truth).value, pred)
        worst = max(worst, rel_error(res.grad, fd))
    return CheckResult("cross_entropy_loss", worst, LAYER_TOL)


def check_loss_through_softmax(seeds):
    worst = 0.0
    for seed in seeds:
        rng = _seeded(11000 + seed)
        truth = _random_truth(rng, 1, 3, 4)
        logits = rng.normal(size=(1, 3, 4, 4))
        for kind in ("iou", "ce"):
            res = losses.loss_through_softmax(logits, truth, kind)
            fd = central_difference(
                lambda z, k=kind: losses.loss_through_softmax(z, truth, k).value, logits)
            worst = max(worst, rel_error(res.grad, fd))
    return CheckResult("loss_through_softmax", worst, LAYER_TOL)


# -- end-to-end ---------------------------------------------------------------

def check_end_to_end(seeds, config=MICRO_CONFIG, kinds=("iou", "ce")):
    """Full-network parameter gradients against finite differences.

    Checked at a generic point: every parameter (biases included) is nudged
    off its init by well-separated lattice values, since a zero bias parks
    relu pre-activations of dead decoder windows exactly on the kink, where
    a central difference straddles the nondifferentiability.
    """
    worst = 0.0
    for seed in seeds:
        rng = _seeded(12000 + seed)
        model = network.build(config, seed=seed, dtype=np.float64)
        for _, _, p in model.param_set():
            p += lattice(rng, p.shape, 0.05)
        cube = rng.normal(size=(1, config.input_bands, config.time_steps,
                                config.tile_size, config.tile_size))
        truth = _random_truth(rng, 1, config.num_classes, config.tile_size)
        for kind in kinds:
            def run():
                probs = model.forward(cube)
                return losses.compute_loss(probs, truth, kind)

            res = run()
            model.zero_grads()
            model.backward(res.grad)
            analytic = {(lid, name): g.copy() for lid, name, g in model.grad_set()}
            for lid, name, p in model.param_set():
                def scalar(v, _p=p):
                    _p[...] = v
                    return run().value

                fd = central_difference(scalar, p.copy())
                worst = max(worst, rel_error(analytic[(lid, name)], fd))
    return CheckResult(f"end_to_end({config.levels} levels)", worst, END_TO_END_TOL)


def run_all(num_seeds=20, e2e_seeds=None, perturb=0.0, log=None):
    """The full verification suite; returns a list of CheckResult.

    ``perturb`` deliberately corrupts the conv3d analytic gradient so the
    harness's failure path can itself be tested.
    """
    seeds = range(num_seeds)
    if e2e_seeds is None:
        e2e_seeds = num_seeds
    t0 = time.monotonic()
    results = [
        check_conv3d(seeds, perturb=perturb),
        check_conv2d(seeds),
        check_relu(seeds),
        check_maxpool3d(seeds),
        check_upsample2d(seeds),
        check_concat(seeds),
        check_temporal_collapse(seeds),
        check_softmax_head(seeds),
        check_iou_loss(seeds),
        check_cross_entropy(seeds),
        check_loss_through_softmax(seeds),
        check_end_to_end(range(e2e_seeds)),
    ]
    if log:
        for r in results:
            log(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} "
                f"max rel err {r.max_rel_err:.3e}  (tol {r.tolerance:.0e})")
        log(f"{len(results)} checks in {time.monotonic() - t0:.1f}s")
    return results
