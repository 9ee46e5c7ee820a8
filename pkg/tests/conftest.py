import numpy as np
import pytest

from voxseg import net
from voxseg import register as reg
from voxseg.net import model
from voxseg.volio import Volume, VolumeKind


def make_shell_phantom(n=32, seed=0, noise=0.02):
    """Nested-shell phantom: background + 3 tissue classes with distinct
    intensity bands."""
    idx = np.indices((n, n, n))
    center = (n - 1) / 2
    r = np.sqrt(((idx - center) ** 2).sum(0))
    labels = np.zeros((n, n, n), dtype=np.int64)
    labels[r < n * 13 / 32] = 1
    labels[r < n * 9 / 32] = 2
    labels[r < n * 5 / 32] = 3
    rng = np.random.default_rng(seed)
    intens = np.choose(labels, [0.05, 0.3, 0.6, 0.9]) + rng.normal(0, noise, labels.shape)
    vol = Volume(intens.astype(np.float32), (1.0, 1.0, 1.0), np.eye(4))
    truth = Volume(labels.astype(np.float32), (1.0, 1.0, 1.0), np.eye(4), VolumeKind.LABEL)
    return vol, truth


def make_ellipsoid_phantom(n=64, seed=1, noise=0.01):
    """Three nested ellipsoids with additive noise; used for registration."""
    idx = np.indices((n, n, n), dtype=float)
    c = (n - 1) / 2

    def ellip(rx, ry, rz):
        return ((idx[0] - c) / rx) ** 2 + ((idx[1] - c) / ry) ** 2 + ((idx[2] - c) / rz) ** 2

    s = n / 64
    data = np.zeros((n, n, n))
    data += 0.3 * (ellip(26 * s, 20 * s, 24 * s) < 1)
    data += 0.3 * (ellip(18 * s, 14 * s, 17 * s) < 1)
    data += 0.4 * (ellip(9 * s, 8 * s, 10 * s) < 1)
    rng = np.random.default_rng(seed)
    data += rng.normal(0, noise, data.shape)
    return Volume(data.astype(np.float32), (1.0, 1.0, 1.0), np.eye(4))


def make_ellipsoid_labels(n=64):
    idx = np.indices((n, n, n), dtype=float)
    c = (n - 1) / 2

    def ellip(rx, ry, rz):
        return ((idx[0] - c) / rx) ** 2 + ((idx[1] - c) / ry) ** 2 + ((idx[2] - c) / rz) ** 2

    s = n / 64
    labels = np.zeros((n, n, n), dtype=np.int64)
    labels[ellip(26 * s, 20 * s, 24 * s) < 1] = 1
    labels[ellip(18 * s, 14 * s, 17 * s) < 1] = 2
    labels[ellip(9 * s, 8 * s, 10 * s) < 1] = 3
    return Volume(labels.astype(np.float32), (1.0, 1.0, 1.0), np.eye(4), VolumeKind.LABEL)


OVERFIT_CFG = dict(
    n_scales=2, base_filters=4, n_classes=4, dtype="float32", bn_momentum=0.9
)
OVERFIT_STEPS = 300
OVERFIT_LR = 1e-2


def run_overfit(steps=OVERFIT_STEPS):
    """Train the tiny network to memorise one shell phantom."""
    vol, truth = make_shell_phantom(32, seed=0)
    cfg = net.NetConfig(**OVERFIT_CFG)
    params = net.init_params(cfg, seed=0)
    state = net.AdamState.zeros(params)
    hyper = net.Hyper(lr=OVERFIT_LR)
    x = vol.data[None, ..., None]
    y = truth.data.astype(np.int64)[None]
    trace = []
    for _ in range(steps):
        _, probs, cache = model.forward(params, cfg, x, train=True)
        value, _ = model.loss(probs, y)
        grads = model.backward(cache, y)
        net.optimizer_step(params, grads, state, hyper)
        trace.append(value)
    return params, cfg, vol, truth, trace


def overfit_dice(run):
    """Per-class Dice of an overfit run's prediction on its training phantom."""
    from voxseg import evaluate

    params, cfg, vol, truth, _ = run
    pred, _ = net.predict_volume(params, cfg, vol)
    return {c: evaluate.dice(pred, truth, c) for c in range(cfg.n_classes)}


@pytest.fixture(scope="session")
def overfit_runs():
    """Two identical overfit trainings (also feeds the determinism check)."""
    return run_overfit(), run_overfit()


GRADCHECK_CFG = dict(n_scales=2, base_filters=2, dtype="float64")
GRADCHECK_H = 1e-3
GRADCHECK_TOL = 1e-4


def gradient_check(entries_per_tensor=4, seed=0):
    """Compare analytic gradients with central finite differences.

    Batch-norm betas are set to alternating +/-3 so both leaky-ReLU branches
    stay exercised while no pre-activation sits near the kink (finite
    differences are unreliable exactly at the kink for any implementation).
    Returns {parameter name: worst relative error}.
    """
    cfg = net.NetConfig(**GRADCHECK_CFG)
    params = net.init_params(cfg, seed=seed)
    for name in params:
        if name.endswith(".beta"):
            flat = np.where(np.arange(params[name].size) % 2 == 0, 3.0, -3.0)
            params[name] = flat.reshape(params[name].shape)
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (1, 8, 8, 8, 1))
    y = rng.integers(0, cfg.n_classes, (1, 8, 8, 8))

    def f():
        _, probs, _ = model.forward(params, cfg, x, train=True)
        return model.loss(probs, y)[0]

    _, probs, cache = model.forward(params, cfg, x, train=True)
    grads = model.backward(cache, y)

    h = GRADCHECK_H
    worst = {}
    for name in net.trainable_names(cfg):
        tensor = params[name]
        picks = rng.choice(tensor.size, size=min(tensor.size, entries_per_tensor),
                           replace=False)
        err = 0.0
        for flat in picks:
            idx = np.unravel_index(flat, tensor.shape)
            orig = tensor[idx]
            tensor[idx] = orig + h
            f_plus = f()
            tensor[idx] = orig - h
            f_minus = f()
            tensor[idx] = orig
            fd = (f_plus - f_minus) / (2 * h)
            an = grads[name][idx]
            err = max(err, abs(an - fd) / max(abs(an), abs(fd), 1e-7))
        worst[name] = err
    return worst


@pytest.fixture(scope="session")
def gradcheck_result():
    """Whole-graph finite-difference check, run once per session."""
    import time

    start = time.time()
    worst = gradient_check()
    return worst, time.time() - start


REGISTRATION_ANGLE_DEG = 5.0
REGISTRATION_SHIFT_VOX = 5.0


def registration_problem(n=64):
    fixed = make_ellipsoid_phantom(n)
    c = (n - 1) / 2
    t0 = reg.RigidTransform(
        (np.deg2rad(REGISTRATION_ANGLE_DEG), 0.0, 0.0),
        (REGISTRATION_SHIFT_VOX, 0.0, 0.0),
        center=(c, c, c),
    )
    moving = reg.resample(fixed, t0, reg.GridSpec.of(fixed))
    return fixed, moving, t0


@pytest.fixture(scope="session")
def registration_runs():
    """Recover the known perturbation twice with the same seed."""
    fixed, moving, t0 = registration_problem()
    cfg = reg.RegistrationConfig(seed=3)
    first = reg.register_rigid(moving, fixed, cfg)
    second = reg.register_rigid(moving, fixed, cfg)
    return fixed, moving, t0, first, second
