"""Adam optimizer, the training loop, and whole-volume prediction."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ShapeMismatch
from ..volio import Volume, VolumeKind
from . import model
from .checkpoint import save_checkpoint
from .model import NetConfig


@dataclass
class Hyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


def optimizer_step(params: dict, grads: dict, state: AdamState, hyper: Hyper) -> None:
    """One bias-corrected Adam update, in place."""
    state.t += 1
    t = state.t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name!r} has shape {g.shape}, param {p.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= hyper.beta1
        m += (1 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1 - hyper.beta2) * (g * g)
        mhat = m / (1 - hyper.beta1 ** t)
        vhat = v / (1 - hyper.beta2 ** t)
        p -= (hyper.lr * mhat / (np.sqrt(vhat) + hyper.eps)).astype(p.dtype)


def train(
    params: dict,
    cfg: NetConfig,
    data,
    steps: int,
    hyper: Hyper | None = None,
    state: AdamState | None = None,
    checkpoint_every: int = 500,
    checkpoint_dir=None,
) -> list[float]:
    """Run ``steps`` optimizer steps over patches drawn from ``data``.

    ``data`` is an iterable (or callable stream) yielding
    (intensity patch, label patch) pairs. Returns the per-step loss trace.
    """
    hyper = hyper or Hyper()
    state = state or AdamState.zeros(params)
    it = iter(data() if callable(data) else data)
    trace: list[float] = []
    out_dir = Path(checkpoint_dir) if checkpoint_dir else None
    for step in range(steps):
        x, y = next(it)
        x = np.asarray(x)[None, ..., None]
        y = np.asarray(y)[None, ...]
        _, probs, cache = model.forward(params, cfg, x, train=True)
        value, _ = model.loss(probs, y)
        grads = model.backward(cache, y)
        optimizer_step(params, grads, state, hyper)
        trace.append(value)
        if out_dir and (step + 1) % checkpoint_every == 0:
            save_checkpoint(params, out_dir / f"ckpt_step{step + 1:06d}.nnl")
    if out_dir:
        save_checkpoint(params, out_dir / "ckpt_final.nnl")
    return trace


def predict_volume(params: dict, cfg: NetConfig, v: Volume):
    """Segment a whole volume.

    The volume is zero-padded symmetrically up to the next multiple of the
    network's total stride, run in infer mode, and cropped back. Returns
    (label volume, per-class probability array of shape dims + (n_classes,)).
    """
    total = cfg.total_stride
    dims = v.dims
    pad = []
    for axis in range(3):
        target = -(-dims[axis] // total[axis]) * total[axis]
        extra = target - dims[axis]
        pad.append((extra // 2, extra - extra // 2))
    x = np.pad(v.data.astype(cfg.np_dtype), pad)
    _, probs, _ = model.forward(params, cfg, x[None, ..., None], train=False)
    probs = probs[0]
    crop = tuple(slice(p[0], p[0] + dims[i]) for i, p in enumerate(pad))
    probs = probs[crop]
    labels = probs.argmax(axis=-1).astype(np.float32)
    return Volume(labels, v.spacing, v.affine, VolumeKind.LABEL), probs
