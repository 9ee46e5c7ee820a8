"""The single-output segmentation network.

ResNet-style encoder (strided 3x3x3 downsampling convolutions followed by
pre-activation residual units) with an FCN upscore decoder: per-scale
1x1x1 class-score convolutions fused by linear upsampling plus addition.
Forward, backward, and the loss are written out explicitly so gradients
can be verified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ChannelMismatch, IndivisibleShape, ShapeMismatch, StaleCache
from . import layers


@dataclass
class NetConfig:
    n_scales: int = 4
    units_per_scale: int = 2
    base_filters: int = 16
    n_classes: int = 4
    leakiness: float = 0.1
    strides: tuple[tuple[int, int, int], ...] = None
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5
    dtype: str = "float32"

    def __post_init__(self):
        if self.n_scales < 2:
            raise ShapeMismatch("n_scales must be >= 2")
        if self.strides is None:
            self.strides = ((1, 1, 1),) + ((2, 2, 2),) * (self.n_scales - 1)
        self.strides = tuple(tuple(int(x) for x in s) for s in self.strides)
        if len(self.strides) != self.n_scales:
            raise ShapeMismatch("one stride triple per scale")
        if any(x not in (1, 2) for s in self.strides for x in s):
            raise ShapeMismatch("per-axis strides must be 1 or 2")

    def filters(self, scale: int) -> int:
        """Filter count at 1-based scale: doubles each scale."""
        return self.base_filters * (2 ** (scale - 1))

    @property
    def total_stride(self) -> tuple[int, int, int]:
        out = [1, 1, 1]
        for s in self.strides:
            for a in range(3):
                out[a] *= s[a]
        return tuple(out)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def param_shapes(cfg: NetConfig) -> dict[str, tuple[int, ...]]:
    """Every tensor the forward graph demands, in graph order."""
    shapes: dict[str, tuple[int, ...]] = {}
    f1 = cfg.filters(1)
    shapes["init_conv.w"] = (3, 3, 3, 1, f1)
    shapes["init_conv.b"] = (f1,)
    f_in = f1
    for j in range(1, cfg.n_scales + 1):
        fj = cfg.filters(j)
        shapes[f"s{j}.down.w"] = (3, 3, 3, f_in, fj)
        shapes[f"s{j}.down.b"] = (fj,)
        for u in range(1, cfg.units_per_scale + 1):
            for bn in ("bn1", "bn2"):
                shapes[f"s{j}.u{u}.{bn}.gamma"] = (fj,)
                shapes[f"s{j}.u{u}.{bn}.beta"] = (fj,)
                shapes[f"s{j}.u{u}.{bn}.mean"] = (fj,)
                shapes[f"s{j}.u{u}.{bn}.var"] = (fj,)
            shapes[f"s{j}.u{u}.conv1.w"] = (3, 3, 3, fj, fj)
            shapes[f"s{j}.u{u}.conv1.b"] = (fj,)
            shapes[f"s{j}.u{u}.conv2.w"] = (3, 3, 3, fj, fj)
            shapes[f"s{j}.u{u}.conv2.b"] = (fj,)
        f_in = fj
    for j in range(1, cfg.n_scales + 1):
        shapes[f"score{j}.w"] = (1, 1, 1, cfg.filters(j), cfg.n_classes)
        shapes[f"score{j}.b"] = (cfg.n_classes,)
    return shapes


def is_state_param(name: str) -> bool:
    """Batch-norm running statistics: saved, but not trained."""
    return name.endswith(".mean") or name.endswith(".var")


def trainable_names(cfg: NetConfig) -> list[str]:
    return [n for n in param_shapes(cfg) if not is_state_param(n)]


def init_params(cfg: NetConfig, seed: int = 0, checkpoint: dict | None = None) -> dict:
    """Glorot-uniform kernels, zero biases, identity batch norm.

    When ``checkpoint`` (a name->tensor map) is given, tensors are copied
    exactly; any missing name or shape mismatch is an error.
    """
    shapes = param_shapes(cfg)
    if checkpoint is not None:
        from ..errors import BadCheckpoint

        params = {}
        for name, shape in shapes.items():
            if name not in checkpoint:
                raise BadCheckpoint(f"checkpoint is missing parameter {name!r}")
            tensor = np.asarray(checkpoint[name], dtype=cfg.np_dtype)
            if tensor.shape != shape:
                raise ShapeMismatch(
                    f"checkpoint tensor {name!r} has shape {tensor.shape}, expected {shape}"
                )
            params[name] = tensor.copy()
        return params

    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".w"):
            k = int(np.prod(shape[:3]))
            bound = np.sqrt(6.0 / (k * shape[3] + k * shape[4]))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(cfg.np_dtype)
        elif name.endswith(".gamma") or name.endswith(".var"):
            params[name] = np.ones(shape, dtype=cfg.np_dtype)
        else:  # biases, beta, running mean
            params[name] = np.zeros(shape, dtype=cfg.np_dtype)
    return params


def _bn_act(params, cfg, prefix, x, train):
    y, bn_cache = layers.batchnorm_forward(
        x,
        params[prefix + ".gamma"],
        params[prefix + ".beta"],
        params[prefix + ".mean"],
        params[prefix + ".var"],
        cfg.bn_momentum,
        cfg.bn_eps,
        train,
    )
    a, act_cache = layers.leaky_relu_forward(y, cfg.leakiness)
    return a, (bn_cache, act_cache)


def _bn_act_backward(cache, dy):
    bn_cache, act_cache = cache
    dy = layers.leaky_relu_backward(act_cache, dy)
    return layers.batchnorm_backward(bn_cache, dy)


def residual_unit_forward(params, cfg, prefix, x, train, proj=False):
    """Pre-activation residual unit: (BN -> lrelu -> conv) twice + skip.

    With ``proj`` the skip goes through a 1x1x1 projection convolution
    (required when the unit changes channel count).
    """
    expected = params[prefix + ".bn1.gamma"].shape[0]
    if x.shape[-1] != expected:
        raise ChannelMismatch(
            f"{prefix}: input has {x.shape[-1]} channels, unit expects {expected}"
        )
    a1, c1 = _bn_act(params, cfg, prefix + ".bn1", x, train)
    h1, c2 = layers.conv3x3_forward(a1, params[prefix + ".conv1.w"], params[prefix + ".conv1.b"])
    a2, c3 = _bn_act(params, cfg, prefix + ".bn2", h1, train)
    h2, c4 = layers.conv3x3_forward(a2, params[prefix + ".conv2.w"], params[prefix + ".conv2.b"])
    if proj:
        skip, c5 = layers.conv1x1_forward(x, params[prefix + ".proj.w"], params[prefix + ".proj.b"])
    else:
        if x.shape[-1] != h2.shape[-1]:
            raise ChannelMismatch(f"{prefix}: identity skip with changing channels")
        skip, c5 = x, None
    return h2 + skip, (c1, c2, c3, c4, c5, proj, prefix)


def residual_unit_backward(cache, dy, grads):
    c1, c2, c3, c4, c5, proj, prefix = cache
    da2, dw2, db2 = layers.conv3x3_backward(c4, dy)
    grads[prefix + ".conv2.w"] = dw2
    grads[prefix + ".conv2.b"] = db2
    dh1, dg2, dbt2 = _bn_act_backward(c3, da2)
    grads[prefix + ".bn2.gamma"] = dg2
    grads[prefix + ".bn2.beta"] = dbt2
    da1, dw1, db1 = layers.conv3x3_backward(c2, dh1)
    grads[prefix + ".conv1.w"] = dw1
    grads[prefix + ".conv1.b"] = db1
    dx, dg1, dbt1 = _bn_act_backward(c1, da1)
    grads[prefix + ".bn1.gamma"] = dg1
    grads[prefix + ".bn1.beta"] = dbt1
    if proj:
        dskip, dwp, dbp = layers.conv1x1_backward(c5, dy)
        grads[prefix + ".proj.w"] = dwp
        grads[prefix + ".proj.b"] = dbp
        dx = dx + dskip
    else:
        dx = dx + dy
    return dx


def forward(params: dict, cfg: NetConfig, x: np.ndarray, train: bool = False):
    """Run the network. Returns (logits, probs, cache).

    ``x`` is (batch, d0, d1, d2, 1); spatial dims must be divisible by the
    total stride product. Train mode uses batch statistics in BN and
    updates running stats; infer mode uses running stats.
    """
    x = np.asarray(x, dtype=cfg.np_dtype)
    if x.ndim == 4:
        x = x[..., None]
    if x.ndim != 5 or x.shape[-1] != 1:
        raise ChannelMismatch(f"expected single-channel 5D input, got shape {x.shape}")
    total = cfg.total_stride
    for axis in range(3):
        if x.shape[1 + axis] % total[axis] != 0:
            raise IndivisibleShape(
                f"spatial dim {x.shape[1 + axis]} not divisible by {total[axis]}"
            )

    cache = {"train": train, "cfg": cfg}
    h, cache["init"] = layers.conv3x3_forward(x, params["init_conv.w"], params["init_conv.b"])
    scale_caches = []
    scale_ends = []
    for j in range(1, cfg.n_scales + 1):
        h, down_cache = layers.conv3x3_forward(
            h, params[f"s{j}.down.w"], params[f"s{j}.down.b"], cfg.strides[j - 1]
        )
        unit_caches = []
        for u in range(1, cfg.units_per_scale + 1):
            h, ucache = residual_unit_forward(params, cfg, f"s{j}.u{u}", h, train)
            unit_caches.append(ucache)
        scale_caches.append((down_cache, unit_caches))
        scale_ends.append(h)
    cache["scales"] = scale_caches

    score, sc = layers.conv1x1_forward(
        scale_ends[-1], params[f"score{cfg.n_scales}.w"], params[f"score{cfg.n_scales}.b"]
    )
    decoder = [("score", cfg.n_scales, sc)]
    for j in range(cfg.n_scales - 1, 0, -1):
        score, up_cache = layers.upsample_forward(score, cfg.strides[j])
        skip, sc = layers.conv1x1_forward(
            scale_ends[j - 1], params[f"score{j}.w"], params[f"score{j}.b"]
        )
        score = score + skip
        decoder.append(("fuse", j, up_cache, sc))
    if cfg.strides[0] != (1, 1, 1):
        score, up_cache = layers.upsample_forward(score, cfg.strides[0])
        decoder.append(("final_up", 0, up_cache))
    cache["decoder"] = decoder

    logits = score
    probs = layers.softmax(logits.astype(np.float64)).astype(logits.dtype)
    cache["probs"] = probs
    cache["batch_shape"] = x.shape
    return logits, probs, cache


def loss(probs: np.ndarray, labels: np.ndarray):
    """Mean categorical cross-entropy over all voxels.

    Returns (scalar, per-voxel loss tensor). ``labels`` may be integer
    class ids (batch, d0, d1, d2) or a one-hot tensor.
    """
    n_classes = probs.shape[-1]
    onehot = layers.one_hot(labels, n_classes, dtype=np.float64)
    if onehot.shape != probs.shape:
        raise ShapeMismatch(f"labels shape {onehot.shape} vs probs {probs.shape}")
    per_voxel = -(onehot * np.log(np.maximum(probs.astype(np.float64), 1e-12))).sum(axis=-1)
    return float(per_voxel.mean()), per_voxel


def backward(cache: dict, labels: np.ndarray) -> dict:
    """Exact gradients of loss(softmax(forward(x)), labels) for every
    trainable parameter."""
    if not cache.get("train"):
        raise StaleCache("backward requires a cache produced in train mode")
    cfg: NetConfig = cache["cfg"]
    probs = cache["probs"]
    onehot = layers.one_hot(labels, cfg.n_classes, dtype=probs.dtype)
    if onehot.shape != probs.shape:
        raise ShapeMismatch(f"labels shape {onehot.shape} vs probs {probs.shape}")
    n_voxels = probs.size // probs.shape[-1]
    dlogits = (probs - onehot) / n_voxels

    grads: dict[str, np.ndarray] = {}
    dscore = dlogits
    d_ends = [None] * cfg.n_scales
    for entry in reversed(cache["decoder"]):
        kind = entry[0]
        if kind == "final_up":
            dscore = layers.upsample_backward(entry[2], dscore)
        elif kind == "fuse":
            _, j, up_cache, sc = entry
            dskip, dw, db = layers.conv1x1_backward(sc, dscore)
            grads[f"score{j}.w"] = dw
            grads[f"score{j}.b"] = db
            d_ends[j - 1] = dskip
            dscore = layers.upsample_backward(up_cache, dscore)
        else:  # deepest score conv
            _, j, sc = entry
            dskip, dw, db = layers.conv1x1_backward(sc, dscore)
            grads[f"score{j}.w"] = dw
            grads[f"score{j}.b"] = db
            d_ends[j - 1] = dskip

    dh = None
    for j in range(cfg.n_scales, 0, -1):
        down_cache, unit_caches = cache["scales"][j - 1]
        dh = d_ends[j - 1] if dh is None else dh + d_ends[j - 1]
        for u in range(cfg.units_per_scale, 0, -1):
            dh = residual_unit_backward(unit_caches[u - 1], dh, grads)
        dh, dw, db = layers.conv3x3_backward(down_cache, dh)
        grads[f"s{j}.down.w"] = dw
        grads[f"s{j}.down.b"] = db
    _, dw, db = layers.conv3x3_backward(cache["init"], dh)
    grads["init_conv.w"] = dw
    grads["init_conv.b"] = db
    return grads
