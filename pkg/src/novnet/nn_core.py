"""Minimal dense/conv layer stack with exact forward and backward passes.

Everything runs on float64 numpy arrays (the toolkit's tensor carrier) so
analytic gradients can be checked against central finite differences to
tight tolerances. Supported layers: dense, conv2d (valid padding, stride
>= 1), relu, and global average pooling. The network is described by an
immutable NetworkSpec; parameters live in a plain dict keyed by
"layer{i}.weight" / "layer{i}.bias".

forward/backward are pure functions of their arguments, so two calls with
identical inputs return bit-identical outputs and may run concurrently on
disjoint batches. Only sgd_step produces new parameter values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, DivergenceError, UsageError

ParamSet = dict[str, np.ndarray]


@dataclass(frozen=True)
class Dense:
    """Fully connected layer: y = x @ W.T + b, weight shape [out, in]."""

    in_width: int
    out_width: int
    kind: str = field(default="dense", init=False)


@dataclass(frozen=True)
class Conv2d:
    """Valid (unpadded) 2-D convolution with a square kernel.

    Weight shape [out_channels, in_channels, kernel, kernel]; one bias per
    output channel. out_channels is the filter count of the layer.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    kind: str = field(default="conv2d", init=False)


@dataclass(frozen=True)
class Relu:
    """Elementwise max(x, 0)."""

    kind: str = field(default="relu", init=False)


@dataclass(frozen=True)
class GlobalAveragePool:
    """Spatial mean per channel: [batch, k, h, w] -> [batch, k]."""

    kind: str = field(default="global-average-pool", init=False)


LayerSpec = Dense | Conv2d | Relu | GlobalAveragePool


@dataclass(frozen=True)
class NetworkSpec:
    """A layer chain plus the per-sample input shape it consumes.

    Construction validates that consecutive layer shapes chain, that at
    most one global-average-pool is present, and that a pool (when
    present) comes before the final dense layer.
    """

    input_shape: tuple[int, ...]
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        self.layer_input_shapes()  # raises ConfigError on a bad chain
        pool_positions = [i for i, l in enumerate(self.layers) if isinstance(l, GlobalAveragePool)]
        if len(pool_positions) > 1:
            raise ConfigError("at most one global-average-pool layer is allowed")
        dense_positions = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        if pool_positions and dense_positions and pool_positions[0] > dense_positions[-1]:
            raise ConfigError("global-average-pool must precede the final dense layer")

    def layer_input_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample input shape of every layer, plus the final output shape."""
        shape = tuple(self.input_shape)
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                if shape != (layer.in_width,):
                    raise ConfigError(
                        f"layer {i} (dense) expects input shape ({layer.in_width},), got {shape}"
                    )
                shape = (layer.out_width,)
            elif isinstance(layer, Conv2d):
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigError(
                        f"layer {i} (conv2d) expects input shape ({layer.in_channels}, h, w), got {shape}"
                    )
                if layer.kernel < 1 or layer.stride < 1:
                    raise ConfigError(f"layer {i} (conv2d) needs kernel >= 1 and stride >= 1")
                h_out = (shape[1] - layer.kernel) // layer.stride + 1
                w_out = (shape[2] - layer.kernel) // layer.stride + 1
                if h_out < 1 or w_out < 1:
                    raise ConfigError(f"layer {i} (conv2d) kernel {layer.kernel} exceeds input {shape[1:]}")
                shape = (layer.out_channels, h_out, w_out)
            elif isinstance(layer, GlobalAveragePool):
                if len(shape) != 3:
                    raise ConfigError(f"layer {i} (global-average-pool) expects rank-3 input, got {shape}")
                shape = (shape[0],)
            elif isinstance(layer, Relu):
                pass
            else:
                raise ConfigError(f"unknown layer kind: {layer!r}")
            shapes.append(shape)
        return shapes

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layer_input_shapes()[-1]

    def to_dicts(self) -> list[dict]:
        """JSON-friendly layer description (used by configs and checkpoints)."""
        out = []
        for layer in self.layers:
            if isinstance(layer, Dense):
                out.append({"kind": layer.kind, "in": layer.in_width, "out": layer.out_width})
            elif isinstance(layer, Conv2d):
                out.append({
                    "kind": layer.kind,
                    "in_channels": layer.in_channels,
                    "out_channels": layer.out_channels,
                    "kernel": layer.kernel,
                    "stride": layer.stride,
                })
            else:
                out.append({"kind": layer.kind})
        return out


def spec_from_dicts(input_shape, layer_dicts) -> NetworkSpec:
    """Inverse of NetworkSpec.to_dicts."""
    layers: list[LayerSpec] = []
    for d in layer_dicts:
        kind = d.get("kind")
        if kind == "dense":
            layers.append(Dense(int(d["in"]), int(d["out"])))
        elif kind == "conv2d":
            layers.append(Conv2d(int(d["in_channels"]), int(d["out_channels"]),
                                 int(d["kernel"]), int(d.get("stride", 1))))
        elif kind == "relu":
            layers.append(Relu())
        elif kind == "global-average-pool":
            layers.append(GlobalAveragePool())
        else:
            raise ConfigError(f"unknown layer kind in description: {kind!r}")
    return NetworkSpec(tuple(int(s) for s in input_shape), tuple(layers))


@dataclass
class OptimizerState:
    """SGD-with-momentum state: velocity mirrors the ParamSet shapes."""

    lr: float = 0.01
    momentum: float = 0.9
    velocity: ParamSet = field(default_factory=dict)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"learning rate must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


def init_params(spec: NetworkSpec, seed) -> ParamSet:
    """Deterministically initialize all trainable parameters of a network.

    Weights are drawn from a zero-mean uniform distribution with scale
    1/sqrt(fan_in); biases start at zero. The same (spec, seed) pair
    always produces bit-identical values. `seed` is anything
    numpy.random.default_rng accepts (int or sequence of ints).
    """
    rng = np.random.default_rng(seed)
    params: ParamSet = {}
    for i, layer in enumerate(spec.layers):
        if isinstance(layer, Dense):
            bound = 1.0 / np.sqrt(layer.in_width)
            params[f"layer{i}.weight"] = rng.uniform(-bound, bound, size=(layer.out_width, layer.in_width))
            params[f"layer{i}.bias"] = np.zeros(layer.out_width)
        elif isinstance(layer, Conv2d):
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            bound = 1.0 / np.sqrt(fan_in)
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
            params[f"layer{i}.weight"] = rng.uniform(-bound, bound, size=shape)
            params[f"layer{i}.bias"] = np.zeros(layer.out_channels)
    return params


def _as_batch(spec: NetworkSpec, batch: np.ndarray) -> np.ndarray:
    batch = np.asarray(batch, dtype=np.float64)
    expected = tuple(spec.input_shape)
    if batch.shape[1:] != expected:
        raise DimensionError(
            f"batch shape {batch.shape} does not match input shape (n, {', '.join(map(str, expected))})"
        )
    return batch


def forward(spec: NetworkSpec, params: ParamSet, batch: np.ndarray):
    """Run the network on a batch; returns (activations, cache).

    The returned activations are the raw final-layer values (no softmax or
    sigmoid applied). The cache holds each layer's input and is consumed
    by backward().
    """
    x = _as_batch(spec, batch)
    cache = []
    for i, layer in enumerate(spec.layers):
        cache.append(x)
        if isinstance(layer, Dense):
            w = params[f"layer{i}.weight"]
            b = params[f"layer{i}.bias"]
            x = x @ w.T + b
        elif isinstance(layer, Conv2d):
            x = _conv2d_forward(x, params[f"layer{i}.weight"], params[f"layer{i}.bias"], layer.stride)
        elif isinstance(layer, Relu):
            x = np.maximum(x, 0.0)
        elif isinstance(layer, GlobalAveragePool):
            x = global_average_pool(x)
    return x, cache


def global_average_pool(g: np.ndarray) -> np.ndarray:
    """Mean of each activation map: [batch, k, h, w] -> [batch, k]."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 4:
        raise DimensionError(f"global_average_pool expects rank-4 input, got rank {g.ndim}")
    return g.mean(axis=(2, 3))


def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int) -> np.ndarray:
    n, _, h, win = x.shape
    cout, _, k, _ = w.shape
    h_out = (h - k) // stride + 1
    w_out = (win - k) // stride + 1
    out = np.zeros((n, cout, h_out, w_out))
    # Sum over kernel offsets: each (u, v) contributes a strided slice of x
    # contracted with the matching kernel slab.
    for u in range(k):
        for v in range(k):
            patch = x[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
            out += np.einsum("ncij,oc->noij", patch, w[:, :, u, v])
    return out + b[None, :, None, None]


def _conv2d_backward(x: np.ndarray, w: np.ndarray, stride: int, dy: np.ndarray):
    _, _, h_out, w_out = dy.shape
    k = w.shape[2]
    dw = np.zeros_like(w)
    dx = np.zeros_like(x)
    db = dy.sum(axis=(0, 2, 3))
    for u in range(k):
        for v in range(k):
            patch = x[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride]
            dw[:, :, u, v] = np.einsum("noij,ncij->oc", dy, patch)
            dx[:, :, u:u + stride * h_out:stride, v:v + stride * w_out:stride] += np.einsum(
                "noij,oc->ncij", dy, w[:, :, u, v]
            )
    return dw, db, dx


def backward(spec: NetworkSpec, params: ParamSet, cache, dl_df: np.ndarray):
    """Backpropagate dl_df through the network.

    Returns (grads, dx) where grads mirrors the ParamSet shapes and dx is
    the gradient with respect to the input batch (needed when this network
    is a head stacked on another network).
    """
    if cache is None or len(cache) != len(spec.layers):
        raise UsageError("backward needs the cache produced by forward on the same batch")
    dy = np.asarray(dl_df, dtype=np.float64)
    grads: ParamSet = {}
    for i in reversed(range(len(spec.layers))):
        layer = spec.layers[i]
        x = cache[i]
        if isinstance(layer, Dense):
            w = params[f"layer{i}.weight"]
            grads[f"layer{i}.weight"] = dy.T @ x
            grads[f"layer{i}.bias"] = dy.sum(axis=0)
            dy = dy @ w
        elif isinstance(layer, Conv2d):
            dw, db, dy = _conv2d_backward(x, params[f"layer{i}.weight"], layer.stride, dy)
            grads[f"layer{i}.weight"] = dw
            grads[f"layer{i}.bias"] = db
        elif isinstance(layer, Relu):
            dy = dy * (x > 0.0)
        elif isinstance(layer, GlobalAveragePool):
            _, _, h, w_ = x.shape
            dy = np.broadcast_to(dy[:, :, None, None] / (h * w_), x.shape).copy()
    return grads, dy


def sgd_step(params: ParamSet, grads: ParamSet, state: OptimizerState):
    """One SGD-with-momentum update; returns (new_params, new_state).

    velocity <- momentum * velocity + grads
    params   <- params - lr * velocity
    """
    new_params: ParamSet = {}
    new_velocity: ParamSet = {}
    for name, value in params.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for parameter {name!r}")
        v_prev = state.velocity.get(name)
        v = g.copy() if v_prev is None else state.momentum * v_prev + g
        new_velocity[name] = v
        new_params[name] = value - state.lr * v
    return new_params, OptimizerState(lr=state.lr, momentum=state.momentum, velocity=new_velocity)


def finite_difference_grad(loss_fn, params: ParamSet, eps: float = 1e-6) -> ParamSet:
    """Central-difference gradient of a scalar loss over every parameter.

    loss_fn must be a pure function of the ParamSet. This is the test
    oracle backing the analytic backward pass; keep it independent of it.
    """
    if eps <= 0:
        raise ConfigError(f"finite-difference epsilon must be positive, got {eps}")
    grads: ParamSet = {}
    work = {name: value.copy() for name, value in params.items()}
    for name, value in work.items():
        grad = np.zeros_like(value)
        flat = value.reshape(-1)
        gflat = grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            hi = loss_fn(work)
            flat[j] = orig - eps
            lo = loss_fn(work)
            flat[j] = orig
            gflat[j] = (hi - lo) / (2.0 * eps)
        grads[name] = grad
    return grads
