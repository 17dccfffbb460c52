"""A small neural-network kit with hand-written backward passes.

Tensors are plain ``numpy`` arrays.  Convolutions use NHWC layout and
cross-correlation with zero padding, weights are stored HWIO.  Every layer
caches its last input in ``forward`` and consumes it in ``backward``, which
returns the gradient w.r.t. the input and stores parameter gradients in
``layer.grads``.
"""
from __future__ import annotations

import json
import os
import tempfile
from collections import OrderedDict
from pathlib import Path

import numpy as np

__all__ = [
    "ShapeError",
    "StateError",
    "CheckpointError",
    "Layer",
    "Linear",
    "Conv2d",
    "ReLU",
    "Tanh",
    "AvgPool2d",
    "GlobalAvgPool",
    "Flatten",
    "Sequential",
    "mlp",
    "Adam",
    "grad_check",
    "save_checkpoint",
    "load_checkpoint",
    "read_checkpoint",
    "build_layer",
]

CHECKPOINT_FORMAT = "phototune-nn"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class StateError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class Layer:
    """Base class; parameter-free layers only override the two passes."""

    def __init__(self):
        self.params: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.grads: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self._x = None

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad, param_grads: bool = True):
        raise NotImplementedError

    def _cached(self):
        if self._x is None:
            raise StateError(f"{type(self).__name__}.backward called without a preceding forward")
        return self._x

    def spec(self) -> dict:
        return {"type": type(self).__name__}

    def parameters(self):
        return list(self.params.items())

    def gradients(self):
        return [self.grads[k] if k in self.grads else np.zeros_like(v) for k, v in self.params.items()]

    def astype(self, dtype):
        for k in self.params:
            self.params[k] = self.params[k].astype(dtype)
        self.grads.clear()
        return self

    def clear_cache(self):
        self._x = None


def _uniform(rng, fan_in, shape, dtype=np.float64):
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Linear(Layer):
    """``y = x W^T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, n_in: int, n_out: int, rng=None, dtype=np.float64):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        rng = np.random.default_rng(rng)
        self.params["W"] = _uniform(rng, n_in, (n_out, n_in), dtype)
        self.params["b"] = _uniform(rng, n_in, (n_out,), dtype)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.n_in:
            raise ShapeError(f"Linear expected (N, {self.n_in}), got {x.shape}")
        self._x = x
        return x @ self.params["W"].T + self.params["b"]

    def backward(self, grad, param_grads=True):
        x = self._cached()
        if param_grads:
            self.grads["W"] = grad.T @ x
            self.grads["b"] = grad.sum(axis=0)
        return grad @ self.params["W"]

    def spec(self):
        return {"type": "Linear", "n_in": self.n_in, "n_out": self.n_out}


class Conv2d(Layer):
    """2-D cross-correlation on NHWC tensors."""

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, stride: int = 1, pad: int = 1, rng=None, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out, self.kernel, self.stride, self.pad = c_in, c_out, kernel, stride, pad
        rng = np.random.default_rng(rng)
        fan_in = kernel * kernel * c_in
        self.params["W"] = _uniform(rng, fan_in, (kernel, kernel, c_in, c_out), dtype)
        self.params["b"] = _uniform(rng, fan_in, (c_out,), dtype)
        self._cols = None
        self._in_shape = None

    def out_size(self, h: int, w: int):
        k, s, p = self.kernel, self.stride, self.pad
        return (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.c_in:
            raise ShapeError(f"Conv2d expected (N, H, W, {self.c_in}), got {x.shape}")
        n, h, w, c = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.out_size(h, w)
        if ho < 1 or wo < 1:
            raise ShapeError(f"Conv2d input {h}x{w} too small for kernel {k}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = np.empty((n, ho, wo, k, k, c), dtype=x.dtype)
        for i in range(k):
            for j in range(k):
                cols[:, :, :, i, j, :] = xp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :]
        cols = cols.reshape(n * ho * wo, k * k * c)
        self._x = x
        self._cols = cols
        self._in_shape = x.shape
        out = cols @ self.params["W"].reshape(k * k * c, self.c_out) + self.params["b"]
        return out.reshape(n, ho, wo, self.c_out)

    def backward(self, grad, param_grads=True):
        self._cached()
        n, h, w, c = self._in_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = grad.shape[1], grad.shape[2]
        g2 = grad.reshape(-1, self.c_out)
        wmat = self.params["W"].reshape(k * k * c, self.c_out)
        if param_grads:
            self.grads["W"] = (self._cols.T @ g2).reshape(self.params["W"].shape)
            self.grads["b"] = g2.sum(axis=0)
        dcols = (g2 @ wmat.T).reshape(n, ho, wo, k, k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, i : i + s * (ho - 1) + 1 : s, j : j + s * (wo - 1) + 1 : s, :] += dcols[:, :, :, i, j, :]
        return dxp[:, p : p + h, p : p + w, :]

    def spec(self):
        return {
            "type": "Conv2d",
            "c_in": self.c_in,
            "c_out": self.c_out,
            "kernel": self.kernel,
            "stride": self.stride,
            "pad": self.pad,
        }

    def clear_cache(self):
        self._x = None
        self._cols = None


class ReLU(Layer):
    def forward(self, x):
        self._x = x
        return np.maximum(x, 0.0)

    def backward(self, grad, param_grads=True):
        return grad * (self._cached() > 0)


class Tanh(Layer):
    def forward(self, x):
        y = np.tanh(x)
        self._x = y
        return y

    def backward(self, grad, param_grads=True):
        y = self._cached()
        return grad * (1.0 - y * y)


class AvgPool2d(Layer):
    """Non-overlapping ``k x k`` average pooling (NHWC)."""

    def __init__(self, kernel: int):
        super().__init__()
        self.kernel = kernel

    def forward(self, x):
        n, h, w, c = x.shape
        k = self.kernel
        if h % k or w % k:
            raise ShapeError(f"AvgPool2d({k}) needs spatial dims divisible by {k}, got {h}x{w}")
        self._x = x.shape
        return x.reshape(n, h // k, k, w // k, k, c).mean(axis=(2, 4))

    def backward(self, grad, param_grads=True):
        n, h, w, c = self._cached()
        k = self.kernel
        g = np.repeat(np.repeat(grad, k, axis=1), k, axis=2)
        return g / (k * k)

    def spec(self):
        return {"type": "AvgPool2d", "kernel": self.kernel}


class GlobalAvgPool(Layer):
    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"GlobalAvgPool expected NHWC input, got {x.shape}")
        self._x = x.shape
        return x.mean(axis=(1, 2))

    def backward(self, grad, param_grads=True):
        n, h, w, c = self._cached()
        return np.broadcast_to(grad[:, None, None, :] / (h * w), (n, h, w, c)).copy()


class Flatten(Layer):
    def forward(self, x):
        self._x = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, param_grads=True):
        return grad.reshape(self._cached())


_LAYER_TYPES = {
    "Linear": lambda s, rng: Linear(s["n_in"], s["n_out"], rng),
    "Conv2d": lambda s, rng: Conv2d(s["c_in"], s["c_out"], s["kernel"], s["stride"], s["pad"], rng),
    "ReLU": lambda s, rng: ReLU(),
    "Tanh": lambda s, rng: Tanh(),
    "AvgPool2d": lambda s, rng: AvgPool2d(s["kernel"]),
    "GlobalAvgPool": lambda s, rng: GlobalAvgPool(),
    "Flatten": lambda s, rng: Flatten(),
}


def build_layer(spec: dict, rng=None) -> Layer:
    try:
        return _LAYER_TYPES[spec["type"]](spec, rng)
    except KeyError as exc:
        raise CheckpointError(f"unknown layer spec {spec!r}") from exc


class Sequential:
    """Ordered chain of layers."""

    def __init__(self, layers):
        self.layers = list(layers)

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad, param_grads: bool = True):
        for layer in reversed(self.layers):
            grad = layer.backward(grad, param_grads)
        return grad

    def parameters(self):
        out = []
        for i, layer in enumerate(self.layers):
            out.extend((f"{i}.{k}", v) for k, v in layer.params.items())
        return out

    def gradients(self):
        out = []
        for layer in self.layers:
            out.extend(layer.gradients())
        return out

    def spec(self):
        return [layer.spec() for layer in self.layers]

    def astype(self, dtype):
        for layer in self.layers:
            layer.astype(dtype)
        return self

    def clear_cache(self):
        for layer in self.layers:
            layer.clear_cache()

    def copy_from(self, other: "Sequential") -> None:
        for (_, dst), (_, src) in zip(self.parameters(), other.parameters()):
            dst[...] = src

    @classmethod
    def from_spec(cls, spec, rng=None):
        rng = np.random.default_rng(rng)
        return cls(build_layer(s, rng) for s in spec)


def mlp(sizes, rng=None, out_activation=None, dtype=np.float64) -> Sequential:
    """Fully-connected stack with ReLU between layers."""
    rng = np.random.default_rng(rng)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(Linear(a, b, rng, dtype))
        if i < len(sizes) - 2:
            layers.append(ReLU())
    if out_activation == "tanh":
        layers.append(Tanh())
    elif out_activation is not None:
        raise ValueError(f"unsupported output activation {out_activation!r}")
    return Sequential(layers)


class Adam:
    """Adam with bias correction, updating parameter arrays in place."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = [p for _, p in params] if params and isinstance(params[0], tuple) else list(params)
        self.lr = lr
        self.betas = tuple(betas)
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads) -> None:
        grads = list(grads)
        if len(grads) != len(self.params):
            raise ShapeError(f"Adam got {len(grads)} gradients for {len(self.params)} parameters")
        for p, g in zip(self.params, grads):
            if g.shape != p.shape:
                raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
            # a finite sum is cheap and rules out inf/nan; fall back to the full check otherwise
            if not np.isfinite(g.sum()) and not np.all(np.isfinite(g)):
                raise FloatingPointError("non-finite gradient; Adam update rejected")
        self.step_count += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.step_count
        c2 = 1.0 - b2**self.step_count
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            tmp = np.multiply(g, 1.0 - b1, dtype=p.dtype)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            # lr * (m / c1) / (sqrt(v / c2) + eps)
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / np.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= self.lr / c1
            p -= tmp

    def state_arrays(self) -> dict:
        out = {"step_count": np.array(self.step_count)}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"m{i}"] = m
            out[f"v{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict) -> None:
        for i in range(len(self.params)):
            for name, dst in (("m", self.m[i]), ("v", self.v[i])):
                src = arrays[f"{name}{i}"]
                if src.shape != dst.shape:
                    raise CheckpointError(f"Adam state {name}{i}: shape {src.shape} != {dst.shape}")
                dst[...] = src
        self.step_count = int(arrays["step_count"])


def _relu_layers(obj) -> list:
    """Every :class:`ReLU` reachable from ``obj`` through layer lists and module attributes."""
    if isinstance(obj, ReLU):
        return [obj]
    if isinstance(obj, Sequential):
        children = obj.layers
    else:
        children = [v for v in vars(obj).values() if hasattr(v, "forward") and hasattr(v, "parameters")]
    return [r for child in children for r in _relu_layers(child)]


def grad_check(
    network, x, loss_fn, n_samples: int = 100, h: float = 1e-4, rng=None, check_input: bool = False, skip_kinks: bool = False
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``loss_fn(output) -> (loss, dloss/doutput)``.  Parameters are sampled
    uniformly over all entries of all parameter arrays.  With ``skip_kinks``
    a sample whose ``+h`` or ``-h`` probe flips any ReLU's active set is
    replaced by a fresh draw, since the central difference is meaningless
    across a kink.
    """
    rng = np.random.default_rng(rng)
    relus = _relu_layers(network) if skip_kinks else []

    def masks():
        return [r._x > 0 for r in relus]

    out = network.forward(x)
    base = masks()
    _, dout = loss_fn(out)
    dx = network.backward(dout)
    params = [p for _, p in network.parameters()]
    grads = [g.copy() for g in network.gradients()]
    sizes = np.array([p.size for p in params])
    worst = 0.0

    def rel(a, n):
        return abs(a - n) / max(abs(a), abs(n), 1e-8)

    def probe(arr, idx):
        """Central difference at ``arr[idx]``, or None if a probe crosses a kink."""
        old = arr[idx]
        arr[idx] = old + h
        lp, _ = loss_fn(network.forward(x))
        crossed = any(np.any(m != b) for m, b in zip(masks(), base))
        arr[idx] = old - h
        lm, _ = loss_fn(network.forward(x))
        crossed = crossed or any(np.any(m != b) for m, b in zip(masks(), base))
        arr[idx] = old
        return None if crossed else (lp - lm) / (2 * h)

    def sample(draw):
        nonlocal worst
        done = attempts = 0
        while done < n_samples:
            attempts += 1
            if attempts > 50 * n_samples:
                raise RuntimeError("too many samples straddle ReLU kinks; use a smaller step")
            arr, idx, a = draw()
            num = probe(arr, idx)
            if num is None:
                continue
            worst = max(worst, rel(a, num))
            done += 1

    if sizes.sum():
        bounds = np.cumsum(sizes)

        def draw_param():
            flat = int(rng.integers(0, sizes.sum()))
            k = int(np.searchsorted(bounds, flat, side="right"))
            idx = flat - (bounds[k - 1] if k else 0)
            return params[k].reshape(-1), idx, grads[k].reshape(-1)[idx]

        sample(draw_param)
    if check_input:
        xf = x.reshape(-1)

        def draw_input():
            idx = int(rng.integers(0, xf.size))
            return xf, idx, dx.reshape(-1)[idx]

        sample(draw_input)
    network.forward(x)
    return worst


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, modules: dict, optimizers: dict | None = None, meta: dict | None = None) -> None:
    """Write modules (anything with ``spec()``/``parameters()``) and Adam states to ``.npz``."""
    arrays = {}
    manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "modules": {}, "optimizers": [], "meta": meta or {}}
    for name, mod in modules.items():
        params = mod.parameters()
        manifest["modules"][name] = {
            "spec": mod.spec(),
            "params": [[k, list(v.shape)] for k, v in params],
        }
        for k, v in params:
            arrays[f"{name}/{k}"] = v
    for name, opt in (optimizers or {}).items():
        manifest["optimizers"].append(name)
        for k, v in opt.state_arrays().items():
            arrays[f"opt:{name}/{k}"] = v
    arrays["__manifest__"] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` without touching any module."""
    try:
        with np.load(str(path), allow_pickle=False) as data:
            arrays = {k: data[k] for k in data.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__manifest__" not in arrays:
        raise CheckpointError(f"{path} is not a phototune checkpoint")
    manifest = json.loads(arrays.pop("__manifest__").tobytes().decode())
    if manifest.get("format") != CHECKPOINT_FORMAT or manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')} v{manifest.get('version')}")
    return manifest, arrays


def load_checkpoint(path, modules: dict, optimizers: dict | None = None) -> dict:
    """Load weights into existing modules, rejecting any spec or shape mismatch.

    Returns the stored ``meta`` dictionary.
    """
    manifest, arrays = read_checkpoint(path)
    for name, mod in modules.items():
        entry = manifest["modules"].get(name)
        if entry is None:
            raise CheckpointError(f"checkpoint has no module {name!r}")
        if json.loads(json.dumps(mod.spec())) != entry["spec"]:
            raise CheckpointError(f"architecture mismatch for module {name!r}")
        for k, v in mod.parameters():
            src = arrays.get(f"{name}/{k}")
            if src is None or src.shape != v.shape:
                got = None if src is None else src.shape
                raise CheckpointError(f"{name}/{k}: expected shape {v.shape}, found {got}")
        for k, v in mod.parameters():
            v[...] = arrays[f"{name}/{k}"]
    for name, opt in (optimizers or {}).items():
        prefix = f"opt:{name}/"
        state = {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}
        if not state:
            raise CheckpointError(f"checkpoint has no optimizer state {name!r}")
        opt.load_state_arrays(state)
    return manifest["meta"]
