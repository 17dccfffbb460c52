"""State representation for the tuning policy.

The state is ``concat(f_d, f_s, f_h)`` with

* ``f_d`` (512): dual-path CNN features of current/goal images and their
  Laplacian bands, fused as ``relu(global + local[x, y])`` and pooled to 4x4x32;
* ``f_s`` (72): a 64-d projection of both RGB histograms followed by the
  scalar statistics of the current and the goal image;
* ``f_h`` (32): a projection of the zero-padded action/distance history.

Everything non-trainable (pyramids, histograms, statistics) is computed by
:func:`prepare_observations`; :class:`StateEncoder` holds the trainable part.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import laplacian_pyramid, resize_bilinear
from .nn import AvgPool2d, Conv2d, GlobalAvgPool, Linear, ReLU, Sequential, ShapeError
from .pipeline import N_PARAMS
from .stats import histogram, scalar_stats_array

__all__ = [
    "POLICY_SIZE",
    "PYRAMID_LEVELS",
    "HISTORY_LEN",
    "STATE_DIM",
    "F_D_DIM",
    "F_S_DIM",
    "F_H_DIM",
    "History",
    "Observation",
    "GoalFeatures",
    "DualPathEncoder",
    "StateEncoder",
    "pyramid_channels",
    "prepare_observations",
    "encode_dual_path",
    "photo_stats_features",
    "history_embedding",
    "assemble_state",
    "rms_distance",
]

POLICY_SIZE = 64
PYRAMID_LEVELS = 3
HISTORY_LEN = 10
WIDTH = 32
POOL_GRID = 4
F_D_DIM = POOL_GRID * POOL_GRID * WIDTH
F_S_DIM = 64 + 8
F_H_DIM = 32
STATE_DIM = F_D_DIM + F_S_DIM + F_H_DIM
IN_CHANNELS = 6 + 2 * 3 * PYRAMID_LEVELS
HIST_IN = 2 * 3 * 32


def rms_distance(a, b) -> float:
    """l2 image distance normalised by the number of samples."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return float(np.sqrt(np.mean(d * d)))


@dataclass
class History:
    """Past actions and image-to-goal distances, newest first once vectorised."""

    actions: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    max_len: int = HISTORY_LEN

    def __len__(self):
        return len(self.actions)

    def push(self, action, distance: float) -> None:
        if len(self.actions) >= self.max_len:
            raise ValueError(f"history already holds {self.max_len} entries")
        self.actions.append(np.asarray(action, dtype=np.float64).copy())
        self.distances.append(float(distance))

    def as_arrays(self):
        """``(actions (L, 9), distances (L,))`` zero-padded, most recent entry first."""
        acts = np.zeros((self.max_len, N_PARAMS))
        dists = np.zeros(self.max_len)
        for i, (a, d) in enumerate(zip(reversed(self.actions), reversed(self.distances))):
            acts[i, : a.shape[0]] = a
            dists[i] = d
        return acts, dists

    def vector(self) -> np.ndarray:
        acts, dists = self.as_arrays()
        return np.concatenate([acts, dists[:, None]], axis=1).reshape(-1)


def pyramid_channels(img) -> np.ndarray:
    """Laplacian bands of ``(..., 64, 64, 3)`` images, upsampled and stacked to 9 channels."""
    img = np.asarray(img, dtype=np.float64)
    pyr = laplacian_pyramid(img, PYRAMID_LEVELS)
    h, w = img.shape[-3], img.shape[-2]
    return np.concatenate([resize_bilinear(b, h, w) for b in pyr.bands], axis=-1)


@dataclass
class GoalFeatures:
    """Goal-side inputs, computed once per goal image."""

    image: np.ndarray
    bands: np.ndarray
    hist: np.ndarray
    stats: np.ndarray

    @classmethod
    def from_image(cls, goal) -> "GoalFeatures":
        goal = _check_policy_image(goal)
        return cls(
            image=goal,
            bands=pyramid_channels(goal),
            hist=histogram(goal, "RGB").reshape(goal.shape[:-3] + (-1,)),
            stats=scalar_stats_array(goal),
        )


@dataclass
class Observation:
    """Batched encoder inputs; leading axis is the batch."""

    pixels: np.ndarray  # (N, 64, 64, 24)
    hists: np.ndarray  # (N, 192)
    stats: np.ndarray  # (N, 8)
    history: np.ndarray  # (N, 100)
    fd: np.ndarray | None = None  # (N, 512) cached conv features, when frozen

    def __len__(self):
        return self.hists.shape[0]


def _check_policy_image(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[-3:] != (POLICY_SIZE, POLICY_SIZE, 3):
        raise ShapeError(f"policy images must be {POLICY_SIZE}x{POLICY_SIZE}x3, got {img.shape}")
    return img


def prepare_observations(current, goal, history) -> Observation:
    """Build encoder inputs for a batch.

    ``current``: ``(N, 64, 64, 3)``; ``goal``: array of the same shape or a
    batched :class:`GoalFeatures`; ``history``: ``(N, 100)`` vectors.
    """
    current = _check_policy_image(current)
    if current.ndim == 3:
        current = current[None]
    n = current.shape[0]
    if not isinstance(goal, GoalFeatures):
        g = np.asarray(goal, dtype=np.float64)
        goal = GoalFeatures.from_image(g if g.ndim == 4 else g[None])
    if goal.image.ndim == 3 or goal.image.shape[0] != n:
        goal = GoalFeatures(
            image=np.broadcast_to(goal.image.reshape(-1, POLICY_SIZE, POLICY_SIZE, 3), current.shape),
            bands=np.broadcast_to(goal.bands.reshape((-1,) + goal.bands.shape[-3:]), (n,) + goal.bands.shape[-3:]),
            hist=np.broadcast_to(goal.hist.reshape(-1, goal.hist.shape[-1]), (n, goal.hist.shape[-1])),
            stats=np.broadcast_to(goal.stats.reshape(-1, 4), (n, 4)),
        )
    cur_hist = histogram(current, "RGB").reshape(n, -1)
    pixels = np.concatenate([current, goal.image, pyramid_channels(current), goal.bands], axis=-1)
    return Observation(
        pixels=pixels,
        hists=np.concatenate([cur_hist, goal.hist], axis=-1),
        stats=np.concatenate([scalar_stats_array(current), goal.stats], axis=-1),
        history=np.asarray(history, dtype=np.float64).reshape(n, -1),
    )


class DualPathEncoder:
    """Stride-2 stem, a resolution-preserving local path and a global summary path."""

    def __init__(self, rng=None, in_channels: int = IN_CHANNELS, width: int = WIDTH):
        rng = np.random.default_rng(rng)
        self.stem = Sequential([Conv2d(in_channels, width, 3, 2, 1, rng), ReLU()])
        self.local = Sequential([Conv2d(width, width, 3, 1, 1, rng), ReLU(), Conv2d(width, width, 3, 1, 1, rng)])
        self.glob = Sequential(
            [
                Conv2d(width, width, 3, 2, 1, rng),
                ReLU(),
                GlobalAvgPool(),
                Linear(width, 64, rng),
                ReLU(),
                Linear(64, 64, rng),
                ReLU(),
                Linear(64, width, rng),
            ]
        )
        self.fuse_act = ReLU()
        self.pool = AvgPool2d(POLICY_SIZE // 2 // POOL_GRID)
        self.width = width

    def _parts(self):
        return (("stem", self.stem), ("local", self.local), ("global", self.glob))

    def forward(self, x):
        if x.ndim != 4 or x.shape[1:3] != (POLICY_SIZE, POLICY_SIZE):
            raise ShapeError(f"encoder expects (N, {POLICY_SIZE}, {POLICY_SIZE}, C) input, got {x.shape}")
        s = self.stem.forward(x)
        loc = self.local.forward(s)
        g = self.glob.forward(s)
        fused = self.fuse_act.forward(loc + g[:, None, None, :])
        return self.pool.forward(fused).reshape(x.shape[0], -1)

    def backward(self, grad, param_grads=True):
        n = grad.shape[0]
        gf = self.pool.backward(grad.reshape(n, POOL_GRID, POOL_GRID, self.width))
        gf = self.fuse_act.backward(gf)
        gs = self.local.backward(gf, param_grads)
        gs = gs + self.glob.backward(gf.sum(axis=(1, 2)), param_grads)
        return self.stem.backward(gs, param_grads)

    def parameters(self):
        return [(f"{name}.{k}", v) for name, mod in self._parts() for k, v in mod.parameters()]

    def gradients(self):
        return [g for _, mod in self._parts() for g in mod.gradients()]

    def spec(self):
        return {name: mod.spec() for name, mod in self._parts()}

    def astype(self, dtype):
        for _, mod in self._parts():
            mod.astype(dtype)
        return self

    def clear_cache(self):
        for _, mod in self._parts():
            mod.clear_cache()
        self.fuse_act.clear_cache()
        self.pool.clear_cache()


class StateEncoder:
    """Trainable map from an :class:`Observation` batch to ``(N, 616)`` states."""

    def __init__(self, rng=None):
        rng = np.random.default_rng(rng)
        self.dual = DualPathEncoder(rng)
        self.stats_proj = Linear(HIST_IN, 64, rng)
        self.hist_proj = Linear(HISTORY_LEN * (N_PARAMS + 1), F_H_DIM, rng)
        self.dtype = np.float64

    def _parts(self):
        return (
            ("dual", self.dual),
            ("stats_proj", self.stats_proj),
            ("hist_proj", self.hist_proj),
        )

    def state(self, f_d, hists, stats, history) -> np.ndarray:
        """Assemble states from conv features and raw side inputs."""
        dt = self.dtype
        h = self.stats_proj.forward(hists.astype(dt, copy=False))
        f_h = self.hist_proj.forward(history.astype(dt, copy=False))
        return np.concatenate([f_d.astype(dt, copy=False), h, stats.astype(dt, copy=False), f_h], axis=1)

    def forward(self, obs: Observation) -> np.ndarray:
        f_d = self.dual.forward(obs.pixels.astype(self.dtype, copy=False))
        return self.state(f_d, obs.hists, obs.stats, obs.history)

    def backward(self, grad, param_grads=True):
        self.dual.backward(grad[:, :F_D_DIM], param_grads)
        self.stats_proj.backward(grad[:, F_D_DIM : F_D_DIM + 64], param_grads)
        self.hist_proj.backward(grad[:, F_D_DIM + F_S_DIM :], param_grads)

    def parameters(self):
        return [(f"{name}.{k}", v) for name, mod in self._parts() for k, v in mod.parameters()]

    def gradients(self):
        return [g for _, mod in self._parts() for g in mod.gradients()]

    def spec(self):
        return {name: mod.spec() for name, mod in self._parts()}

    def astype(self, dtype):
        for _, mod in self._parts():
            mod.astype(dtype)
        self.dtype = dtype
        return self

    def clear_cache(self):
        for _, mod in self._parts():
            mod.clear_cache()

    def copy_from(self, other: "StateEncoder") -> None:
        for (_, dst), (_, src) in zip(self.parameters(), other.parameters()):
            dst[...] = src


# ---------------------------------------------------------------------------
# single-sample functional forms


def encode_dual_path(current, goal, pyr_cur, pyr_goal, enc: DualPathEncoder) -> np.ndarray:
    current = _check_policy_image(current)
    goal = _check_policy_image(goal)
    if len(pyr_cur.bands) != PYRAMID_LEVELS or len(pyr_goal.bands) != PYRAMID_LEVELS:
        raise ShapeError(f"pyramids must have {PYRAMID_LEVELS} band levels")
    ups = [
        np.concatenate([resize_bilinear(b, POLICY_SIZE, POLICY_SIZE) for b in pyr.bands], axis=-1)
        for pyr in (pyr_cur, pyr_goal)
    ]
    x = np.concatenate([current, goal, ups[0], ups[1]], axis=-1)[None]
    return enc.forward(x)[0]


def photo_stats_features(current, goal, proj: Linear) -> np.ndarray:
    hists = np.concatenate([histogram(current, "RGB").ravel(), histogram(goal, "RGB").ravel()])
    stats = np.concatenate([scalar_stats_array(current), scalar_stats_array(goal)])
    return np.concatenate([proj.forward(hists[None])[0], stats])


def history_embedding(hist: History, proj: Linear) -> np.ndarray:
    return proj.forward(hist.vector()[None])[0]


def assemble_state(f_d, f_s, f_h) -> np.ndarray:
    parts = [np.asarray(f, dtype=np.float64).ravel() for f in (f_d, f_s, f_h)]
    expected = (F_D_DIM, F_S_DIM, F_H_DIM)
    if tuple(p.shape[0] for p in parts) != expected:
        raise ShapeError(f"state components must have lengths {expected}, got {tuple(p.shape[0] for p in parts)}")
    return np.concatenate(parts)
