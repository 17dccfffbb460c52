"""Goal-conditioned TD3 for pipeline tuning.

An episode starts from the unedited input ``I_0``.  At every step the agent
outputs a complete slider vector ``a_t`` and the environment renders
``I_{t+1} = pipeline(I_0, a_t)``; the reward is the PSNR gain towards the goal
(or the style-score gain for stylization).  Episodes end after ``max_steps``
actions, or early if a render's mean intensity leaves ``intensity_bounds``, in
which case that last transition is dropped.

Two encoder modes are supported.  ``"trained"`` back-propagates the critic
loss into the whole state encoder; observations are re-rendered from
``(pair, previous action)`` at update time because the 24-channel encoder
input is too large to keep in the buffer.  ``"frozen"`` keeps the convolutional
part at its seeded initialisation and caches its 512-d output per transition,
so an update only touches the MLPs and the two input projections.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .features import (
    F_D_DIM,
    HISTORY_LEN,
    POLICY_SIZE,
    STATE_DIM,
    GoalFeatures,
    History,
    Observation,
    StateEncoder,
    prepare_observations,
    rms_distance,
)
from .image import resize_for_policy
from .nn import Adam, CheckpointError, StateError, load_checkpoint, mlp, read_checkpoint, save_checkpoint
from .pipeline import N_PARAMS, apply_pipeline
from .rewards import StyleFeatureExtractor, StyleWeights, finishing_reward, stylization_reward
from .stats import psnr

__all__ = [
    "TD3Config",
    "Transition",
    "ReplayBuffer",
    "TD3Agent",
    "Episode",
    "TrainingHalted",
    "compute_td_target",
    "td3_update",
    "ema_update",
    "rollout_episode",
    "make_reward_fn",
    "train",
    "evaluate_policy",
    "bundled_checkpoint",
]

BUNDLED_CHECKPOINT = "td3_finishing.npz"


def bundled_checkpoint() -> str:
    """Path of the finishing policy that ships inside the package."""
    path = resources.files("phototune") / "data" / BUNDLED_CHECKPOINT
    if not path.is_file():
        raise FileNotFoundError(f"bundled checkpoint {BUNDLED_CHECKPOINT} is not installed")
    return str(path)

log = logging.getLogger(__name__)

HIST_VEC = HISTORY_LEN * (N_PARAMS + 1)


class TrainingHalted(RuntimeError):
    pass


@dataclass
class TD3Config:
    gamma: float = 0.9
    ema_rho: float = 0.99
    explore_sigma: float = 0.1
    target_noise_sigma: float = 0.2
    target_noise_clip: float = 0.5
    policy_delay: int = 2
    batch_size: int = 64
    lr_policy: float = 1e-4
    lr_q: float = 2e-4
    max_steps: int = 10
    buffer_capacity: int = 100_000
    warmup_random_steps: int = 1000
    intensity_bounds: tuple = (0.02, 0.98)
    action_bounds: tuple = (-1.0, 1.0)
    hidden: int = 512
    mlp_layers: int = 4
    encoder_mode: str = "trained"
    dtype: str = "float64"
    active_params: tuple = tuple(range(N_PARAMS))
    updates_per_step: float = 1.0
    eval_every: int = 100
    eval_episodes: int = 20

    def __post_init__(self):
        self.intensity_bounds = tuple(self.intensity_bounds)
        self.action_bounds = tuple(self.action_bounds)
        self.active_params = tuple(int(i) for i in self.active_params)
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if not 0 <= self.ema_rho < 1 and self.ema_rho != 1.0:
            raise ValueError("ema_rho must be in [0, 1)")
        if min(self.explore_sigma, self.target_noise_sigma, self.target_noise_clip) < 0:
            raise ValueError("noise scales must be nonnegative")
        if self.policy_delay < 1:
            raise ValueError("policy_delay must be >= 1")
        if self.encoder_mode not in ("trained", "frozen"):
            raise ValueError(f"unknown encoder_mode {self.encoder_mode!r}")
        if self.dtype not in ("float64", "float32"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")
        if not self.active_params or len(set(self.active_params)) != len(self.active_params):
            raise ValueError("active_params must be distinct slider indices")

    @property
    def action_dim(self) -> int:
        return len(self.active_params)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "TD3Config":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def full_params(self, action) -> np.ndarray:
        """Embed an action over the active sliders into a 9-slider vector."""
        p = np.zeros(N_PARAMS)
        p[list(self.active_params)] = action
        return p


@dataclass
class Transition:
    """One buffered step; observations are stored as encoder inputs."""

    obs: dict
    action: np.ndarray
    reward: float
    next_obs: dict
    done: bool


# ---------------------------------------------------------------------------
# replay buffer


class ReplayBuffer:
    """Fixed-capacity ring buffer; the oldest transition is overwritten first."""

    def __init__(self, capacity: int, dtype=np.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dtype = dtype
        self._data = None
        self._next = 0
        self.size = 0
        self.added = 0
        self.discarded_aborts = 0

    def __len__(self):
        return self.size

    def _allocate(self, row: dict) -> None:
        self._data = {}
        for k, v in row.items():
            v = np.asarray(v)
            dt = v.dtype if v.dtype.kind in "iub" else self.dtype
            self._data[k] = np.zeros((self.capacity,) + v.shape, dtype=dt)

    def add(self, tr: Transition) -> None:
        row = {f"obs.{k}": v for k, v in tr.obs.items() if not k.startswith("_")}
        row.update({f"next.{k}": v for k, v in tr.next_obs.items() if not k.startswith("_")})
        row["action"] = np.asarray(tr.action, dtype=np.float64)
        row["reward"] = np.float64(tr.reward)
        row["done"] = np.float64(tr.done)
        if self._data is None:
            self._allocate(row)
        if set(row) != set(self._data):
            raise ValueError(f"transition fields {sorted(row)} do not match buffer fields {sorted(self._data)}")
        i = self._next
        for k, v in row.items():
            self._data[k][i] = v
        self._next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def sample(self, batch_size: int, rng) -> dict:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return self.take(idx)

    def take(self, idx) -> dict:
        return {k: v[idx] for k, v in self._data.items()}

    def oldest_index(self) -> int:
        return self._next if self.size == self.capacity else 0


# ---------------------------------------------------------------------------
# agent


def compute_td_target(rewards, dones, q1_targ, q2_targ, gamma: float) -> np.ndarray:
    """``r + gamma (1 - d) min(Q1', Q2')`` elementwise."""
    rewards = np.asarray(rewards, dtype=np.float64)
    dones = np.asarray(dones, dtype=np.float64)
    return rewards + gamma * (1.0 - dones) * np.minimum(q1_targ, q2_targ)


def ema_update(target, online, rho: float) -> None:
    """``target <- rho target + (1 - rho) online`` for every parameter."""
    for (_, t), (_, o) in zip(target.parameters(), online.parameters()):
        t *= rho
        t += (1.0 - rho) * o


class TD3Agent:
    """Shared state encoder, deterministic policy, twin critics and their targets."""

    def __init__(self, cfg: TD3Config, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        h, n_a = cfg.hidden, cfg.action_dim
        sizes = [h] * (cfg.mlp_layers - 1)
        self.encoder = StateEncoder(rng)
        self.policy = mlp([STATE_DIM, *sizes, n_a], rng, out_activation="tanh")
        self.q1 = mlp([STATE_DIM + n_a, *sizes, 1], rng)
        self.q2 = mlp([STATE_DIM + n_a, *sizes, 1], rng)
        self.policy_targ = mlp([STATE_DIM, *sizes, n_a], rng, out_activation="tanh")
        self.q1_targ = mlp([STATE_DIM + n_a, *sizes, 1], rng)
        self.q2_targ = mlp([STATE_DIM + n_a, *sizes, 1], rng)
        self.dtype = np.dtype(cfg.dtype).type
        for net in self._nets().values():
            net.astype(self.dtype)
        self.policy_targ.copy_from(self.policy)
        self.q1_targ.copy_from(self.q1)
        self.q2_targ.copy_from(self.q2)
        enc_params = self.encoder.parameters()
        if cfg.encoder_mode == "frozen":
            enc_params = [(k, v) for k, v in enc_params if not k.startswith("dual.")]
        self._enc_trainable = [v for _, v in enc_params]
        self.opt_policy = Adam(self.policy.parameters(), lr=cfg.lr_policy)
        self.opt_q1 = Adam(self.q1.parameters(), lr=cfg.lr_q)
        self.opt_q2 = Adam(self.q2.parameters(), lr=cfg.lr_q)
        self.opt_encoder = Adam(self._enc_trainable, lr=cfg.lr_q)
        self.update_count = 0
        self.pixel_source = None

    def _nets(self) -> dict:
        return {
            "encoder": self.encoder,
            "policy": self.policy,
            "q1": self.q1,
            "q2": self.q2,
            "policy_targ": self.policy_targ,
            "q1_targ": self.q1_targ,
            "q2_targ": self.q2_targ,
        }

    def _optimizers(self) -> dict:
        return {"policy": self.opt_policy, "q1": self.opt_q1, "q2": self.opt_q2, "encoder": self.opt_encoder}

    # -- state ----------------------------------------------------------------

    def observe(self, current64, goal: GoalFeatures, history: History, pair: int = -1, params=None) -> dict:
        """Encoder inputs for one step.

        Keys starting with ``_`` are transient and never reach the buffer.  In
        trained-encoder mode the buffer keeps ``(pair, params)`` instead of
        the 24-channel pixels, and :attr:`pixel_source` re-renders them.
        """
        obs = prepare_observations(current64[None], goal, history.vector()[None])
        rec = {"hists": obs.hists[0], "stats": obs.stats[0], "history": obs.history[0]}
        if self.cfg.encoder_mode == "frozen":
            rec["fd"] = self.encoder.dual.forward(obs.pixels.astype(self.dtype))[0]
            self.encoder.dual.clear_cache()
        else:
            rec["_pixels"] = obs.pixels[0]
            rec["pair"] = np.int64(pair)
            rec["params"] = np.zeros(N_PARAMS) if params is None else np.asarray(params, dtype=np.float64)
        return rec

    def encode(self, obs: Observation) -> np.ndarray:
        """``(N, 616)`` states; uses cached conv features when ``obs.fd`` is set."""
        fd = getattr(obs, "fd", None)
        enc = self.encoder
        dt = self.dtype
        if fd is None:
            f_d = enc.dual.forward(obs.pixels.astype(dt, copy=False))
        else:
            f_d = fd.astype(dt, copy=False)
        return enc.state(f_d, obs.hists, obs.stats, obs.history)

    def _encoder_backward(self, grad, trained_conv: bool) -> None:
        enc = self.encoder
        if trained_conv:
            enc.dual.backward(grad[:, :F_D_DIM])
        enc.stats_proj.backward(grad[:, F_D_DIM : F_D_DIM + 64])
        enc.hist_proj.backward(grad[:, F_D_DIM + 72 :])

    def _encoder_grads(self) -> list:
        grads = []
        if self.cfg.encoder_mode == "trained":
            grads.extend(self.encoder.dual.gradients())
        grads.extend(self.encoder.stats_proj.gradients())
        grads.extend(self.encoder.hist_proj.gradients())
        return grads

    def state_from_record(self, rec: dict) -> np.ndarray:
        obs = Observation(
            pixels=rec["_pixels"][None] if "_pixels" in rec else None,
            hists=np.asarray(rec["hists"])[None],
            stats=np.asarray(rec["stats"])[None],
            history=np.asarray(rec["history"])[None],
            fd=np.asarray(rec["fd"])[None] if "fd" in rec else None,
        )
        s = self.encode(obs)[0]
        self.encoder.clear_cache()
        return s

    # -- acting ---------------------------------------------------------------

    def select_action(self, state, mode: str = "greedy", rng=None, sigma: float | None = None) -> np.ndarray:
        """Greedy, exploratory (Gaussian) or target-smoothed (clipped Gaussian) action."""
        lo, hi = self.cfg.action_bounds
        single = np.ndim(state) == 1
        state = np.atleast_2d(np.asarray(state, dtype=self.dtype))
        if mode == "target":
            mu = self.policy_targ.forward(state)
            sig = self.cfg.target_noise_sigma if sigma is None else sigma
            c = self.cfg.target_noise_clip
            noise = np.clip(rng.normal(0.0, sig, size=mu.shape), -c, c) if sig > 0 else 0.0
            out = np.clip(mu + noise, lo, hi)
        else:
            mu = self.policy.forward(state)
            if mode == "explore":
                sig = self.cfg.explore_sigma if sigma is None else sigma
                out = np.clip(mu + (rng.normal(0.0, sig, size=mu.shape) if sig > 0 else 0.0), lo, hi)
            elif mode == "greedy":
                out = np.clip(mu, lo, hi)
            else:
                raise ValueError(f"unknown action mode {mode!r}")
        out = np.asarray(out, dtype=np.float64)
        return out[0] if single else out

    # -- learning -------------------------------------------------------------

    def td_targets(self, batch: dict, rng) -> np.ndarray:
        next_obs = self._batch_obs(batch, "next")
        s_next = self.encode(next_obs)
        a_next = self.select_action(s_next, "target", rng)
        a_next = a_next.astype(self.dtype)
        x = np.concatenate([s_next, a_next], axis=1)
        q1t = self.q1_targ.forward(x)[:, 0]
        q2t = self.q2_targ.forward(x)[:, 0]
        return compute_td_target(batch["reward"], batch["done"], q1t, q2t, self.cfg.gamma)

    def _batch_obs(self, batch: dict, prefix: str) -> Observation:
        fd = batch.get(f"{prefix}.fd")
        pixels = None
        if fd is None:
            if self.pixel_source is None:
                raise StateError("trained-encoder updates need a pixel_source to re-render observations")
            pixels = self.pixel_source(batch[f"{prefix}.pair"], batch[f"{prefix}.params"])
        return Observation(
            pixels=pixels,
            hists=batch[f"{prefix}.hists"],
            stats=batch[f"{prefix}.stats"],
            history=batch[f"{prefix}.history"],
            fd=fd,
        )

    def update(self, batch: dict, rng, step_index: int | None = None) -> dict:
        """One TD3 step: both critics always, policy and targets every ``policy_delay`` calls."""
        cfg = self.cfg
        step_index = self.update_count if step_index is None else step_index
        y = self.td_targets(batch, rng).astype(self.dtype)
        n = y.shape[0]
        obs = self._batch_obs(batch, "obs")
        s = self.encode(obs)
        a = np.asarray(batch["action"], dtype=self.dtype)
        x = np.concatenate([s, a], axis=1)
        losses = {}
        grad_s = np.zeros_like(s)
        for name, q in (("q1", self.q1), ("q2", self.q2)):
            pred = q.forward(x)[:, 0]
            err = pred - y
            loss = float(np.mean(err * err))
            if not math.isfinite(loss):
                raise TrainingHalted(f"non-finite {name} loss at update {step_index}")
            losses[f"{name}_loss"] = loss
            gx = q.backward((2.0 * err / n)[:, None].astype(self.dtype))
            grad_s += gx[:, :STATE_DIM]
        trained_conv = cfg.encoder_mode == "trained"
        self._encoder_backward(grad_s, trained_conv)
        self.opt_q1.step(self.q1.gradients())
        self.opt_q2.step(self.q2.gradients())
        self.opt_encoder.step(self._encoder_grads())

        losses["policy_loss"] = None
        if step_index % cfg.policy_delay == 0:
            s = self.encode(obs)
            a_pi = self.policy.forward(s)
            q = self.q1.forward(np.concatenate([s, a_pi], axis=1))
            losses["policy_loss"] = float(-np.mean(q))
            gx = self.q1.backward(np.full_like(q, -1.0 / n), param_grads=False)
            self.policy.backward(gx[:, STATE_DIM:])
            self.opt_policy.step(self.policy.gradients())
            ema_update(self.q1_targ, self.q1, cfg.ema_rho)
            ema_update(self.q2_targ, self.q2, cfg.ema_rho)
            ema_update(self.policy_targ, self.policy, cfg.ema_rho)
        self.update_count += 1
        for net in self._nets().values():
            net.clear_cache()
        return losses

    # -- persistence ----------------------------------------------------------

    def save(self, path, meta: dict | None = None, inference_only: bool = False) -> None:
        """Write a checkpoint; ``inference_only`` keeps just the encoder and policy."""
        info = {
            "td3_config": self.cfg.to_dict(),
            "update_count": self.update_count,
            "inference_only": inference_only,
        }
        info.update(meta or {})
        if inference_only:
            save_checkpoint(path, {"encoder": self.encoder, "policy": self.policy}, None, info)
        else:
            save_checkpoint(path, self._nets(), self._optimizers(), info)

    @classmethod
    def load(cls, path, with_optimizers: bool = True):
        """Rebuild an agent from a checkpoint; returns ``(agent, meta)``.

        Inference-only checkpoints restore the encoder and policy; the critics
        stay at their seeded initial values and cannot resume training.
        """
        manifest, _ = read_checkpoint(path)
        meta = manifest["meta"]
        if "td3_config" not in meta:
            raise CheckpointError(f"{path} is not an agent checkpoint")
        agent = cls(TD3Config.from_dict(meta["td3_config"]))
        if meta.get("inference_only"):
            meta = load_checkpoint(path, {"encoder": agent.encoder, "policy": agent.policy})
            agent.policy_targ.copy_from(agent.policy)
        else:
            meta = load_checkpoint(path, agent._nets(), agent._optimizers() if with_optimizers else None)
        agent.update_count = int(meta.get("update_count", 0))
        return agent, meta


def td3_update(buffer: ReplayBuffer, agent: TD3Agent, rng, step_index: int | None = None) -> dict:
    """Sample a batch and update; a no-op reporting ``status`` when the buffer is too small."""
    if len(buffer) < agent.cfg.batch_size:
        log.warning("buffer holds %d < %d transitions; skipping update", len(buffer), agent.cfg.batch_size)
        return {"status": "insufficient_buffer", "q1_loss": None, "q2_loss": None, "policy_loss": None}
    out = agent.update(buffer.sample(agent.cfg.batch_size, rng), rng, step_index)
    out["status"] = "ok"
    return out


# ---------------------------------------------------------------------------
# episodes


def make_reward_fn(kind: str = "finishing", fx: StyleFeatureExtractor | None = None, weights: StyleWeights = StyleWeights()):
    if kind == "finishing":
        return finishing_reward
    if kind == "stylization":
        fx = fx or StyleFeatureExtractor()
        return lambda i_t, i_next, goal: stylization_reward(i_t, i_next, goal, fx, weights)
    raise ValueError(f"unknown reward kind {kind!r}")


@dataclass
class Episode:
    transitions: list = field(default_factory=list)
    params: list = field(default_factory=list)
    psnr_db: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    queries: int = 0
    aborted: bool = False
    initial_psnr_db: float = 0.0

    @property
    def final_psnr_db(self) -> float:
        return self.psnr_db[-1] if self.psnr_db else self.initial_psnr_db


def rollout_episode(
    input_img,
    goal_img,
    agent: TD3Agent,
    pipeline=apply_pipeline,
    reward_fn=finishing_reward,
    cfg: TD3Config | None = None,
    rng=None,
    mode: str = "explore",
    goal_features: GoalFeatures | None = None,
    pair: int = -1,
) -> Episode:
    """Run one episode at policy resolution (inputs must already be 64x64).

    ``mode`` is ``"explore"``, ``"greedy"`` or ``"random"`` (uniform warm-up
    actions).  Every pipeline call is a query.
    """
    cfg = cfg or agent.cfg
    rng = np.random.default_rng(rng)
    goal_features = goal_features or GoalFeatures.from_image(goal_img)
    lo_i, hi_i = cfg.intensity_bounds
    lo_a, hi_a = cfg.action_bounds
    ep = Episode()
    cur = np.asarray(input_img, dtype=np.float64)
    ep.initial_psnr_db = psnr(cur, goal_img)
    history = History()
    rec = agent.observe(cur, goal_features, history, pair)
    for t in range(cfg.max_steps):
        if mode == "random":
            action = rng.uniform(lo_a, hi_a, size=cfg.action_dim)
        else:
            action = agent.select_action(agent.state_from_record(rec), mode, rng)
        params = cfg.full_params(action)
        nxt = pipeline(input_img, params)
        ep.queries += 1
        if not lo_i <= float(np.mean(nxt)) <= hi_i:
            ep.aborted = True
            break
        r = reward_fn(cur, nxt, goal_img)
        history.push(action, rms_distance(nxt, goal_img))
        next_rec = agent.observe(nxt, goal_features, history, pair, params)
        done = t == cfg.max_steps - 1
        ep.transitions.append(Transition(rec, action, r, next_rec, done))
        ep.params.append(params)
        ep.psnr_db.append(psnr(nxt, goal_img))
        ep.rewards.append(r)
        cur, rec = nxt, next_rec
    return ep


def evaluate_policy(agent: TD3Agent, pairs, pipeline=apply_pipeline, reward_fn=finishing_reward) -> float:
    """Mean final-step PSNR of greedy rollouts over ``(input64, goal64)`` pairs."""
    finals = []
    for inp, goal in pairs:
        ep = rollout_episode(inp, goal, agent, pipeline, reward_fn, mode="greedy")
        finals.append(ep.final_psnr_db)
    return float(np.mean(finals)) if finals else float("nan")


def _policy_pairs(pairs) -> list:
    out = []
    for p in pairs:
        inp, goal = (p.input, p.goal) if hasattr(p, "input") else p
        if inp.shape[:2] != (POLICY_SIZE, POLICY_SIZE):
            inp, goal = resize_for_policy(inp), resize_for_policy(goal)
        out.append((inp, goal))
    return out


def _pixel_source(pairs, goal_feats, pipeline):
    def render(idx, params):
        idx = np.asarray(idx, dtype=np.int64)
        cur = np.stack([pipeline(pairs[i][0], p) for i, p in zip(idx, np.asarray(params, dtype=np.float64))])
        goal = GoalFeatures(
            image=np.stack([goal_feats[i].image for i in idx]),
            bands=np.stack([goal_feats[i].bands for i in idx]),
            hist=np.stack([goal_feats[i].hist for i in idx]),
            stats=np.stack([goal_feats[i].stats for i in idx]),
        )
        return prepare_observations(cur, goal, np.zeros((len(idx), HIST_VEC))).pixels

    return render


def train(
    train_pairs,
    cfg: TD3Config,
    episodes: int,
    reward_kind: str = "finishing",
    seed: int = 0,
    eval_pairs=None,
    log_path=None,
    checkpoint_path=None,
    resume_from=None,
    pipeline=apply_pipeline,
    stop_at_psnr: float | None = None,
    dump_dir=None,
    progress=None,
    checkpoint_every: int = 0,
):
    """Train a TD3 agent; returns ``(agent, log_records)``.

    Pairs may be :class:`~phototune.data.ScenePair` objects or ``(input, goal)``
    tuples; both images are squashed to policy resolution.  With
    ``stop_at_psnr`` training stops once a periodic evaluation reaches it.
    The replay buffer is not checkpointed; a resumed run refills it.
    """
    if not train_pairs:
        raise ValueError("training set is empty")
    train_pairs = _policy_pairs(train_pairs)
    eval_pairs = _policy_pairs(eval_pairs) if eval_pairs else []
    goal_feats = [GoalFeatures.from_image(g) for _, g in train_pairs]
    reward_fn = make_reward_fn(reward_kind)

    rng = np.random.default_rng(seed)
    start_episode = 0
    total_steps = 0
    if resume_from is not None:
        agent, meta = TD3Agent.load(resume_from)
        if meta.get("inference_only"):
            raise CheckpointError(f"{resume_from} holds only a policy and cannot resume training")
        cfg = agent.cfg
        start_episode = int(meta.get("episode", 0))
        total_steps = int(meta.get("total_steps", 0))
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]
    else:
        agent = TD3Agent(cfg, seed=seed)
    buffer = ReplayBuffer(cfg.buffer_capacity, dtype=np.float64 if cfg.dtype == "float64" else np.float32)
    agent.pixel_source = _pixel_source(train_pairs, goal_feats, pipeline)
    records = []
    log_fh = open(log_path, "a") if log_path else None

    def save():
        agent.save(
            checkpoint_path,
            {
                "episode": records[-1]["episode"] + 1 if records else start_episode,
                "total_steps": total_steps,
                "rng_state": rng.bit_generator.state,
                "reward_kind": reward_kind,
                "seed": seed,
            },
        )

    update_debt = 0.0
    try:
        for episode in range(start_episode, start_episode + episodes):
            k = int(rng.integers(len(train_pairs)))
            inp, goal = train_pairs[k]
            mode = "random" if total_steps < cfg.warmup_random_steps else "explore"
            ep = rollout_episode(inp, goal, agent, pipeline, reward_fn, cfg, rng, mode, goal_feats[k], pair=k)
            for tr in ep.transitions:
                buffer.add(tr)
            buffer.discarded_aborts += int(ep.aborted)
            total_steps += ep.queries
            losses = {"q1_loss": [], "q2_loss": [], "policy_loss": []}
            if total_steps >= cfg.warmup_random_steps and len(buffer) >= cfg.batch_size:
                update_debt += ep.queries * cfg.updates_per_step
                while update_debt >= 1.0:
                    update_debt -= 1.0
                    batch = buffer.sample(cfg.batch_size, rng)
                    try:
                        out = agent.update(batch, rng)
                    except (TrainingHalted, FloatingPointError) as exc:
                        if dump_dir is not None:
                            Path(dump_dir).mkdir(parents=True, exist_ok=True)
                            np.savez(Path(dump_dir) / f"halt_update{agent.update_count}.npz", **batch)
                        raise TrainingHalted(f"training halted at episode {episode}: {exc}") from exc
                    for key, v in out.items():
                        if v is not None:
                            losses[key].append(v)
            rec = {
                "episode": episode,
                "steps": len(ep.transitions),
                "final_psnr_db": float(ep.final_psnr_db),
                "q1_loss": float(np.mean(losses["q1_loss"])) if losses["q1_loss"] else None,
                "q2_loss": float(np.mean(losses["q2_loss"])) if losses["q2_loss"] else None,
                "policy_loss": float(np.mean(losses["policy_loss"])) if losses["policy_loss"] else None,
                "buffer_size": len(buffer),
                "total_steps": total_steps,
                "aborted": ep.aborted,
            }
            if eval_pairs and cfg.eval_every > 0 and (episode + 1) % cfg.eval_every == 0:
                rec["eval_psnr_db"] = evaluate_policy(agent, eval_pairs[: cfg.eval_episodes], pipeline, reward_fn)
            records.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if progress is not None:
                progress(rec)
            if checkpoint_path is not None and checkpoint_every and (episode + 1) % checkpoint_every == 0:
                save()
            if stop_at_psnr is not None and rec.get("eval_psnr_db", -np.inf) >= stop_at_psnr:
                break
    finally:
        if log_fh:
            log_fh.close()
    if checkpoint_path is not None:
        save()
    return agent, records
