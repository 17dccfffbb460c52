"""Black-box tuners sharing one contract: every pipeline call is one query.

All tuners return a :class:`TuneResult` whose trajectory has exactly one entry
per pipeline call, so ``query_count == len(trajectory)``.
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import GoalFeatures, History, POLICY_SIZE, rms_distance
from .image import encode, resize_for_policy
from .pipeline import N_PARAMS, apply_pipeline
from .rewards import StyleFeatureExtractor, StyleWeights, style_score
from .stats import psnr

__all__ = [
    "TuneResult",
    "Objective",
    "CMAES",
    "cmaes_minimize",
    "tune_cmaes",
    "tune_random",
    "tune_greedy",
    "tune_rl",
    "dump_trajectory",
    "TUNERS",
]

GREEDY_GRID = 5
GREEDY_MIN_BUDGET = 2 * N_PARAMS


@dataclass
class TuneResult:
    best_params: np.ndarray
    best_value: float
    trajectory: list = field(default_factory=list)  # [(params, value)] per query
    query_count: int = 0
    wall_time: float = 0.0
    method: str = ""
    objective: str = "psnr"

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "objective": self.objective,
            "best_params": [float(v) for v in self.best_params],
            "best_value": _json_float(self.best_value),
            "query_count": int(self.query_count),
            "wall_time": float(self.wall_time),
            "trajectory": [{"params": [float(v) for v in p], "value": _json_float(v)} for p, v in self.trajectory],
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "TuneResult":
        return cls(
            best_params=np.asarray(d["best_params"], dtype=np.float64),
            best_value=float(d["best_value"]),
            trajectory=[(np.asarray(t["params"], dtype=np.float64), float(t["value"])) for t in d["trajectory"]],
            query_count=int(d["query_count"]),
            wall_time=float(d["wall_time"]),
            method=d.get("method", ""),
            objective=d.get("objective", "psnr"),
        )

    def best_so_far(self, maximize: bool | None = None) -> np.ndarray:
        maximize = self.objective == "psnr" if maximize is None else maximize
        vals = np.array([v for _, v in self.trajectory], dtype=np.float64)
        return np.maximum.accumulate(vals) if maximize else np.minimum.accumulate(vals)

    def value_at(self, queries: int) -> float:
        """Best value among the first ``queries`` queries."""
        return float(self.best_so_far()[min(queries, self.query_count) - 1])


def _json_float(v):
    v = float(v)
    return v if math.isfinite(v) else None


class Objective:
    """PSNR to the goal (maximized) or style score (minimized)."""

    def __init__(self, kind: str, goal, fx: StyleFeatureExtractor | None = None, weights: StyleWeights = StyleWeights()):
        if kind not in ("psnr", "style"):
            raise ValueError(f"unknown objective {kind!r}")
        self.kind = kind
        self.goal = np.asarray(goal, dtype=np.float64)
        self.maximize = kind == "psnr"
        if kind == "style":
            self.fx = fx or StyleFeatureExtractor()
            self.weights = weights

    def __call__(self, img) -> float:
        if self.kind == "psnr":
            return psnr(img, self.goal)
        return style_score(img, self.goal, self.fx, self.weights)

    def loss(self, value: float) -> float:
        return -value if self.maximize else value


class _Session:
    """Counts queries, records the trajectory and tracks the best point."""

    def __init__(self, input_img, objective: Objective, pipeline, budget: int):
        self.input = input_img
        self.objective = objective
        self.pipeline = pipeline
        self.budget = budget
        self.trajectory = []
        self.best = (None, math.inf)  # (params, loss)
        self.t0 = time.perf_counter()

    @property
    def remaining(self) -> int:
        return self.budget - len(self.trajectory)

    def render(self, params):
        return self.pipeline(self.input, params)

    def record(self, params, value: float) -> float:
        params = np.array(params, dtype=np.float64)
        self.trajectory.append((params, float(value)))
        loss = self.objective.loss(value)
        # strict improvement keeps the earliest optimum on ties
        if loss < self.best[1]:
            self.best = (params, loss)
        return loss

    def query(self, params) -> float:
        """Render, score, record; returns the loss (lower is better)."""
        if self.remaining <= 0:
            raise RuntimeError("query budget exhausted")
        params = np.clip(np.asarray(params, dtype=np.float64), -1.0, 1.0)
        return self.record(params, self.objective(self.render(params)))

    def result(self, method: str) -> TuneResult:
        params, loss = self.best
        return TuneResult(
            best_params=params,
            best_value=self.objective.loss(loss),
            trajectory=self.trajectory,
            query_count=len(self.trajectory),
            wall_time=time.perf_counter() - self.t0,
            method=method,
            objective=self.objective.kind,
        )


def _objective(objective, goal, fx) -> Objective:
    return objective if isinstance(objective, Objective) else Objective(objective, goal, fx)


# ---------------------------------------------------------------------------
# CMA-ES


class CMAES:
    """(mu/mu_w, lambda)-CMA-ES with cumulative step-size adaptation.

    Weights follow Hansen's tutorial: the best half recombine into the mean
    and, with ``active=True``, the worst half receive negative covariance
    weights.  Candidates are clamped to the box and the clamped points are
    what the update sees.
    """

    def __init__(self, x0, sigma0: float = 0.3, popsize: int = 16, rng=None, bounds=(-1.0, 1.0), active: bool = True):
        self.mean = np.array(x0, dtype=np.float64)
        n = self.n = self.mean.size
        if sigma0 <= 0:
            raise ValueError("sigma0 must be positive")
        if popsize < 2:
            raise ValueError("popsize must be at least 2")
        self.sigma = float(sigma0)
        self.lam = lam = int(popsize)
        self.mu = lam // 2
        raw = math.log((lam + 1) / 2) - np.log(np.arange(1, lam + 1))
        pos, neg = raw[: self.mu], raw[self.mu :]
        self.mueff = pos.sum() ** 2 / np.sum(pos**2)
        self.cc = (4 + self.mueff / n) / (n + 4 + 2 * self.mueff / n)
        self.cs = (self.mueff + 2) / (n + self.mueff + 5)
        self.c1 = 2 / ((n + 1.3) ** 2 + self.mueff)
        self.cmu = min(1 - self.c1, 2 * (0.25 + self.mueff + 1 / self.mueff - 2) / ((n + 2) ** 2 + self.mueff))
        self.damps = 1 + 2 * max(0.0, math.sqrt((self.mueff - 1) / (n + 1)) - 1) + self.cs
        self.chi_n = math.sqrt(n) * (1 - 1 / (4 * n) + 1 / (21 * n * n))
        self.weights = np.zeros(lam)
        self.weights[: self.mu] = pos / pos.sum()
        neg = neg[neg < 0]
        if active and neg.size:
            mueff_neg = neg.sum() ** 2 / np.sum(neg**2)
            scale = min(
                1 + self.c1 / self.cmu,
                1 + 2 * mueff_neg / (self.mueff + 2),
                (1 - self.c1 - self.cmu) / (n * self.cmu),
            )
            self.weights[lam - neg.size :] = scale * neg / np.abs(neg).sum()
        self.C = np.eye(n)
        self.B = np.eye(n)
        self.D = np.ones(n)
        self.p_sigma = np.zeros(n)
        self.p_c = np.zeros(n)
        self.generation = 0
        self.bounds = bounds
        self.rng = np.random.default_rng(rng)
        self.asymmetry_history = []

    def ask(self, count: int | None = None) -> np.ndarray:
        z = self.rng.standard_normal((count or self.lam, self.n))
        x = self.mean + self.sigma * (z * self.D) @ self.B.T
        if self.bounds is not None:
            x = np.clip(x, *self.bounds)
        return x

    def tell(self, xs, losses) -> None:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.shape[0] != self.lam:
            raise ValueError(f"tell needs a full generation of {self.lam} candidates")
        order = np.argsort(np.asarray(losses, dtype=np.float64), kind="stable")
        n, old = self.n, self.mean
        y = (xs[order] - old) / self.sigma
        y_w = self.weights[: self.mu] @ y[: self.mu]
        self.mean = old + self.sigma * y_w
        c_inv_sqrt = self.B @ np.diag(1.0 / self.D) @ self.B.T
        self.p_sigma = (1 - self.cs) * self.p_sigma + math.sqrt(self.cs * (2 - self.cs) * self.mueff) * c_inv_sqrt @ y_w
        self.generation += 1
        ps_norm = np.linalg.norm(self.p_sigma)
        h_sig = ps_norm / math.sqrt(1 - (1 - self.cs) ** (2 * self.generation)) / self.chi_n < 1.4 + 2 / (n + 1)
        self.p_c = (1 - self.cc) * self.p_c + h_sig * math.sqrt(self.cc * (2 - self.cc) * self.mueff) * y_w
        w = self.weights.copy()
        if np.any(w < 0):
            # negative weights act on Mahalanobis-normalised steps
            norms = np.sum((y @ c_inv_sqrt.T) ** 2, axis=1)
            neg = w < 0
            w[neg] *= n / np.maximum(norms[neg], 1e-300)
        rank_mu = (y.T * w) @ y
        delta_h = (1 - h_sig) * self.cc * (2 - self.cc)
        self.C = (
            (1 + self.c1 * delta_h - self.c1 - self.cmu * self.weights.sum()) * self.C
            + self.c1 * np.outer(self.p_c, self.p_c)
            + self.cmu * rank_mu
        )
        self.sigma *= math.exp((self.cs / self.damps) * (ps_norm / self.chi_n - 1))
        self._repair()

    def _repair(self) -> None:
        self.asymmetry_history.append(float(np.max(np.abs(self.C - self.C.T))))
        self.C = 0.5 * (self.C + self.C.T)
        evals, evecs = np.linalg.eigh(self.C)
        if evals.min() < 1e-14:
            evals = np.maximum(evals, 1e-14)
            self.C = (evecs * evals) @ evecs.T
            self.C = 0.5 * (self.C + self.C.T)
        self.B = evecs
        self.D = np.sqrt(evals)


def cmaes_minimize(
    f, x0, sigma0: float = 0.3, budget: int = 5000, popsize: int = 16, seed=0, bounds=(-1.0, 1.0), target: float | None = None, active: bool = True
):
    """Minimize ``f`` directly; returns ``(best_x, best_f, evaluations)``."""
    es = CMAES(x0, sigma0, popsize, seed, bounds, active)
    best_x, best_f, evals = None, math.inf, 0
    while evals < budget:
        xs = es.ask(min(es.lam, budget - evals))
        fs = np.array([f(x) for x in xs])
        evals += len(xs)
        i = int(np.argmin(fs))
        if fs[i] < best_f:
            best_x, best_f = xs[i].copy(), float(fs[i])
        if target is not None and best_f < target:
            break
        if len(xs) == es.lam:
            es.tell(xs, fs)
    return best_x, best_f, evals


def tune_cmaes(
    input_img,
    goal,
    objective="psnr",
    budget: int = 200,
    seed=0,
    popsize: int = 16,
    sigma0: float = 0.3,
    x0=None,
    pipeline=apply_pipeline,
    fx=None,
    active: bool = True,
) -> TuneResult:
    """CMA-ES from the neutral point; a trailing partial generation spends the rest of the budget."""
    if budget < popsize:
        raise ValueError(f"budget {budget} is smaller than one generation ({popsize})")
    obj = _objective(objective, goal, fx)
    sess = _Session(input_img, obj, pipeline, budget)
    es = CMAES(np.zeros(N_PARAMS) if x0 is None else x0, sigma0, popsize, seed, active=active)
    while sess.remaining > 0:
        xs = es.ask(min(es.lam, sess.remaining))
        losses = [sess.query(x) for x in xs]
        if len(xs) == es.lam:
            es.tell(xs, losses)
    res = sess.result("cmaes")
    res.cmaes_state = es
    return res


def tune_random(input_img, goal, objective="psnr", budget: int = 200, rng=None, pipeline=apply_pipeline, fx=None) -> TuneResult:
    """Uniform samples in the slider box; ``rng`` may be any object with ``uniform``."""
    if budget < 1:
        raise ValueError("budget must be at least 1")
    rng = rng if hasattr(rng, "uniform") else np.random.default_rng(rng)
    sess = _Session(input_img, _objective(objective, goal, fx), pipeline, budget)
    for _ in range(budget):
        sess.query(rng.uniform(-1.0, 1.0, size=N_PARAMS))
    return sess.result("random")


def tune_greedy(input_img, goal, objective="psnr", budget: int = 200, step: float = 1.0, x0=None, pipeline=apply_pipeline, fx=None) -> TuneResult:
    """Cyclic coordinate search on a 5-point grid ``x_i + linspace(-step, step)``.

    All five points of a coordinate are centred on the incumbent from before
    that coordinate's queries.  The incumbent moves only to a strictly better
    point, and the step halves after every full sweep of the nine sliders.
    """
    if budget < GREEDY_MIN_BUDGET:
        raise ValueError(f"greedy search needs a budget of at least {GREEDY_MIN_BUDGET}")
    sess = _Session(input_img, _objective(objective, goal, fx), pipeline, budget)
    x = np.zeros(N_PARAMS) if x0 is None else np.clip(np.asarray(x0, dtype=np.float64), -1, 1)
    cur_loss = math.inf
    offsets = np.linspace(-1.0, 1.0, GREEDY_GRID)
    while sess.remaining > 0:
        for i in range(N_PARAMS):
            base, best = x, None
            for off in offsets:
                if sess.remaining <= 0:
                    break
                cand = base.copy()
                cand[i] = np.clip(base[i] + off * step, -1.0, 1.0)
                loss = sess.query(cand)
                if loss < cur_loss:
                    best, cur_loss = sess.trajectory[-1][0].copy(), loss
            if best is not None:
                x = best
        step *= 0.5
    return sess.result("greedy")


def tune_rl(input_img, goal, agent, max_queries: int = 10, objective="psnr", pipeline=apply_pipeline, fx=None) -> TuneResult:
    """Greedy rollout of a trained agent.

    ``agent`` is a :class:`~phototune.rl.TD3Agent` or a checkpoint path.
    Renders happen at full resolution; the policy sees 64x64 copies.
    """
    from .rl import TD3Agent

    if not isinstance(agent, TD3Agent):
        agent, _ = TD3Agent.load(agent, with_optimizers=False)
    cfg = agent.cfg
    steps = min(int(max_queries), cfg.max_steps)
    if steps < 1:
        raise ValueError("max_queries must be at least 1")
    obj = _objective(objective, goal, fx)
    sess = _Session(input_img, obj, pipeline, steps)
    goal64 = _policy_view(goal)
    goal_feats = GoalFeatures.from_image(goal64)
    cur64 = _policy_view(input_img)
    history = History()
    lo, hi = cfg.intensity_bounds
    for _ in range(steps):
        rec = agent.observe(cur64, goal_feats, history)
        action = agent.select_action(agent.state_from_record(rec), "greedy")
        params = cfg.full_params(action)
        img = sess.render(params)
        sess.record(params, obj(img))
        if not lo <= float(np.mean(img)) <= hi:
            break
        cur64 = _policy_view(img)
        history.push(action, rms_distance(cur64, goal64))
    return sess.result("rl")


def _policy_view(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.shape[:2] == (POLICY_SIZE, POLICY_SIZE):
        return img
    return resize_for_policy(img)


def dump_trajectory(result: TuneResult, input_img, out_dir, goal=None, pipeline=apply_pipeline, strip_height: int = 128) -> list:
    """Write one PNG per query plus ``strip.png`` (input, steps, goal); returns the paths."""
    from .data import atomic_write_bytes
    from .image import resize_bilinear

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths, frames = [], [input_img]
    for i, (p, _) in enumerate(result.trajectory):
        img = pipeline(input_img, p)
        path = out / f"step_{i:03d}.png"
        atomic_write_bytes(path, encode(img, "png"))
        paths.append(path)
        frames.append(img)
    if goal is not None:
        frames.append(goal)
    h, w = np.asarray(input_img).shape[:2]
    tw = max(1, round(w * strip_height / h))
    strip = np.concatenate([resize_bilinear(np.asarray(f, dtype=np.float64), strip_height, tw) for f in frames], axis=1)
    atomic_write_bytes(out / "strip.png", encode(strip, "png"))
    paths.append(out / "strip.png")
    return paths


TUNERS = {"cmaes": tune_cmaes, "random": tune_random, "greedy": tune_greedy, "rl": tune_rl}
