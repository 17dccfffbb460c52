"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
Criterion 6 evaluates the policy checkpoint shipped in ``phototune/data``;
``demos/04_train_full.py`` regenerates it.
"""
import time

import numpy as np
import pytest

from phototune.data import DatasetSpec, build_dataset, generate_scene, split_indices
from phototune.features import DualPathEncoder
from phototune.nn import AvgPool2d, Conv2d, Flatten, GlobalAvgPool, Linear, ReLU, Sequential, Tanh, grad_check, mlp
from phototune.pipeline import CountingPipeline, apply_pipeline
from phototune.rewards import StyleFeatureExtractor, StyleWeights, stylization_reward, style_score
from phototune.rl import (
    ReplayBuffer,
    TD3Agent,
    TD3Config,
    bundled_checkpoint,
    compute_td_target,
    ema_update,
    rollout_episode,
    train,
)
from phototune.stats import histogram, psnr, ssim
from phototune.tuners import cmaes_minimize, tune_cmaes, tune_greedy, tune_random, tune_rl

FULL_SPEC = DatasetSpec(count=2100, seed=2024, split=(2000 / 2100, 100 / 2100))


def shipped_checkpoint():
    try:
        return bundled_checkpoint()
    except FileNotFoundError as exc:
        pytest.fail(f"{exc}; run demos/04_train_full.py")


@pytest.fixture(scope="module")
def heldout():
    _, ev = split_indices(FULL_SPEC)
    return build_dataset(FULL_SPEC, ev)


def test_criterion_01_pipeline_identity(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    mismatches = 0
    for seed in range(1000):
        img = generate_scene(seed, 64) if seed % 2 else rng.uniform(0, 1, size=(48, 40, 3))
        mismatches += not np.array_equal(apply_pipeline(img, np.zeros(9)), img)
    elapsed = time.perf_counter() - t0
    acceptance(1, mismatches == 0 and elapsed < 30, f"{1000 - mismatches}/1000 bit-exact identities in {elapsed:.1f}s (limit 30s)")


def test_criterion_02_metrics(acceptance):
    rng = np.random.default_rng(2)
    x = rng.uniform(0.0, 0.9, size=(64, 64, 3))
    p = psnr(x + 0.1, x)
    s = ssim(x, x)
    mass = max(abs(histogram(x, kind).sum(axis=-1) - 1).max() for kind in ("RGB", "Y", "UV"))
    ok = abs(p - 20.0) <= 1e-6 and abs(s - 1.0) <= 1e-9 and mass <= 1e-9
    acceptance(2, ok, f"psnr(+0.1)={p:.9f} dB, ssim(x,x)={s:.12f}, histogram mass error={mass:.1e}")


def _quad_loss(rng, shape):
    r = rng.normal(size=shape)
    return lambda out: (float(np.sum(out * r) + 0.5 * np.sum(out * out)), r + out)


def test_criterion_03_gradients(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    cases = {
        "Linear": (Sequential([Linear(6, 5, rng)]), (4, 6)),
        "Conv2d/s1": (Sequential([Conv2d(3, 4, 3, 1, 1, rng)]), (2, 5, 5, 3)),
        "Conv2d/s2": (Sequential([Conv2d(3, 4, 3, 2, 1, rng)]), (2, 6, 6, 3)),
        "ReLU": (Sequential([Linear(6, 8, rng), ReLU()]), (4, 6)),
        "Tanh": (Sequential([Linear(6, 8, rng), Tanh()]), (4, 6)),
        "AvgPool2d": (Sequential([Conv2d(2, 3, 3, 1, 1, rng), AvgPool2d(2)]), (2, 4, 4, 2)),
        "GlobalAvgPool": (Sequential([Conv2d(2, 3, 3, 1, 1, rng), GlobalAvgPool()]), (2, 4, 4, 2)),
        "Flatten": (Sequential([Conv2d(2, 3, 3, 2, 1, rng), Flatten(), Linear(12, 2, rng)]), (2, 4, 4, 2)),
        "policy": (mlp([616, 512, 512, 512, 9], rng, out_activation="tanh"), (4, 616)),
        "critic": (mlp([625, 512, 512, 512, 1], rng), (4, 625)),
        "DualPathEncoder": (DualPathEncoder(rng), (1, 64, 64, 24)),
    }
    errors = {}
    for name, (net, shape) in cases.items():
        x = rng.uniform(size=shape) if name == "DualPathEncoder" else rng.normal(size=shape)
        loss = _quad_loss(rng, net.forward(x).shape)
        # probes that cross a ReLU kink are redrawn; the step stays at 1e-4
        errors[name] = grad_check(net, x, loss, n_samples=100, h=1e-4, rng=rng, check_input=name != "DualPathEncoder", skip_kinks=True)
    worst = max(errors, key=errors.get)
    elapsed = time.perf_counter() - t0
    ok = errors[worst] < 1e-4 and elapsed < 120
    acceptance(3, ok, f"{len(errors)} networks, worst rel. error {errors[worst]:.1e} ({worst}) in {elapsed:.0f}s")


def test_criterion_04_cmaes(acceptance):
    t0 = time.perf_counter()
    sphere = [cmaes_minimize(lambda p: float(np.sum(p * p)), np.full(9, 0.5), 0.3, budget=5000, seed=s, target=1e-10) for s in range(10)]
    solved = sum(f < 1e-10 for _, f, _ in sphere)
    pairs = build_dataset(DatasetSpec(count=50, seed=4, size=64))
    best = np.array([tune_cmaes(p.input, p.goal, budget=200, seed=i).best_value for i, p in enumerate(pairs)])
    frac = float(np.mean(best >= 30.0))
    elapsed = time.perf_counter() - t0
    ok = solved == 10 and frac >= 0.8 and elapsed < 900
    acceptance(
        4,
        ok,
        f"sphere solved {solved}/10 (max evals {max(e for *_, e in sphere)}); round trip >=30 dB on {frac:.0%} of 50 pairs "
        f"(need 80%), mean {best.mean():.2f} dB, in {elapsed:.0f}s",
    )


def test_criterion_05_exposure_only_td3(acceptance):
    t0 = time.perf_counter()
    spec = DatasetSpec(count=300, seed=11, param_low=(-0.7,) + (0.0,) * 8, param_high=(0.7,) + (0.0,) * 8)
    pairs = build_dataset(spec)
    cfg = TD3Config(encoder_mode="frozen", dtype="float32", active_params=(0,), eval_every=100, eval_episodes=50)
    _, records = train(pairs[:250], cfg, episodes=5000, eval_pairs=pairs[250:], seed=0, stop_at_psnr=35.0)
    evals = [r["eval_psnr_db"] for r in records if "eval_psnr_db" in r]
    elapsed = time.perf_counter() - t0
    ok = bool(evals) and max(evals) >= 35.0 and elapsed < 1800
    acceptance(5, ok, f"held-out PSNR {max(evals):.2f} dB after {len(records)} episodes (budget 5000) in {elapsed:.0f}s")


def test_criterion_06_query_efficiency(acceptance, heldout):
    agent, _ = TD3Agent.load(shipped_checkpoint(), with_optimizers=False)
    rl, c10, c200 = [], [], []
    for i, p in enumerate(heldout):
        rl.append(tune_rl(p.input, p.goal, agent).best_value)
        c10.append(tune_cmaes(p.input, p.goal, budget=10, popsize=10, seed=i).best_value)
        c200.append(tune_cmaes(p.input, p.goal, budget=200, seed=i).best_value)
    rl, c10, c200 = float(np.mean(rl)), float(np.mean(c10)), float(np.mean(c200))
    ok = rl >= c10 + 3.0 and rl >= c200 - 2.0
    acceptance(
        6,
        ok,
        f"{len(heldout)} held-out pairs: rl@10 {rl:.2f} dB vs cmaes@10 {c10:.2f} (need >= {c10 + 3:.2f}) "
        f"and cmaes@200 {c200:.2f} (need >= {c200 - 2:.2f})",
    )


def test_criterion_07_reward_algebra(acceptance):
    rng = np.random.default_rng(7)
    cfg = TD3Config(hidden=32, mlp_layers=2, encoder_mode="frozen")
    agent = TD3Agent(cfg, seed=0)
    worst_tel = 0.0
    for k in range(100):
        x = generate_scene(1000 + k, 64)
        goal = apply_pipeline(x, rng.uniform(-0.6, 0.6, 9))
        ep = rollout_episode(x, goal, agent, rng=rng, mode="random")
        end = ep.psnr_db[-1] if ep.psnr_db else ep.initial_psnr_db
        worst_tel = max(worst_tel, abs(sum(ep.rewards) - (end - ep.initial_psnr_db)))

    fx = StyleFeatureExtractor(seed=0)
    w = StyleWeights()
    self_scores, worst_style = [], 0.0
    for _ in range(100):
        a, b, g = (rng.uniform(size=(16, 16, 3)) for _ in range(3))
        self_scores.append(style_score(a, a, fx, w))
        fa, fb, fg = fx.features(a), fx.features(b), fx.features(g)
        expect = _oracle_style(a, g, fa, fg, w) - _oracle_style(b, g, fb, fg, w) - w.lambda2 * sum(_rms(x - y) for x, y in zip(fg, fb))
        worst_style = max(worst_style, abs(stylization_reward(a, b, g, fx, w) - expect))
    ok = worst_tel <= 1e-9 and max(self_scores) == 0.0 and worst_style <= 1e-9
    acceptance(
        7,
        ok,
        f"telescoping error {worst_tel:.1e} over 100 episodes; style_score(x,x) max {max(self_scores)}; "
        f"stylization oracle error {worst_style:.1e} over 100 triples",
    )


def _rms(x):
    return float(np.sqrt(np.mean(np.square(x))))


def _oracle_style(cur, goal, fc, fg, w):
    from phototune.image import rgb_to_yuv

    def gram(f):
        flat = f.reshape(f.shape[0], -1)
        return flat @ flat.T / f.size

    def hist(v, lo):
        return np.bincount(np.clip(np.floor((v - lo) * 32).astype(int), 0, 31).ravel(), minlength=32) / v.size

    yc, yg = rgb_to_yuv(cur), rgb_to_yuv(goal)
    g = sum(_rms(gram(a) - gram(b)) for a, b in zip(fg, fc))
    lum = _rms(hist(yc[..., 0], 0) - hist(yg[..., 0], 0))
    uv = _rms(np.stack([hist(yc[..., k], -0.5) - hist(yg[..., k], -0.5) for k in (1, 2)]))
    return g + w.lambda0 * lum + w.lambda1 * uv


def test_criterion_08_td3_mechanics(acceptance):
    checks = {}
    checks["terminal y=r"] = compute_td_target([1.25], [1.0], np.array([9.0]), np.array([4.0]), 0.9)[0] == 1.25
    checks["twin min 3.7"] = abs(compute_td_target([1.0], [0.0], np.array([3.0]), np.array([5.0]), 0.9)[0] - 3.7) < 1e-15

    cfg = TD3Config(hidden=32, mlp_layers=2, batch_size=8, encoder_mode="frozen", dtype="float64")
    agent = TD3Agent(cfg, seed=0)
    agent.q1.layers[0].params["W"] += 1.0
    before = [v.copy() for _, v in agent.q1_targ.parameters()]
    ema_update(agent.q1_targ, agent.q1, 1.0)
    checks["ema rho=1"] = all(np.array_equal(b, v) for b, (_, v) in zip(before, agent.q1_targ.parameters()))

    rng = np.random.default_rng(8)
    buf = ReplayBuffer(100, np.float64)
    x = generate_scene(8, 64)
    for tr in rollout_episode(x, apply_pipeline(x, rng.uniform(-0.5, 0.5, 9)), agent, rng=rng, mode="random").transitions:
        buf.add(tr)
    pol = [v.copy() for _, v in agent.policy.parameters()]
    odd = agent.update(buf.sample(8, rng), rng, step_index=1)
    same = all(np.array_equal(a, v) for a, (_, v) in zip(pol, agent.policy.parameters()))
    even = agent.update(buf.sample(8, rng), rng, step_index=2)
    moved = not all(np.array_equal(a, v) for a, (_, v) in zip(pol, agent.policy.parameters()))
    checks["policy delay"] = odd["policy_loss"] is None and same and even["policy_loss"] is not None and moved

    # every other episode starts from a saturating exposure so some steps abort
    def flaky(img, p):
        out = apply_pipeline(img, p)
        return np.ones_like(out) if p[0] > 0.6 else out

    small = [(generate_scene(k, 64), generate_scene(k + 50, 64)) for k in range(4)]
    _, recs = train(small, TD3Config(hidden=32, mlp_layers=2, batch_size=8, encoder_mode="frozen", warmup_random_steps=10**6), 30, seed=1, pipeline=flaky)
    observed = sum(r["aborted"] for r in recs)
    stored = recs[-1]["buffer_size"]
    expected_stored = sum(r["steps"] for r in recs)
    checks["abort discard"] = observed > 0 and stored == expected_stored and recs[-1]["total_steps"] == expected_stored + observed
    failed = [k for k, v in checks.items() if not v]
    acceptance(8, not failed, f"{len(checks) - len(failed)}/{len(checks)} exact checks ({observed} aborts, none buffered)" + (f"; failed {failed}" if failed else ""))


def test_criterion_09_query_accounting(acceptance, heldout):
    agent, _ = TD3Agent.load(shipped_checkpoint(), with_optimizers=False)
    runners = {
        "rl@10": lambda p, pipe: tune_rl(p.input, p.goal, agent, pipeline=pipe),
        "cmaes@200": lambda p, pipe: tune_cmaes(p.input, p.goal, budget=200, pipeline=pipe),
        "random@200": lambda p, pipe: tune_random(p.input, p.goal, budget=200, rng=0, pipeline=pipe),
        "greedy@200": lambda p, pipe: tune_greedy(p.input, p.goal, budget=200, pipeline=pipe),
    }
    mismatches, total = [], 0
    for p in heldout:
        for name, run in runners.items():
            counter = CountingPipeline(apply_pipeline)
            res = run(p, counter)
            total += 1
            if counter.calls != res.query_count or res.query_count != len(res.trajectory):
                mismatches.append((p.id, name, counter.calls, res.query_count))
    acceptance(9, not mismatches, f"{total - len(mismatches)}/{total} (pair, tuner) runs with counter == query_count" + (f"; first mismatch {mismatches[0]}" if mismatches else ""))


def test_criterion_10_efficiency_720p(acceptance):
    from phototune.cli import bench_image

    agent, _ = TD3Agent.load(shipped_checkpoint(), with_optimizers=False)
    inp, goal = bench_image(720, 1280, seed=0)
    t0 = time.perf_counter()
    res_rl = tune_rl(inp, goal, agent)
    t_rl = time.perf_counter() - t0
    t0 = time.perf_counter()
    tune_cmaes(inp, goal, budget=200, seed=0)
    t_cma = time.perf_counter() - t0
    ratio = t_cma / t_rl
    acceptance(10, res_rl.query_count <= 10 and ratio >= 5.0, f"720p: rl {t_rl:.2f}s ({res_rl.query_count} queries) vs cmaes@200 {t_cma:.2f}s, speedup {ratio:.1f}x (need 5x)")
