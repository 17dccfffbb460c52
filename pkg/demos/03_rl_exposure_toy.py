# # Teaching the TD3 agent a single slider
#
# Before training on all nine sliders it helps to watch the agent learn the
# easiest one.  Goals here differ from their inputs only in exposure, and
# the policy controls only that slider.  Conv features are frozen so each
# step encodes the 64x64 observation once.
#
# Every 50 episodes the greedy policy is scored on held-out pairs: mean
# final PSNR after at most ten queries.  The networks are smaller than the
# defaults so this finishes in a few minutes on one core.

from phototune.data import DatasetSpec, build_dataset
from phototune.rl import TD3Config, train
from phototune.tuners import tune_rl

spec = DatasetSpec(count=120, seed=11, param_low=(-0.7,) + (0.0,) * 8, param_high=(0.7,) + (0.0,) * 8)
pairs = build_dataset(spec)
train_pairs, eval_pairs = pairs[:100], pairs[100:]

cfg = TD3Config(
    hidden=128,
    mlp_layers=3,
    encoder_mode="frozen",
    dtype="float32",
    active_params=(0,),
    warmup_random_steps=500,
    eval_every=50,
    eval_episodes=20,
)


def report(rec):
    if "eval_psnr_db" in rec:
        loss = "warmup" if rec["q1_loss"] is None else f"q1 loss {rec['q1_loss']:.3f}"
        print(f"episode {rec['episode'] + 1:4d}  held-out {rec['eval_psnr_db']:6.2f} dB  {loss}")


agent, records = train(train_pairs, cfg, episodes=400, eval_pairs=eval_pairs, seed=0, progress=report)

# The trained policy doubles as a tuner.  Here is one held-out pair,
# step by step.

p = eval_pairs[0]
res = tune_rl(p.input, p.goal, agent)
print("hidden exposure", round(float(p.goal_params[0]), 3))
for k, (params, value) in enumerate(res.trajectory):
    print(f"query {k}: exposure {params[0]: .3f}  psnr {value:6.2f} dB")
