# # Training the shipped nine-slider policy
#
# This is the exact recipe behind `phototune/data/td3_finishing.npz`.  It is
# deterministic given the seed, but takes hours on one CPU core, so it
# checkpoints every 500 episodes and can be resumed.  The bundled policy came
# from two invocations, about 2 h each:
#
#     python demos/04_train_full.py runs/full 12000
#     python demos/04_train_full.py runs/full 24000 --resume
#
# The dataset is 2100 synthetic pairs; the 100 evaluation pairs are never
# trained on and are the ones the acceptance tests score.  Training uses
# frozen conv features and float32 networks.  The replay buffer is not part
# of a checkpoint, so a resumed run is not bit-identical to an unbroken one.

import argparse
import time
from pathlib import Path

from phototune.data import DatasetSpec, build_dataset, split_indices
from phototune.rl import TD3Agent, TD3Config, train

ap = argparse.ArgumentParser()
ap.add_argument("out", help="output prefix; writes .npz, .jsonl and -policy.npz")
ap.add_argument("episodes", type=int)
ap.add_argument("--resume", action="store_true")
args = ap.parse_args()

spec = DatasetSpec(count=2100, seed=2024, split=(2000 / 2100, 100 / 2100))
pairs = build_dataset(spec)
tr, ev = split_indices(spec)
cfg = TD3Config(encoder_mode="frozen", dtype="float32", eval_every=250, eval_episodes=50)

Path(args.out).parent.mkdir(parents=True, exist_ok=True)
ckpt = Path(f"{args.out}.npz")
t0 = time.time()


def report(rec):
    if "eval_psnr_db" in rec:
        print(f"{rec['episode'] + 1:6d}  {time.time() - t0:7.0f}s  held-out {rec['eval_psnr_db']:.3f} dB", flush=True)


done = 0
if args.resume and ckpt.exists():
    done = TD3Agent.load(ckpt, with_optimizers=False)[1]["episode"]
agent, _ = train(
    [pairs[i] for i in tr],
    cfg,
    episodes=args.episodes - done,
    eval_pairs=[pairs[i] for i in ev],
    seed=0,
    progress=report,
    log_path=f"{args.out}.jsonl",
    checkpoint_path=ckpt,
    checkpoint_every=500,
    resume_from=ckpt if done else None,
)

# The shipped file drops the critics, targets and optimizer moments.

agent.save(f"{args.out}-policy.npz", {"episode": args.episodes, "seed": 0, "dataset": spec.to_dict()}, inference_only=True)
print("wrote", f"{args.out}-policy.npz")
