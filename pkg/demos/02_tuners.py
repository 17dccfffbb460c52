# # Black-box tuners on one pair
#
# Given an input and a goal rendered from hidden sliders, each tuner may query
# the pipeline a fixed number of times.  We compare CMA-ES, uniform random
# search and coordinate-wise greedy search at the same budget and print
# their best-so-far PSNR curves.

import numpy as np

from phototune.data import generate_scene, make_pair
from phototune.tuners import tune_cmaes, tune_greedy, tune_random

pair = make_pair(generate_scene(11), np.random.default_rng(11))
print("hidden sliders:", np.round(pair.goal_params, 2))

budget = 200
results = {
    "cmaes": tune_cmaes(pair.input, pair.goal, budget=budget, seed=0),
    "random": tune_random(pair.input, pair.goal, budget=budget, rng=0),
    "greedy": tune_greedy(pair.input, pair.goal, budget=budget),
}

# Best-so-far at a few checkpoints along the budget.

marks = [10, 25, 50, 100, 200]
print("queries ".ljust(10) + "".join(f"{m:>8d}" for m in marks))
for name, res in results.items():
    print(name.ljust(10) + "".join(f"{res.value_at(m):8.2f}" for m in marks))

# The covariance stays symmetric to machine precision across generations.

es = results["cmaes"].cmaes_state
print("max asymmetry", max(es.asymmetry_history))
print("recovered sliders:", np.round(results["cmaes"].best_params, 2))
