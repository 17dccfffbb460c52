# # A tour of the nine-slider pipeline
#
# Every slider lives in [-1, 1] and zero is neutral.  The pipeline is a plain
# function of an image and a 9-vector, so the tuners can treat it as a black
# box.  This notebook-style script renders one synthetic scene under a few
# slider settings and scores each render against the neutral one.
#
# Run with `python demos/01_pipeline_tour.py`; PNGs land in `demo_out/tour`.

from pathlib import Path

import numpy as np

from phototune import PARAM_NAMES, apply_pipeline, psnr, ssim
from phototune.data import generate_scene
from phototune.image import write_image
from phototune.pipeline import physical_values

out = Path("demo_out/tour")
out.mkdir(parents=True, exist_ok=True)

x = generate_scene(7, size=128)
print("scene", x.shape, "mean", round(float(x.mean()), 3))

# The neutral vector is an exact identity, bit for bit.

neutral = apply_pipeline(x, np.zeros(9))
print("neutral is identity:", np.array_equal(neutral, x))

# Push each slider to +0.6 on its own and see how far the image moves.

for i, name in enumerate(PARAM_NAMES):
    p = np.zeros(9)
    p[i] = 0.6
    y = apply_pipeline(x, p)
    write_image(out / f"{i}_{name}.png", y)
    print(f"{name:>10s}  psnr={psnr(y, x):6.2f} dB  ssim={ssim(y, x):.3f}")

# A mixed setting, the kind of goal the tuners will have to recover.

goal_params = np.array([0.3, -0.1, 0.05, 0.2, 0.4, -0.3, 0.5, -0.2, 0.3])
goal = apply_pipeline(x, goal_params)
write_image(out / "goal.png", goal)
print("mixed goal vs input:", round(psnr(goal, x), 2), "dB")

# Slider values map onto physical operator settings: stops of exposure,
# per-channel gains, curve strengths and so on.

for op, v in physical_values(goal_params).items():
    print(f"{op:>14s}", np.round(v, 3))
