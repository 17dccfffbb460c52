"""Synthetic scenes, random-parameter target pairs and on-disk datasets."""
from __future__ import annotations

import json
import logging
import os
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .image import luminance, read_image
from .pipeline import N_PARAMS, apply_pipeline

__all__ = [
    "ScenePair",
    "DatasetSpec",
    "GenerationError",
    "generate_scene",
    "make_pair",
    "build_dataset",
    "split_indices",
    "load_directory",
    "write_dataset",
    "load_manifest",
    "atomic_write_bytes",
    "atomic_write_text",
]

log = logging.getLogger(__name__)

INTENSITY_BOUNDS = (0.02, 0.98)
MAX_REJECTIONS = 100
MANIFEST_NAME = "manifest.json"


class GenerationError(RuntimeError):
    pass


@dataclass
class ScenePair:
    input: np.ndarray
    goal: np.ndarray
    goal_params: np.ndarray | None = None
    id: str = ""


@dataclass
class DatasetSpec:
    count: int = 100
    seed: int = 0
    split: tuple = (0.9, 0.1)
    param_low: tuple = (-0.7,) * N_PARAMS
    param_high: tuple = (0.7,) * N_PARAMS
    size: int = 64

    def __post_init__(self):
        self.split = tuple(float(s) for s in self.split)
        self.param_low = tuple(float(v) for v in self.param_low)
        self.param_high = tuple(float(v) for v in self.param_high)
        if self.count < 0:
            raise ValueError("count must be nonnegative")
        if len(self.split) != 2 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError(f"split fractions must be two nonnegative numbers summing to 1, got {self.split}")
        if len(self.param_low) != N_PARAMS or len(self.param_high) != N_PARAMS:
            raise ValueError(f"parameter bounds need {N_PARAMS} entries")
        if any(lo > hi or lo < -1 or hi > 1 for lo, hi in zip(self.param_low, self.param_high)):
            raise ValueError("parameter bounds must be ordered and inside [-1, 1]")
        if self.size < 16:
            raise ValueError("scene size must be at least 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


# ---------------------------------------------------------------------------
# scenes


def generate_scene(seed: int, size: int = 64) -> np.ndarray:
    """Procedural test scene: gradient backdrop, soft shapes and fine texture.

    Mean luminance is kept inside ``[0.2, 0.8]``.
    """
    if size < 16:
        raise ValueError("scene size must be at least 16")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1.0)

    corners = rng.uniform(0.05, 0.95, size=(4, 3))
    img = (
        corners[0] * ((1 - yy) * (1 - xx))[..., None]
        + corners[1] * ((1 - yy) * xx)[..., None]
        + corners[2] * (yy * (1 - xx))[..., None]
        + corners[3] * (yy * xx)[..., None]
    )

    for _ in range(rng.integers(2, 7)):
        colour = rng.uniform(0.0, 1.0, size=3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        softness = rng.uniform(0.01, 0.06)
        if rng.random() < 0.5:
            dist = np.sqrt(((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2) - 1.0
        else:
            dist = np.maximum(np.abs(yy - cy) / ry, np.abs(xx - cx) / rx) - 1.0
        alpha = 1.0 / (1.0 + np.exp(np.clip(dist * min(ry, rx) / softness, -50, 50)))
        alpha *= rng.uniform(0.6, 1.0)
        img = img * (1 - alpha[..., None]) + colour * alpha[..., None]

    noise = ndimage.gaussian_filter(rng.normal(size=(size, size, 3)), sigma=(0.8, 0.8, 0))
    noise += 0.5 * ndimage.gaussian_filter(rng.normal(size=(size, size, 1)), sigma=(0.6, 0.6, 0))
    img = img + rng.uniform(0.03, 0.09) * noise / max(noise.std(), 1e-12)
    img = np.clip(img, 0.0, 1.0)

    mean_y = float(luminance(img).mean())
    if mean_y > 0.8:
        img = img * (0.75 / mean_y)
    elif mean_y < 0.2:
        img = 1.0 - (1.0 - img) * (0.75 / (1.0 - mean_y))
    return np.clip(img, 0.0, 1.0)


def make_pair(input_img, rng, low=None, high=None, pipeline=apply_pipeline, pair_id: str = "") -> ScenePair:
    """Render a goal from uniformly sampled parameters, rejecting collapsed renders."""
    low = np.full(N_PARAMS, -0.7) if low is None else np.asarray(low, dtype=np.float64)
    high = np.full(N_PARAMS, 0.7) if high is None else np.asarray(high, dtype=np.float64)
    rng = np.random.default_rng(rng)
    for _ in range(MAX_REJECTIONS):
        params = rng.uniform(low, high)
        goal = pipeline(input_img, params)
        if INTENSITY_BOUNDS[0] < float(np.mean(goal)) < INTENSITY_BOUNDS[1]:
            return ScenePair(input=np.asarray(input_img, dtype=np.float64), goal=goal, goal_params=params, id=pair_id)
    raise GenerationError(f"{MAX_REJECTIONS} consecutive goal renders fell outside intensity bounds {INTENSITY_BOUNDS}")


def build_dataset(spec: DatasetSpec, indices=None) -> list:
    """Pairs for ``spec`` (all, or just ``indices``); pair ``i`` depends only on ``(spec.seed, i)``."""
    seqs = np.random.SeedSequence(spec.seed).spawn(spec.count)
    pairs = []
    for i in range(spec.count) if indices is None else [int(k) for k in indices]:
        scene_seed, pair_seed = seqs[i].generate_state(2)
        img = generate_scene(int(scene_seed), spec.size)
        pairs.append(make_pair(img, np.random.default_rng(int(pair_seed)), spec.param_low, spec.param_high, pair_id=f"{i:05d}"))
    return pairs


def split_indices(spec: DatasetSpec):
    """Deterministic ``(train, eval)`` index arrays for ``spec``."""
    perm = np.random.default_rng([spec.seed, 1]).permutation(spec.count)
    n_train = int(round(spec.split[0] * spec.count))
    return np.sort(perm[:n_train]), np.sort(perm[n_train:])


# ---------------------------------------------------------------------------
# files


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_dataset(spec: DatasetSpec, out_dir) -> dict:
    """Render ``spec`` to PNG pairs plus ``manifest.json``; returns the manifest."""
    from .image import encode

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train, _ = split_indices(spec)
    train = set(train.tolist())
    entries = []
    for i, pair in enumerate(build_dataset(spec)):
        inp, goal = f"{pair.id}_input.png", f"{pair.id}_goal.png"
        atomic_write_bytes(out / inp, encode(pair.input, "png", 16))
        atomic_write_bytes(out / goal, encode(pair.goal, "png", 16))
        entries.append(
            {
                "id": pair.id,
                "input": inp,
                "goal": goal,
                "goal_params": pair.goal_params.tolist(),
                "split": "train" if i in train else "eval",
            }
        )
    manifest = {"spec": spec.to_dict(), "pairs": entries}
    atomic_write_text(out / MANIFEST_NAME, json.dumps(manifest, indent=1, sort_keys=True))
    return manifest


def load_manifest(path, split: str | None = None) -> list:
    """Load pairs listed in a manifest file (or a directory containing one)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    root = path.parent
    pairs = []
    for entry in manifest["pairs"]:
        if split is not None and entry.get("split") != split:
            continue
        params = entry.get("goal_params")
        pairs.append(
            ScenePair(
                input=read_image(root / entry["input"]),
                goal=read_image(root / entry["goal"]),
                goal_params=None if params is None else np.asarray(params, dtype=np.float64),
                id=entry["id"],
            )
        )
    return pairs


def load_directory(path):
    """Pair ``X_input.*`` with ``X_goal.*`` files.

    Returns ``(pairs, skipped)`` where ``skipped`` names files without a partner.
    """
    path = Path(path)
    inputs, goals = {}, {}
    for f in sorted(path.iterdir()):
        if not f.is_file() or f.suffix.lower() not in (".png", ".ppm"):
            continue
        stem = f.stem
        if stem.endswith("_input"):
            inputs[stem[: -len("_input")]] = f
        elif stem.endswith("_goal"):
            goals[stem[: -len("_goal")]] = f
    pairs, skipped = [], []
    for key in sorted(set(inputs) | set(goals)):
        if key in inputs and key in goals:
            pairs.append(ScenePair(input=read_image(inputs[key]), goal=read_image(goals[key]), goal_params=None, id=key))
        else:
            skipped.append((inputs.get(key) or goals.get(key)).name)
    if skipped:
        log.warning("skipped %d unmatched files: %s", len(skipped), ", ".join(skipped))
    return pairs, skipped
