"""Rewards for finishing (PSNR gain) and stylization (style-score gain) tuning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv2d, ReLU, Sequential, load_checkpoint, read_checkpoint, CheckpointError
from .stats import histogram, psnr

__all__ = [
    "StyleWeights",
    "StyleFeatureExtractor",
    "finishing_reward",
    "gram_matrix",
    "rms_norm",
    "style_score",
    "content_distance",
    "stylization_reward",
]

STYLE_WIDTHS = (16, 32, 64, 128)


@dataclass(frozen=True)
class StyleWeights:
    lambda0: float = 100.0  # luminance histogram
    lambda1: float = 50.0  # chroma histogram
    lambda2: float = 0.5  # content penalty

    def __post_init__(self):
        if min(self.lambda0, self.lambda1, self.lambda2) < 0:
            raise ValueError("style weights must be nonnegative")


def finishing_reward(i_t, i_next, goal) -> float:
    """PSNR improvement towards the goal from one step to the next."""
    return psnr(i_next, goal) - psnr(i_t, goal)


def rms_norm(x) -> float:
    """l2 norm divided by sqrt(element count)."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def gram_matrix(feature_map) -> np.ndarray:
    """``F F^T / (C H W)`` for a ``(C, H, W)`` feature map."""
    f = np.asarray(feature_map, dtype=np.float64)
    if f.ndim != 3 or f.size == 0:
        raise ValueError(f"expected a nonempty (C, H, W) map, got shape {f.shape}")
    c, h, w = f.shape
    flat = f.reshape(c, h * w)
    return flat @ flat.T / (c * h * w)


class StyleFeatureExtractor:
    """Four conv stages (3x3 + ReLU) with stride 2 between stages.

    The default weights are a fixed seeded random filter bank.  Trained weights
    (for example converted VGG filters) can be loaded from a checkpoint whose
    ``meta`` carries ``{"stage_manifest": [...]}`` listing the stage widths.
    """

    def __init__(self, seed: int = 0, widths=STYLE_WIDTHS):
        rng = np.random.default_rng(seed)
        self.widths = tuple(widths)
        self.provenance = "fixed_random_filters"
        self.stages = []
        c_in = 3
        for i, c_out in enumerate(self.widths):
            conv = Conv2d(c_in, c_out, 3, 1 if i == 0 else 2, 1, rng)
            # He-scaled filters keep activations from vanishing through four stages
            conv.params["W"] = rng.normal(0.0, np.sqrt(2.0 / (9 * c_in)), conv.params["W"].shape)
            conv.params["b"] = np.zeros(c_out)
            self.stages.append(Sequential([conv, ReLU()]))
            c_in = c_out

    def __len__(self):
        return len(self.stages)

    def features(self, img) -> list:
        """Per-stage ``(C, H, W)`` feature maps of one ``(H, W, 3)`` image."""
        x = np.asarray(img, dtype=np.float64)[None]
        out = []
        for stage in self.stages:
            x = stage.forward(x)
            out.append(x[0].transpose(2, 0, 1))
        for stage in self.stages:
            stage.clear_cache()
        return out

    def _modules(self):
        return {f"stage{i}": s for i, s in enumerate(self.stages)}

    def save(self, path) -> None:
        from .nn import save_checkpoint

        save_checkpoint(path, self._modules(), meta={"stage_manifest": list(self.widths), "provenance": self.provenance})

    @classmethod
    def from_checkpoint(cls, path) -> "StyleFeatureExtractor":
        manifest, _ = read_checkpoint(path)
        widths = manifest["meta"].get("stage_manifest")
        if not widths or len(widths) != 4:
            raise CheckpointError("style checkpoint must declare a 4-entry stage_manifest")
        fx = cls(seed=0, widths=widths)
        load_checkpoint(path, fx._modules())
        fx.provenance = manifest["meta"].get("provenance", "external_weights")
        if fx.provenance == "fixed_random_filters":
            fx.provenance = "external_weights"
        return fx


def _style_terms(current, goal, fx, w, feats_cur=None, feats_goal=None):
    feats_cur = fx.features(current) if feats_cur is None else feats_cur
    feats_goal = fx.features(goal) if feats_goal is None else feats_goal
    gram = sum(rms_norm(gram_matrix(g) - gram_matrix(c)) for g, c in zip(feats_goal, feats_cur))
    lum = rms_norm(histogram(current, "Y") - histogram(goal, "Y"))
    chroma = rms_norm(histogram(current, "UV") - histogram(goal, "UV"))
    return gram, lum, chroma


def style_score(current, goal, fx: StyleFeatureExtractor, w: StyleWeights = StyleWeights()) -> float:
    """Gram-matrix distance plus weighted luma/chroma histogram distances."""
    gram, lum, chroma = _style_terms(current, goal, fx, w)
    return gram + w.lambda0 * lum + w.lambda1 * chroma


def content_distance(image, goal, fx: StyleFeatureExtractor) -> float:
    return sum(rms_norm(g - c) for g, c in zip(fx.features(goal), fx.features(image)))


def stylization_reward(i_t, i_next, goal, fx: StyleFeatureExtractor, w: StyleWeights = StyleWeights()) -> float:
    """Style-score decrease minus a content penalty evaluated on the post-action image."""
    feats_goal = fx.features(goal)
    feats_next = fx.features(i_next)
    before = sum(_scale(_style_terms(i_t, goal, fx, w, feats_goal=feats_goal), w))
    after = sum(_scale(_style_terms(i_next, goal, fx, w, feats_cur=feats_next, feats_goal=feats_goal), w))
    content = sum(rms_norm(g - c) for g, c in zip(feats_goal, feats_next))
    return before - after - w.lambda2 * content


def _scale(terms, w):
    gram, lum, chroma = terms
    return gram, w.lambda0 * lum, w.lambda1 * chroma
