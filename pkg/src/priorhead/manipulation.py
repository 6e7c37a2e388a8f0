"""Inference-time expression editing through plug-in translators."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .keypoints import KeypointFrame
from .networks import EXPR_FEATURE_MAX, ExpressionFeature
from .pipeline import Synthesizer, expression_stream
from .prior import EXPR_DIM, FaceParams

EMOTIONS = ("neutral", "happy", "sad", "angry", "surprised")


class UnknownTranslatorError(KeyError):
    pass


@dataclass
class ExpressionTranslator:
    """Maps an expression code (jaw excluded) and a target label to a new expression code."""

    name: str
    labels: Tuple[str, ...]
    transform: Callable[[np.ndarray, str], np.ndarray]

    def check(self, label: str):
        if label not in self.labels:
            raise UnknownTranslatorError(f"translator {self.name!r} has no label {label!r}; "
                                         f"choose from {', '.join(self.labels)}")

    def __call__(self, expression: np.ndarray, label: str) -> np.ndarray:
        self.check(label)
        out = np.asarray(self.transform(np.asarray(expression, dtype=np.float64), label), dtype=np.float64)
        if out.shape != np.shape(expression):
            raise ValueError("translator changed the expression length")
        return out


def identity_translator() -> ExpressionTranslator:
    return ExpressionTranslator("identity", EMOTIONS, lambda e, label: e.copy())


def affine_directions(seed: int = 0, magnitude: float = 1.5) -> Dict[str, np.ndarray]:
    """Seeded unit directions in expression space, scaled to ``magnitude``; neutral has none."""
    rng = np.random.default_rng(seed)
    out = {}
    for label in EMOTIONS[1:]:
        v = rng.standard_normal(EXPR_DIM)
        out[label] = magnitude * v / np.linalg.norm(v)
    return out


def affine_translator(seed: int = 0, magnitude: float = 1.5) -> ExpressionTranslator:
    """Toy emotion translator: ``neutral`` maps e to 0, any other label adds a fixed direction."""
    dirs = affine_directions(seed, magnitude)

    def transform(e, label):
        if label == "neutral":
            return 0.0 * e
        return e + dirs[label]

    return ExpressionTranslator("affine", EMOTIONS, transform)


TRANSLATORS: Dict[str, Callable[[], ExpressionTranslator]] = {
    "identity": identity_translator,
    "affine": affine_translator,
}


def get_translator(name: str) -> ExpressionTranslator:
    if name not in TRANSLATORS:
        raise UnknownTranslatorError(f"unknown translator {name!r}; available: {', '.join(TRANSLATORS)}")
    return TRANSLATORS[name]()


def edit_expression(expr: ExpressionFeature, translator: ExpressionTranslator, target: str) -> ExpressionFeature:
    """Translate the expression entries; jaw entries pass through unchanged."""
    if len(expr) != EXPR_FEATURE_MAX:
        raise ValueError("expression editing expects a full-length feature")
    return ExpressionFeature(np.concatenate([translator(expr.expression, target), expr.jaw]))


@dataclass
class EditResult:
    frames: np.ndarray
    keypoints: List[KeypointFrame] = field(default_factory=list)
    expressions: List[ExpressionFeature] = field(default_factory=list)


def render_edited(syn: Synthesizer, source_image, source_params: FaceParams,
                  driving_params: Sequence[FaceParams], translator: ExpressionTranslator,
                  target: str) -> EditResult:
    """Reconstruct/re-enact with each driving expression translated before generation.

    Keypoints come from the unedited driving parameters; model weights are never touched.
    """
    translator.check(target)
    src_kf = syn.keypoints(source_params)
    kfs = [syn.swap_keypoints(source_params, p) for p in driving_params]
    exprs = [edit_expression(e, translator, target) for e in expression_stream(driving_params)]
    return EditResult(syn.render(source_image, src_kf, kfs, exprs), kfs, exprs)
