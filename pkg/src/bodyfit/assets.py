"""Container for a body model together with its priors and capsule data."""
from __future__ import annotations

from dataclasses import dataclass

from .capsules import CapsuleModel
from .model import BodyModel
from .priors import GmmPrior, ShapePriorMatrix


@dataclass
class ModelAssets:
    model: BodyModel
    shape_prior: ShapePriorMatrix
    capsules: CapsuleModel | None = None
    gmm: GmmPrior | None = None
