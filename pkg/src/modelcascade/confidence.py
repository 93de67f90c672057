"""Confidence functions: LabelDistribution -> scalar in [0, 1].

Every function returns 1.0 on a one-hot distribution and its minimum on the
uniform distribution. `margin` and `entropy` are defined as 1.0 for
single-label distributions.
"""

from __future__ import annotations

import math
from typing import Callable

from .errors import ValidationError
from .models import LabelDistribution


def max_prob(dist: LabelDistribution) -> float:
    return max(dist.probs.values())


def margin(dist: LabelDistribution) -> float:
    values = sorted(dist.probs.values(), reverse=True)
    if len(values) < 2:
        return 1.0
    return values[0] - values[1]


def entropy_conf(dist: LabelDistribution) -> float:
    """1 - H(d)/ln(K), with 0·ln(0) taken as 0."""
    k = len(dist.probs)
    if k < 2:
        return 1.0
    h = -sum(p * math.log(p) for p in dist.probs.values() if p > 0.0)
    value = 1.0 - h / math.log(k)
    # float round-off can push a hair outside [0, 1]
    return min(1.0, max(0.0, value))


ConfidenceFn = Callable[[LabelDistribution], float]

CONFIDENCE_FNS: dict[str, ConfidenceFn] = {
    "max_prob": max_prob,
    "margin": margin,
    "entropy": entropy_conf,
}


def resolve_confidence(name: str) -> ConfidenceFn:
    try:
        return CONFIDENCE_FNS[name]
    except KeyError:
        known = ", ".join(sorted(CONFIDENCE_FNS))
        raise ValidationError(f"unknown confidence function {name!r} (known: {known})") from None
