"""Finite-difference verification of tape gradients."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .tensor import Tape, Tensor, backward, unravel_index

__all__ = ["GradcheckReport", "CoordinateCheck", "gradcheck", "param_group"]

_LEVEL = re.compile(r"\d+$")


def param_group(name: str) -> str:
    """Collapse a parameter name to its group, e.g. ``nav.sa4.weight`` -> ``nav.sa``."""
    parts = name.split(".")
    if parts[0] in ("nav", "baseline") and len(parts) > 1:
        return f"{parts[0]}.{_LEVEL.sub('', parts[1])}"
    return parts[0]


@dataclass
class CoordinateCheck:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradcheckReport:
    checks: list = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def mean_rel_error(self) -> float:
        return float(np.mean([c.rel_error for c in self.checks])) if self.checks else 0.0

    @property
    def worst(self) -> Optional[CoordinateCheck]:
        return max(self.checks, key=lambda c: c.rel_error, default=None)

    def by_group(self) -> dict:
        groups: dict = {}
        for c in self.checks:
            count, worst = groups.get(param_group(c.name), (0, 0.0))
            groups[param_group(c.name)] = (count + 1, max(worst, c.rel_error))
        return groups

    def format(self) -> str:
        lines = [f"{'group':<16}{'samples':>8}{'max rel err':>14}"]
        for g, (count, worst) in sorted(self.by_group().items()):
            lines.append(f"{g:<16}{count:>8}{worst:>14.3e}")
        lines.append(f"overall: {len(self.checks)} samples, max {self.max_rel_error:.3e}, mean {self.mean_rel_error:.3e}")
        w = self.worst
        if w is not None:
            lines.append(
                f"worst: {w.name}{list(w.index)} analytic={w.analytic:.9e} numeric={w.numeric:.9e}"
            )
        return "\n".join(lines)


def _sample_coordinates(params: Mapping[str, Tensor], n_samples: int, rng: np.random.Generator) -> list:
    names = [k for k, p in params.items() if p.requires_grad]
    picks = []
    # one coordinate per tensor first, so every group is represented
    for name in names[:n_samples]:
        picks.append((name, int(rng.integers(params[name].size))))
    sizes = np.array([params[k].size for k in names], dtype=np.float64)
    remaining = n_samples - len(picks)
    if remaining > 0:
        which = rng.choice(len(names), size=remaining, p=sizes / sizes.sum())
        for i in which:
            picks.append((names[i], int(rng.integers(params[names[i]].size))))
    return picks


def gradcheck(
    model_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, Tensor],
    n_samples: int = 200,
    h: float = 1e-6,
    seed: int = 0,
    floor: float = 1e-5,
    numeric_params: Optional[Mapping[str, Tensor]] = None,
) -> GradcheckReport:
    """Compare tape gradients against central differences on sampled coordinates.

    ``model_fn`` must be deterministic and return a scalar tensor. The relative
    error of one coordinate is ``|a - n| / max(|a|, |n|, floor)``. The floor
    keeps coordinates whose gradient is below what central differences can
    resolve (roughly ``ulp(loss) / h``) from dominating the report; with the
    defaults it amounts to an absolute tolerance of ``1e-5 * threshold``.

    ``numeric_params`` lets the finite differences run on a separate copy of the
    parameters (for instance a float64 shadow of float32 weights); it defaults to
    ``params`` itself.
    """
    for p in params.values():
        p.zero_grad()
    with Tape() as tape:
        loss = model_fn(params)
    backward(tape, loss)

    shadow = params if numeric_params is None else numeric_params
    rng = np.random.default_rng(seed)
    report = GradcheckReport()
    for name, flat in _sample_coordinates(params, n_samples, rng):
        p = params[name]
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[flat])
        q = shadow[name].data.reshape(-1)
        orig = q[flat]
        q[flat] = orig + h
        f_plus = float(model_fn(shadow).data)
        q[flat] = orig - h
        f_minus = float(model_fn(shadow).data)
        q[flat] = orig
        numeric = (f_plus - f_minus) / (2 * h)
        denom = max(abs(analytic), abs(numeric), floor)
        report.checks.append(
            CoordinateCheck(name, unravel_index(p.shape, flat), analytic, numeric, abs(analytic - numeric) / denom)
        )
    return report
