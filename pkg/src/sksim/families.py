"""Spatial coefficient functions and the named closed-form families.

Every coefficient of the model (drift, diffusion, branching coefficients,
martingale candidates, test functions) is a ``SpatialFn``: a vectorised
map from positions to reals, with optional closed-form gradient and a
certified sup bound over a reference grid.

Evaluators are built from module-level functions via ``functools.partial``
so that ``SpatialFn`` instances pickle cleanly into worker processes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import partial
from typing import Callable, Optional

import numpy as np

from .exceptions import ConfigError, ModelError


@dataclass(frozen=True)
class SpatialFn:
    """A scalar function of position on the domain.

    ``bound`` is the certified sup of |value| over the grid the function was
    certified on (``None`` until :func:`certify` has run).  When
    ``gradient_evaluator`` is absent, consumers fall back to central finite
    differences on the grid and flag the gradient as approximate.
    """

    evaluator: Callable[[np.ndarray], np.ndarray]
    gradient_evaluator: Optional[Callable[[np.ndarray], np.ndarray]] = None
    bound: Optional[float] = None
    tag: str = ""

    def __call__(self, x):
        return self.evaluator(np.asarray(x, dtype=float))

    def gradient(self, x, h: float = 1e-6):
        """Gradient at ``x``; central difference of width ``h`` if no closed form."""
        x = np.asarray(x, dtype=float)
        if self.gradient_evaluator is not None:
            return self.gradient_evaluator(x)
        return (self.evaluator(x + h) - self.evaluator(x - h)) / (2.0 * h)

    @property
    def has_gradient(self) -> bool:
        return self.gradient_evaluator is not None


def certify(fn: SpatialFn, grid: np.ndarray) -> SpatialFn:
    """Evaluate ``fn`` on ``grid``, assert finiteness, and record the sup bound."""
    vals = np.asarray(fn(grid), dtype=float)
    if vals.shape != grid.shape:
        vals = np.broadcast_to(vals, grid.shape)
    if not np.all(np.isfinite(vals)):
        raise ModelError(f"spatial function {fn.tag!r} is not finite on the grid")
    return replace(fn, bound=float(np.max(np.abs(vals))))


# ---------------------------------------------------------------------------
# closed-form families


def _const(x, value):
    return np.full_like(np.asarray(x, dtype=float), value)


def _zero(x):
    return np.zeros_like(np.asarray(x, dtype=float))


def _affine(x, intercept, slope):
    return intercept + slope * np.asarray(x, dtype=float)


def _affine_grad(x, slope):
    return np.full_like(np.asarray(x, dtype=float), slope)


def _gaussian_bump(x, amplitude, center, width):
    z = (np.asarray(x, dtype=float) - center) / width
    return amplitude * np.exp(-0.5 * z * z)


def _gaussian_bump_grad(x, amplitude, center, width):
    x = np.asarray(x, dtype=float)
    z = (x - center) / width
    return -amplitude * z / width * np.exp(-0.5 * z * z)


def _cosine(x, amplitude, wavenumber, phase):
    # non-negative by construction: amplitude * (1 + cos(k x + phase)) / 2
    return 0.5 * amplitude * (1.0 + np.cos(wavenumber * np.asarray(x, dtype=float) + phase))


def _cosine_grad(x, amplitude, wavenumber, phase):
    return -0.5 * amplitude * wavenumber * np.sin(wavenumber * np.asarray(x, dtype=float) + phase)


def _exponential(x, rate):
    return np.exp(rate * np.asarray(x, dtype=float))


def _exponential_grad(x, rate):
    return rate * np.exp(rate * np.asarray(x, dtype=float))


def _sine(x, amplitude, wavenumber, phase):
    return amplitude * np.sin(wavenumber * np.asarray(x, dtype=float) + phase)


def _sine_grad(x, amplitude, wavenumber, phase):
    return amplitude * wavenumber * np.cos(wavenumber * np.asarray(x, dtype=float) + phase)


def constant(value: float, tag: str = "") -> SpatialFn:
    return SpatialFn(partial(_const, value=float(value)), partial(_zero),
                     bound=abs(float(value)), tag=tag or f"constant({value})")


def affine(intercept: float, slope: float, tag: str = "") -> SpatialFn:
    return SpatialFn(partial(_affine, intercept=float(intercept), slope=float(slope)),
                     partial(_affine_grad, slope=float(slope)),
                     tag=tag or f"affine({intercept},{slope})")


def gaussian_bump(amplitude: float, center: float, width: float, tag: str = "") -> SpatialFn:
    if width <= 0:
        raise ConfigError("gaussian-bump width must be positive")
    return SpatialFn(partial(_gaussian_bump, amplitude=float(amplitude),
                             center=float(center), width=float(width)),
                     partial(_gaussian_bump_grad, amplitude=float(amplitude),
                             center=float(center), width=float(width)),
                     tag=tag or f"gaussian-bump({amplitude},{center},{width})")


def cosine(amplitude: float, wavenumber: float, phase: float = 0.0, tag: str = "") -> SpatialFn:
    return SpatialFn(partial(_cosine, amplitude=float(amplitude),
                             wavenumber=float(wavenumber), phase=float(phase)),
                     partial(_cosine_grad, amplitude=float(amplitude),
                             wavenumber=float(wavenumber), phase=float(phase)),
                     tag=tag or f"cosine({amplitude},{wavenumber},{phase})")


def exponential(rate: float, tag: str = "") -> SpatialFn:
    return SpatialFn(partial(_exponential, rate=float(rate)),
                     partial(_exponential_grad, rate=float(rate)),
                     tag=tag or f"exp({rate})")


def sine(amplitude: float, wavenumber: float, phase: float = 0.0, tag: str = "") -> SpatialFn:
    return SpatialFn(partial(_sine, amplitude=float(amplitude),
                             wavenumber=float(wavenumber), phase=float(phase)),
                     partial(_sine_grad, amplitude=float(amplitude),
                             wavenumber=float(wavenumber), phase=float(phase)),
                     tag=tag or f"sine({amplitude},{wavenumber},{phase})")


_FAMILY_BUILDERS = {
    "constant": lambda p: constant(p["value"]),
    "affine": lambda p: affine(p["intercept"], p["slope"]),
    "gaussian-bump": lambda p: gaussian_bump(p["amplitude"], p["center"], p["width"]),
    "cosine": lambda p: cosine(p["amplitude"], p["wavenumber"], p.get("phase", 0.0)),
    "sine": lambda p: sine(p["amplitude"], p["wavenumber"], p.get("phase", 0.0)),
    "exp": lambda p: exponential(p["rate"]),
}


def from_spec(spec: dict) -> SpatialFn:
    """Build a SpatialFn from a config mapping, e.g. {"family": "constant", "value": 1.0}."""
    if not isinstance(spec, dict) or "family" not in spec:
        raise ConfigError(f"spatial function spec must carry a 'family' key, got {spec!r}")
    family = spec["family"]
    try:
        builder = _FAMILY_BUILDERS[family]
    except KeyError:
        raise ConfigError(f"unknown spatial family {family!r}; "
                          f"known: {sorted(_FAMILY_BUILDERS)}") from None
    try:
        return builder(spec)
    except KeyError as exc:
        raise ConfigError(f"family {family!r} missing parameter {exc}") from None


def is_constant(fn: SpatialFn) -> bool:
    """True when the evaluator is from the constant family."""
    ev = fn.evaluator
    return isinstance(ev, partial) and ev.func is _const
