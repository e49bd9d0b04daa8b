"""Finite-difference validation of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .params import ParamStore
from .rng import RngStream


class GradientMissingError(RuntimeError):
    pass


@dataclass
class CoordCheck:
    name: str
    flat_index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    coords: list[CoordCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tol

    def __str__(self):
        worst = max(self.coords, key=lambda c: c.rel_error) if self.coords else None
        head = f"grad_check: {'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.3e} tol={self.tol:.1e}"
        if worst is not None:
            head += f" (worst: {worst.name}[{worst.flat_index}] analytic={worst.analytic:.6e} numeric={worst.numeric:.6e})"
        return head


def grad_check(f, params: ParamStore, eps: float = 1e-4, tol: float = 1e-3,
               n_coords: int | None = None, rng: RngStream | None = None) -> GradCheckReport:
    """Compare the analytic gradient of scalar `f(params)` against central
    finite differences on sampled parameter coordinates.

    The check runs on a float64 copy of the parameters so the difference
    quotient is not drowned by single-precision rounding; `f` must be pure
    and deterministic given the store it receives.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    p64 = params.astype(np.float64)

    p64.zero_grad()
    out = f(p64)
    out.backward()
    base_scale = max(1.0, abs(out.item()))

    coords: list[tuple[str, int]] = []
    all_coords = [(name, i) for name, t in p64.items() for i in range(t.data.size)]
    if n_coords is None or n_coords >= len(all_coords):
        coords = all_coords
    else:
        rng = rng or RngStream(0)
        picks = set()
        while len(picks) < n_coords:
            picks.add(rng.randint(0, len(all_coords)))
        coords = [all_coords[i] for i in sorted(picks)]

    checks: list[CoordCheck] = []
    for name, idx in coords:
        t = p64[name]
        if t.grad is None:
            raise GradientMissingError(f"no analytic gradient for touched parameter {name!r}")
        multi = np.unravel_index(idx, t.data.shape)  # layout-proof coordinate access
        analytic = float(t.grad[multi])
        original = float(t.data[multi])
        t.data[multi] = original + eps
        f_plus = f(p64).item()
        t.data[multi] = original - eps
        f_minus = f(p64).item()
        t.data[multi] = original
        numeric = (f_plus - f_minus) / (2.0 * eps)
        scale = max(abs(analytic), abs(numeric), 1e-8 * base_scale)
        rel = abs(analytic - numeric) / scale
        checks.append(CoordCheck(name, idx, analytic, numeric, rel))

    max_rel = max((c.rel_error for c in checks), default=0.0)
    return GradCheckReport(max_rel_error=max_rel, tol=tol, coords=checks)
