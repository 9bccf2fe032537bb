"""Interrogation-volume cost model and neighbour-list lifetime predictor."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class CostDomainError(ValueError):
    pass


@dataclass(frozen=True)
class CostParams:
    r_cut: float = 2.5
    delta_R: float = 0.4
    N: int = 27000
    T: float = 1.0
    m: float = 1.0
    dt: float = 0.005
    L: int | None = None

    def __post_init__(self):
        for k in ("r_cut", "delta_R", "T", "m", "dt"):
            if getattr(self, k) <= 0:
                raise CostDomainError(f"{k} must be positive")
        if self.N < 2:
            raise CostDomainError("N must be at least 2")
        if self.L is not None and self.L < 1:
            raise CostDomainError("L must be >= 1")

    def lifetime(self) -> int:
        if self.L is not None:
            return self.L
        return nl_lifetime(self.delta_R, self.dt, v_n(self.N, self.T, self.m))


def v_ideal(r_cut: float) -> float:
    return 4.0 / 3.0 * math.pi * r_cut ** 3


def v_cca(r_cut: float) -> float:
    return 27.0 * r_cut ** 3


def v_nla(r_cut: float, delta_R: float, L: int) -> float:
    """Sphere of radius r+dR per molecule plus a CCA rebuild amortised over L steps."""
    if L < 1:
        raise CostDomainError("L must be >= 1")
    r = r_cut + delta_R
    return (4.0 / 3.0 * math.pi + 27.0 / L) * r ** 3


def n_c(x: float) -> int:
    """Cubes of side 1 with a corner closer than ``x`` to a corner of the central cube.

    The central cube counts.  Two cubes at integer offset ``(i, j, k)`` have
    closest corners separated by ``max(|i|-1, 0)`` along each axis.
    """
    if x <= 0:
        raise CostDomainError("x must be positive")
    x2 = x * x
    # thresholds are integers; absorb round-off from x = r/w
    if abs(x2 - round(x2)) <= 1e-12 * x2:
        x2 = float(round(x2))
    b = int(math.ceil(x)) + 1
    g = np.maximum(np.abs(np.arange(-b, b + 1)) - 1, 0) ** 2
    s = g[:, None, None] + g[None, :, None] + g[None, None, :]
    return int((s < x2).sum())


def v_aica(r_cut: float, w: float) -> float:
    return float(n_c(r_cut / w) * w ** 3)


def n_c_breakpoints(x_max: float) -> np.ndarray:
    """Values of ``x`` where ``n_c`` jumps (just above each is a new count): sqrt of sums of three squares."""
    b = int(math.ceil(x_max))
    v = np.arange(b + 1) ** 2
    s = np.unique((v[:, None, None] + v[None, :, None] + v[None, None, :]).ravel())
    s = s[(s > 0) & (s < x_max * x_max)]
    return np.sqrt(s)


# -- Lambert W, lower branch ------------------------------------------------------

def lambert_w_minus1(x: float, tol: float = 1e-12, max_iter: int = 100) -> float:
    """Lower real branch of Lambert W on ``[-1/e, 0)``: ``w <= -1`` with ``w e^w = x``."""
    x = float(x)
    e_inv = -math.exp(-1.0)
    if not (e_inv - 1e-15 <= x < 0.0):
        raise CostDomainError(f"W_-1 undefined for x = {x!r} (need -1/e <= x < 0)")
    if x <= e_inv:
        return -1.0
    p2 = 2.0 * (math.e * x + 1.0)
    if p2 < 0.25:
        # series about the branch point
        p = -math.sqrt(p2)
        w = -1.0 + p - p * p / 3.0 + 11.0 / 72.0 * p ** 3
    else:
        L1 = math.log(-x)
        L2 = math.log(-L1)
        w = L1 - L2 + L2 / L1
    for _ in range(max_iter):
        ew = math.exp(w)
        f = w * ew - x
        if abs(f) <= tol * abs(x):
            break
        # Halley step
        wp1 = w + 1.0
        if wp1 == 0.0:
            break
        step = f / (ew * wp1 - (w + 2.0) * f / (2.0 * wp1))
        w_new = w - step
        if w_new > -1.0:
            w_new = 0.5 * (w - 1.0)
        w = w_new
    return min(w, -1.0)


def maxwell_speed_pdf(v, T: float, m: float):
    """Maxwellian speed density in 3D."""
    a = m / (2.0 * math.pi * T)
    return 4.0 * math.pi * a ** 1.5 * np.square(v) * np.exp(-m * np.square(v) / (2.0 * T))


def v_n(N: float, T: float = 1.0, m: float = 1.0) -> float:
    """High-speed root of ``pdf(v) = 1/N``: speed exceeded by about one molecule in N."""
    if N < 2 or T <= 0 or m <= 0:
        raise CostDomainError("need N >= 2, T > 0, m > 0")
    arg = -math.sqrt(2.0 * math.pi * T / m) / (4.0 * N)
    if arg < -math.exp(-1.0):
        raise CostDomainError(f"N = {N} too small: W argument {arg:.4g} below -1/e")
    return math.sqrt(-2.0 * T / m * lambert_w_minus1(arg))


def nl_lifetime(delta_R: float, dt: float, vn: float) -> int:
    """Steps before a molecule at ``vn`` uses half the guard distance."""
    if delta_R <= 0 or dt <= 0 or vn <= 0:
        raise CostDomainError("delta_R, dt and v_N must be positive")
    return int(math.ceil(0.5 * delta_R / (dt * vn)))


# -- tables -----------------------------------------------------------------------

COST_COLUMNS = ("w_over_rcut", "V_ideal", "V_CCA", "V_NLA", "V_AICA")
LIFETIME_COLUMNS = ("T", "N", "v_N", "L")


def default_w_grid(lo: float = 0.05, hi: float = 1.0, n: int = 96) -> np.ndarray:
    """Uniform grid plus every point where V_AICA has a local minimum (n_c breakpoints)."""
    base = np.linspace(lo, hi, n)
    xs = n_c_breakpoints(1.0 / lo)
    extra = 1.0 / xs
    extra = extra[(extra >= lo) & (extra <= hi)]
    return np.unique(np.round(np.concatenate([base, extra, [1.0]]), 15))


def cost_curves(params: CostParams, w_grid=None):
    """Rows of (w/r_cut, V_ideal, V_CCA, V_NLA, V_AICA); w_grid is in units of r_cut."""
    w_grid = default_w_grid() if w_grid is None else np.asarray(w_grid, dtype=float)
    if (w_grid <= 0).any():
        raise CostDomainError("w grid must be positive")
    r = params.r_cut
    vi, vc = v_ideal(r), v_cca(r)
    vn = v_nla(r, params.delta_R, params.lifetime())
    return [(float(s), vi, vc, vn, v_aica(r, s * r)) for s in w_grid]


def crossover(params: CostParams, w_grid=None) -> float:
    """Largest w/r_cut on the grid at which V_AICA <= V_NLA (nan if none)."""
    rows = cost_curves(params, w_grid)
    ok = [s for s, _, _, vn, va in rows if va <= vn]
    return max(ok) if ok else float("nan")


def lifetime_table(Ts, Ns, delta_R: float = 0.4, dt: float = 0.005, m: float = 1.0):
    rows = []
    for N in Ns:
        for T in Ts:
            vn = v_n(N, T, m)
            rows.append((float(T), int(N), vn, nl_lifetime(delta_R, dt, vn)))
    return rows


def write_csv(path, columns, rows):
    with open(path, "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in row) + "\n")
