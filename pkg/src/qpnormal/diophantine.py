"""Finite-range Diophantine constants and recurrence times on the torus."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import DomainError, ResonanceError

TWO_PI = 2 * math.pi
_NORMS = {"l1": lambda K: np.abs(K).sum(-1),
          "linf": lambda K: np.abs(K).max(-1),
          "l2": lambda K: np.sqrt((K.astype(float) ** 2).sum(-1))}


@dataclass
class DiophantineCert:
    vector: np.ndarray
    tau: float
    gamma_est: float
    k_max: int
    worst_k: tuple
    norm: str = "l1"


def _half_box(n, k_max, chunk=200_000):
    """Integer vectors with |k|_inf <= k_max whose first nonzero entry is positive."""
    if n == 1:
        yield np.arange(1, k_max + 1).reshape(-1, 1)
        return
    # lead coordinate = first nonzero; the rest are free.
    for lead in range(n):
        free = n - lead - 1
        for a in range(1, k_max + 1):
            rng = np.arange(-k_max, k_max + 1)
            if free == 0:
                K = np.zeros((1, n), dtype=np.int64)
                K[0, lead] = a
                yield K
                continue
            rows = (2 * k_max + 1) ** free
            for start in range(0, rows, chunk):
                idx = np.arange(start, min(rows, start + chunk))
                K = np.zeros((len(idx), n), dtype=np.int64)
                K[:, lead] = a
                rem = idx.copy()
                for j in range(free - 1, -1, -1):
                    K[:, lead + 1 + j] = rng[rem % (2 * k_max + 1)]
                    rem //= 2 * k_max + 1
                yield K


def estimate_gamma(v, tau, k_max, norm="l1", resonance_tol=1e-12):
    """gamma_est = min over 0 < |k|_inf <= k_max of |v.k| |k|^tau.

    The weight |k| uses the chosen norm (l1 by default, matching |k| + |l|).
    Sign symmetry k -> -k halves the box.
    """
    if k_max < 1:
        raise DomainError("k_max must be >= 1")
    v = np.asarray(v, dtype=float).reshape(-1)
    weight = _NORMS[norm]
    best, best_k = math.inf, None
    scale = float(np.abs(v).sum())
    for K in _half_box(len(v), int(k_max)):
        dots = np.abs(K @ v)
        w = weight(K).astype(float)
        hit = dots <= resonance_tol * (1 + scale * w)
        if hit.any():
            k = tuple(int(x) for x in K[np.argmax(hit)])
            raise ResonanceError(f"resonant: v.k = 0 at k = {k}", k=k)
        vals = dots * w ** tau
        i = int(np.argmin(vals))
        # ties resolved by the enumeration order, which is fixed.
        if vals[i] < best:
            best, best_k = float(vals[i]), tuple(int(x) for x in K[i])
    return DiophantineCert(v, float(tau), best, int(k_max), best_k, norm)


def ergodization_bound(gamma, tau, delta, m=None, a_m=1.0):
    """T = gamma^{-1} (a_m / delta)^tau."""
    if delta <= 0:
        raise DomainError("delta must be positive")
    return (a_m / delta) ** tau / gamma


def fit_a_m(T_measured, gamma, tau, delta):
    """a_m that makes the ergodization bound equal a measured time."""
    return delta * (gamma * T_measured) ** (1.0 / tau)


def torus_distance(phi):
    """Distance of phi to 0 on T^m: per-coordinate wrap, combined by maximum."""
    phi = np.asarray(phi, dtype=float)
    w = np.abs(np.remainder(phi + math.pi, TWO_PI) - math.pi)
    return w.max(axis=-1) if w.ndim else float(w)


def _orbit_distance(omega, t):
    t = np.asarray(t, dtype=float)
    return torus_distance(np.multiply.outer(t, omega))


@dataclass
class RecurrenceSchedule:
    omega: np.ndarray
    delta: float
    T_window: float
    times: list = field(default_factory=list)
    distances: list = field(default_factory=list)
    windows: list = field(default_factory=list)
    misses: list = field(default_factory=list)

    def rows(self):
        return [(j, t, d, j * self.T_window, (j + 1) * self.T_window)
                for j, t, d in zip(self.windows, self.times, self.distances)]


def _refine(omega, t0, h, lo, hi):
    f = lambda t: float(_orbit_distance(omega, t))
    a, b = max(lo, t0 - h), min(hi, t0 + h)
    if f(t0) == 0.0 or b <= a:
        return t0
    try:
        res = minimize_scalar(f, bracket=(a, t0, b), method="golden",
                              tol=1e-15, options={"maxiter": 500})
        t = float(res.x)
    except ValueError:
        t = t0
    t = min(max(t, lo), hi)
    return t if f(t) <= f(t0) else t0


def find_recurrence_times(omega, delta, j_count, T_window, j_start=0):
    """One t_j per window [jT, (j+1)T] with ||omega t_j||_{T^m} < delta.

    A grid at step delta/(2|omega|_inf) locates the window minimum, which is
    then refined by golden-section search. Windows without a hit are listed
    in `misses` with their minimum distance.
    """
    omega = np.asarray(omega, dtype=float).reshape(-1)
    if delta <= 0 or T_window <= 0:
        raise DomainError("delta and T_window must be positive")
    h = delta / (2 * np.abs(omega).max())
    sched = RecurrenceSchedule(omega, float(delta), float(T_window))
    for j in range(j_start, j_start + j_count):
        lo, hi = j * T_window, (j + 1) * T_window
        n = int(math.ceil((hi - lo) / h)) + 1
        grid = np.linspace(lo, hi, n)
        d = _orbit_distance(omega, grid)
        i = int(np.argmin(d))
        t = _refine(omega, float(grid[i]), hi - lo if n < 3 else grid[1] - grid[0], lo, hi)
        dist = float(_orbit_distance(omega, t))
        if dist < delta:
            sched.times.append(t)
            sched.distances.append(dist)
            sched.windows.append(j)
        else:
            sched.misses.append((j, dist))
    return sched


def empirical_ergodization_time(omega, delta, t_max, chunk=200_000):
    """First time the orbit from 0 has entered every cell of a delta-grid on T^m.

    Returns inf when some cell is still unvisited at t_max.
    """
    omega = np.asarray(omega, dtype=float).reshape(-1)
    m = len(omega)
    cells = int(math.ceil(TWO_PI / delta))
    seen = np.zeros((cells,) * m, dtype=bool)
    left = seen.size
    h = delta / (2 * np.abs(omega).max())
    t0 = 0.0
    while t0 <= t_max:
        t = t0 + h * np.arange(chunk)
        t = t[t <= t_max]
        if not len(t):
            break
        idx = np.floor(np.remainder(np.multiply.outer(t, omega), TWO_PI) / delta).astype(int)
        idx = np.minimum(idx, cells - 1)
        flat = np.ravel_multi_index(idx.T, seen.shape)
        fresh_mask = ~seen.reshape(-1)[flat]
        if fresh_mask.any():
            fresh_flat, first = np.unique(flat[fresh_mask], return_index=True)
            seen.reshape(-1)[fresh_flat] = True
            left -= len(fresh_flat)
            if left == 0:
                # last cell visited: latest first-visit time in this chunk
                return float(t[fresh_mask][first].max())
        t0 = float(t[-1]) + h
    return math.inf
