"""Model builders: the 3-periodic Ising chain, the 1D generalised Hubbard chain
and user-specified systems. Each returns a (NumberFamily, drive) pair."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, DomainError, InvariantError, ResonanceError
from .lattice import Lattice
from .opalg import (DIVISOR_FLOOR, NumberFamily, QPOperator, _Acc,
                    check_strong_locality, to_dense)

SX = np.array([[0, 1], [1, 0]], dtype=complex)
SY = np.array([[0, -1j], [1j, 0]], dtype=complex)
SZ = np.array([[1, 0], [0, -1]], dtype=complex)
ID2 = np.eye(2, dtype=complex)
PAULI = {"I": ID2, "X": SX, "Y": SY, "Z": SZ}


def pauli_word(word):
    out = np.ones((1, 1), dtype=complex)
    for ch in word.upper():
        out = np.kron(out, PAULI[ch])
    return out


def _mode_key(l, m):
    l = tuple(int(x) for x in np.atleast_1d(l)) if m else ()
    if len(l) != m:
        raise DomainError(f"mode {l} has wrong length for m={m}")
    return l


def _check_real_modes(modes, what):
    for l, a in modes.items():
        neg = tuple(-x for x in l)
        if abs(complex(modes.get(neg, 0.0)) - np.conj(complex(a))) > 1e-14:
            raise DomainError(f"{what} is not real: amplitude of {neg} must be conj of {l}")


def cos_modes(m, weights):
    """Modes of sum_i w_i cos(phi_i): amplitude w_i/2 at +-e_i."""
    out = {}
    for i, w in enumerate(weights):
        if w:
            e = [0] * m
            e[i] = 1
            out[tuple(e)] = out.get(tuple(e), 0.0) + w / 2
            e[i] = -1
            out[tuple(e)] = out.get(tuple(e), 0.0) + w / 2
    return out


# ------------------------------------------------------------------ Ising

@dataclass
class IsingSpec:
    L: int = 1
    J: float = 1.0
    h: tuple = (0.0, 0.0, 0.0)
    drive_modes: dict = field(default_factory=dict)
    m: int = 1
    regime: str = "small"
    epsilon: float = 0.05
    lam: float = 1.0

    @property
    def jvec(self):
        return np.array([-self.h[0], -self.h[1], -self.h[2], -self.J], dtype=float)


def ising_numbers(lattice):
    n = lattice.n_sites
    items = [[] for _ in range(4)]
    for i in range(n):
        items[i % 3].append(((i,), (), SZ))
        items[3].append(((i, (i + 1) % n), (), np.kron(SZ, SZ)))
    return [QPOperator.from_terms(lattice, 0, 2, it, hermitian=True) for it in items]


def build_ising(spec):
    """Ising ring [-3L, 3L-1] with sublattice fields and a transverse drive B(phi).

    Returns the family (N^(1..4), J) with J = (-h1, -h2, -h3, -J) and the drive
    sum_x B(phi) sigma^1_x decomposed on the five-site arcs |y - x| <= 2.
    In the small regime the drive is multiplied by epsilon.
    """
    if spec.L < 1:
        raise DomainError("Ising chain needs L >= 1")
    if spec.regime not in ("small", "fast"):
        raise DomainError(f"unknown regime {spec.regime!r}")
    lat = Lattice.ising_ring(spec.L)
    fam = NumberFamily([N.with_modes(spec.m) for N in ising_numbers(lat)], spec.jvec)
    modes = {_mode_key(l, spec.m): complex(a) for l, a in spec.drive_modes.items()}
    _check_real_modes(modes, "B(phi)")
    scale = spec.epsilon if spec.regime == "small" else 1.0
    acc = _Acc(2)
    for i in range(lat.n_sites):
        S = lat.ball(i, 2)
        for l, a in sorted(modes.items()):
            if a != 0:
                acc.add(S, l, (i,), scale * a * SX)
    V = QPOperator(lat, spec.m, 2, acc.terms(), hermitian=True)
    return fam, V


def ising_h0_literal(spec):
    """Dense -J sum s s - sum_a h_a sum_{Lambda_a} s at B = 0, built from scratch."""
    n = 6 * spec.L
    dim = 2 ** n
    bits = (np.arange(dim)[:, None] >> (n - 1 - np.arange(n))[None, :]) & 1
    s = 1 - 2 * bits
    e = -spec.J * (s * np.roll(s, -1, axis=1)).sum(1)
    for a in range(3):
        e = e - spec.h[a] * s[:, a::3].sum(1)
    return np.diag(e.astype(complex))


# ---------------------------------------------------------------- Hubbard

@dataclass
class HubbardSpec:
    L: int = 3
    r: int = 1
    J: tuple = (1.0,)
    hopping_modes: dict = field(default_factory=dict)
    m: int = 1
    epsilon: float = 0.05
    d: int = 1

    def edge_modes(self, x, y):
        hm = self.hopping_modes
        if hm and isinstance(next(iter(hm)), tuple) and len(next(iter(hm))) == 2 \
                and isinstance(next(iter(hm.values())), dict):
            return hm.get((x, y), hm.get((y, x), {}))
        return hm


@lru_cache(maxsize=None)
def jw_annihilators(n_modes):
    """a_j = Z...Z sigma^- I...I on n_modes qubits, |1> = occupied."""
    lower = np.array([[0, 1], [0, 0]], dtype=complex)
    out = []
    for j in range(n_modes):
        op = np.ones((1, 1), dtype=complex)
        for i in range(n_modes):
            op = np.kron(op, SZ if i < j else (lower if i == j else ID2))
        out.append(op)
    return tuple(out)


N_UP = np.diag([0, 0, 1, 1]).astype(complex)
N_DN = np.diag([0, 1, 0, 1]).astype(complex)


def _site_diag(ops, E):
    """Kron of per-site 4x4 matrices over E (identity where absent)."""
    out = np.ones((1, 1), dtype=complex)
    for s in E:
        out = np.kron(out, ops.get(s, np.eye(4, dtype=complex)))
    return out


def hubbard_numbers(lattice, r, m=0):
    n = lattice.n_sites
    ops = []
    for a in range(1, r + 1):
        items = []
        for x in range(n):
            ys = [y for y in range(n) if abs(y - x) == a]
            if not ys:
                continue
            E = tuple(sorted([x] + ys))
            M = np.zeros((4 ** len(E),) * 2, dtype=complex)
            for y in ys:
                M += _site_diag({x: N_UP, y: N_DN}, E)
            items.append((lattice.ball(x, a), (0,) * m, M, E))
        ops.append(QPOperator.from_terms(lattice, m, 4, items, hermitian=True, do_trim=False))
    return ops


def hop_matrix(x, y, spin, E):
    """a^+_{x,spin} a_{y,spin} on the consecutive sites E (local Jordan-Wigner)."""
    a = jw_annihilators(2 * len(E))
    pos = {s: i for i, s in enumerate(E)}
    i, j = 2 * pos[x] + spin, 2 * pos[y] + spin
    return a[i].conj().T @ a[j]


def build_hubbard_1d(spec):
    """1D generalised Hubbard chain on sites 0..L-1 (open).

    Each undirected bond {x, x+1} is stored once, on the support
    S'_x = {|y - x| <= 2r + 1} of its left end.
    """
    if spec.d != 1:
        raise DomainError("fermionic models are implemented in one dimension only")
    if len(spec.J) != spec.r:
        raise DomainError("J must have r entries")
    lat = Lattice.segment(spec.L)
    fam = NumberFamily(hubbard_numbers(lat, spec.r, spec.m), spec.J)
    acc = _Acc(4)
    for x in range(spec.L - 1):
        y = x + 1
        modes = {_mode_key(l, spec.m): complex(v) for l, v in spec.edge_modes(x, y).items()}
        _check_real_modes(modes, f"K_{x},{y}")
        E = (x, y)
        hop = sum(hop_matrix(x, y, s, E) for s in (0, 1))
        hop = hop + hop.conj().T
        S = lat.ball(x, 2 * spec.r + 1)
        for l, v in sorted(modes.items()):
            if v != 0:
                acc.add(S, l, E, spec.epsilon * v * hop)
    V = QPOperator(lat, spec.m, 4, acc.terms(), hermitian=True)
    return fam, V


def first_order_zeff_hubbard(spec, omega, floor=DIVISOR_FLOOR):
    """Z^(1) from the explicit projector formula (independent of the generic grading).

    For every bond and spin, the hop a^+_x a_y is split by the joint kernel of
    D_a = sum_{|eta-x|=a} n_{eta,-s} - sum_{|eta-y|=a} n_{eta,-s}, and each piece
    is weighted by 1 at (l, k) = (0, 0) and by (J.k)/(omega.l + J.k) otherwise.
    """
    omega = np.asarray(omega, dtype=float)
    J = np.asarray(spec.J, dtype=float)
    lat = Lattice.segment(spec.L)
    n = spec.L
    acc = _Acc(4)
    zl = (0,) * spec.m
    for x in range(n - 1):
        y = x + 1
        modes = {_mode_key(l, spec.m): complex(v) for l, v in spec.edge_modes(x, y).items()}
        E = tuple(range(max(0, x - spec.r), min(n - 1, y + spec.r) + 1))
        S = lat.ball(x, 2 * spec.r + 1)
        for s in (0, 1):
            other = N_DN if s == 0 else N_UP
            Dk = np.zeros((4 ** len(E), spec.r))
            for a in range(1, spec.r + 1):
                for eta in E:
                    if abs(eta - x) == a:
                        Dk[:, a - 1] += np.real(np.diag(_site_diag({eta: other}, E)))
                    if abs(eta - y) == a:
                        Dk[:, a - 1] -= np.real(np.diag(_site_diag({eta: other}, E)))
            h = hop_matrix(x, y, s, E)
            for k in np.unique(np.round(Dk).astype(int), axis=0):
                P = np.diag(np.all(np.round(Dk) == k, axis=1).astype(complex))
                jk = float(J @ k)
                for l, v in modes.items():
                    if l == zl and not k.any():
                        c = 1.0
                    elif not k.any():
                        continue
                    else:
                        div = float(omega @ np.array(l)) + jk if spec.m else jk
                        if abs(div) < floor:
                            raise ResonanceError(f"resonant mode k={tuple(k)}, l={l}",
                                                 k=tuple(k), l=l, divisor=abs(div))
                        c = jk / div
                    M = spec.epsilon * c * (v * h @ P + np.conj(v) * h.conj().T @ P)
                    acc.add(S, zl, E, M)
    return QPOperator(lat, spec.m, 4, acc.terms(), hermitian=True)


def occupation_basis_index(occ):
    """Basis index for per-site (n_up, n_dn) pairs, site 0 most significant."""
    idx = 0
    for up, dn in occ:
        idx = idx * 4 + 2 * int(up) + int(dn)
    return idx


def selection_table(spec, occ):
    """Single-hop moves from an occupation state and the shift of (N^(1..r)) they cause."""
    fam, _ = build_hubbard_1d(spec)
    Ns = [np.real(np.diag(to_dense(N))) for N in fam.operators]
    i0 = occupation_basis_index(occ)
    rows = []
    for x in range(spec.L):
        for y in (x - 1, x + 1):
            if not 0 <= y < spec.L:
                continue
            for s in (0, 1):
                if occ[y][s] and not occ[x][s]:
                    new = [list(o) for o in occ]
                    new[y][s], new[x][s] = 0, 1
                    i1 = occupation_basis_index(new)
                    shift = tuple(int(round(N[i1] - N[i0])) for N in Ns)
                    allowed = abs(float(np.dot(spec.J, shift))) < 1e-12
                    rows.append({"from": y, "to": x, "spin": "ud"[s], "dN": shift,
                                 "resonant": allowed})
    return rows


# ----------------------------------------------------------------- custom

def parse_matrix(spec, q, n_sites):
    if isinstance(spec, str):
        if q != 2:
            raise ConfigError("Pauli words need q = 2")
        if len(spec) != n_sites:
            raise ConfigError(f"Pauli word {spec!r} does not match {n_sites} sites")
        return pauli_word(spec)
    arr = np.asarray(spec, dtype=float)
    if arr.ndim == 3 and arr.shape[-1] == 2:
        arr = arr[..., 0] + 1j * arr[..., 1]
    return np.asarray(arr, dtype=complex)


def build_custom(config):
    """Model from user data; every family and locality check must pass.

    config keys: lattice (description dict), q, m, numbers (list of
    {J, terms: [{sites, matrix, eff?}]}), drive (list of {sites, l, matrix, eff?}).
    """
    try:
        lat = Lattice.from_description(config["lattice"])
        q = int(config["q"])
        m = int(config.get("m", 1))
        numbers = config.get("numbers", [])
        drive = config.get("drive", [])
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"custom model: missing or bad key ({exc})") from exc

    def items(terms, default_l):
        out = []
        for t in terms:
            sites = [tuple(s) if isinstance(s, (list, tuple)) else int(s) for s in t["sites"]]
            eff = t.get("eff")
            eff = [tuple(s) if isinstance(s, (list, tuple)) else int(s) for s in eff] if eff else None
            M = parse_matrix(t["matrix"], q, len(eff or sites))
            l = tuple(t.get("l", default_l)) if m else ()
            out.append((sites, l, M, eff) if eff else (sites, l, M))
        return out

    ops = [QPOperator.from_terms(lat, m, q, items(nb["terms"], (0,) * m), hermitian=True)
           for nb in numbers]
    J = [float(nb["J"]) for nb in numbers]
    try:
        fam = NumberFamily(ops, J) if ops else NumberFamily.trivial(lat, q)
    except InvariantError as exc:
        raise InvariantError(f"custom model rejected: {exc}") from exc
    V = QPOperator.from_terms(lat, m, q, items(drive, (0,) * m), hermitian=True)
    if V.hermiticity_defect() > 1e-12:
        raise InvariantError("custom model rejected: drive is not self-adjoint")
    rep = check_strong_locality(V, fam)
    if not rep.ok:
        raise InvariantError(f"custom model rejected: strong locality fails at {rep.pair} "
                             f"(commutator {rep.worst:.3e})")
    return fam, V


def ising_custom_config(spec):
    """The Ising model written out as a custom-model config."""
    lat = Lattice.ising_ring(spec.L)
    n = lat.n_sites
    numbers = []
    for a in range(3):
        numbers.append({"J": -spec.h[a],
                        "terms": [{"sites": [i], "matrix": "Z"} for i in range(a, n, 3)]})
    numbers.append({"J": -spec.J, "terms": [{"sites": sorted([i, (i + 1) % n]), "matrix": "ZZ"}
                                            for i in range(n)]})
    scale = spec.epsilon if spec.regime == "small" else 1.0
    drive = []
    for i in range(n):
        for l, a in sorted(spec.drive_modes.items()):
            M = scale * complex(a) * SX
            drive.append({"sites": list(lat.ball(i, 2)), "eff": [i], "l": list(l),
                          "matrix": np.stack([M.real, M.imag], -1).tolist()})
    return {"lattice": lat.describe(), "q": 2, "m": spec.m, "numbers": numbers,
            "drive": drive}
