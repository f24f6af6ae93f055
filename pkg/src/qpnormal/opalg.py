"""Quasi-periodic quasi-local operators and their algebra.

An operator is a map (S, l) -> matrix, where S is a connected support
(sorted tuple of site indices), l an integer m-vector labelling the Fourier
mode e^{i l.phi}, and the matrix acts on the sites of S. To keep matrices
small, every term also records an effective support E, a subset of S on
which the matrix acts nontrivially; the matrix is stored on E only and is
tensored with identities on S minus E. Norms always use the declared |S|.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import (ContractError, ConvergenceError, DomainError,
                     InvariantError, ResonanceError, ResourceError)
from .lattice import connected

PRUNE_TOL = 1e-14
DIVISOR_FLOOR = 1e-12
CAP_ENV = "QPNORMAL_DENSE_CAP"
DEFAULT_CAP = 2 ** 14
_EPS = np.finfo(float).eps


def dense_cap():
    raw = os.environ.get(CAP_ENV)
    return int(raw) if raw else DEFAULT_CAP


def l1(v):
    return int(sum(abs(int(x)) for x in v))


@lru_cache(maxsize=None)
def _eye(n):
    return np.eye(n, dtype=complex)


def embed(M, E, F, q):
    """Extend a matrix acting on sites E to the superset F (both sorted).

    Leading axes of M, if any, are carried along (stacks of matrices).
    """
    E = tuple(E)
    F = tuple(F)
    if E == F:
        return M
    n = len(F)
    inside = set(E)
    extra = [s for s in F if s not in inside]
    if len(extra) + len(E) != n:
        raise DomainError(f"sites {E} not contained in {F}")
    lead = M.shape[:-2]
    d, r = M.shape[-1], q ** len(extra)
    big = (M[..., :, None, :, None] * _eye(r)[:, None, :]).reshape(lead + (d * r, d * r))
    where = {s: i for i, s in enumerate(list(E) + extra)}
    perm = [where[s] for s in F]
    nl = len(lead)
    T = big.reshape(lead + (q,) * (2 * n))
    T = T.transpose(list(range(nl)) + [nl + p for p in perm] + [nl + p + n for p in perm])
    return T.reshape(lead + (q ** n, q ** n))


def trim(M, E, q, tol=1e-13):
    """Drop sites of E on which M acts as the identity."""
    E = list(E)
    M = np.asarray(M, dtype=complex)
    changed = True
    while changed and E:
        changed = False
        n = len(E)
        for p in range(n):
            T = M.reshape((q,) * (2 * n))
            others = [a for a in range(n) if a != p]
            X = T.transpose([p, p + n] + others + [a + n for a in others])
            R = q ** (n - 1)
            X = X.reshape(q, q, R, R)
            Y = X[0, 0]
            ref = np.einsum("ab,ij->abij", np.eye(q), Y)
            scale = max(1.0, np.abs(M).max())
            if np.abs(X - ref).max() <= tol * scale:
                M = Y
                del E[p]
                changed = True
                break
    return tuple(E), M


@lru_cache(maxsize=4096)
def _offsets(E, n, q):
    """Basis-index offsets for digits at positions E and for the rest."""
    E = tuple(E)
    rest = [s for s in range(n) if s not in set(E)]
    w = [q ** (n - 1 - s) for s in range(n)]

    def table(pos):
        if not pos:
            return np.zeros(1, dtype=np.int64)
        grids = np.indices((q,) * len(pos)).reshape(len(pos), -1)
        return sum(grids[i] * w[s] for i, s in enumerate(pos)).astype(np.int64)

    return table(list(E)), table(rest)


class _Acc:
    """Accumulates (S, l) -> (E, M) merging effective supports on collision."""

    def __init__(self, q):
        self.q = q
        self.d = {}

    def add(self, S, l, E, M):
        key = (S, l)
        cur = self.d.get(key)
        if cur is None:
            self.d[key] = (E, M)
            return
        E0, M0 = cur
        if E0 == E:
            self.d[key] = (E, M0 + M)
        else:
            F = tuple(sorted(set(E0) | set(E)))
            self.d[key] = (F, embed(M0, E0, F, self.q) + embed(M, E, F, self.q))

    def terms(self, prune=PRUNE_TOL):
        return {k: v for k, v in self.d.items()
                if np.linalg.norm(v[1]) >= prune}


class QPOperator:
    """A(phi) = sum_S sum_l (A_S)_l e^{i l.phi}, stored term by term."""

    def __init__(self, lattice, m, q, terms=None, hermitian=False, lmax=None,
                 truncation=0.0):
        self.lattice = lattice
        self.m = int(m)
        self.q = int(q)
        self.terms = dict(terms) if terms else {}
        self.hermitian = bool(hermitian)
        self.lmax = lmax
        self.truncation = float(truncation)
        self._norms = {}

    @classmethod
    def zero(cls, lattice, m, q, **kw):
        return cls(lattice, m, q, **kw)

    @classmethod
    def from_terms(cls, lattice, m, q, items, hermitian=False, lmax=None,
                   do_trim=True):
        """Build from (sites, l, matrix) or (sites, l, matrix, eff_sites)."""
        acc = _Acc(q)
        zero_l = (0,) * m
        for item in items:
            sites, l, M = item[0], item[1], item[2]
            S = lattice.support(sites)
            if not connected(S, lattice):
                raise DomainError(f"support {S} is not connected")
            l = tuple(int(x) for x in l) if m else zero_l
            if len(l) != m:
                raise DomainError(f"mode {l} has wrong length for m={m}")
            E = lattice.support(item[3]) if len(item) > 3 else S
            if not set(E) <= set(S):
                raise DomainError("effective support must lie inside the support")
            M = np.asarray(M, dtype=complex)
            if M.shape != (q ** len(E), q ** len(E)):
                raise DomainError(f"matrix shape {M.shape} does not match |E|={len(E)}, q={q}")
            if do_trim:
                E, M = trim(M, E, q)
            acc.add(S, l, E, M)
        return cls(lattice, m, q, acc.terms(), hermitian=hermitian, lmax=lmax)

    def like(self, terms, hermitian=False, truncation=0.0, lmax=None):
        return QPOperator(self.lattice, self.m, self.q, terms, hermitian=hermitian,
                          lmax=self.lmax if lmax is None else lmax,
                          truncation=truncation)

    def __len__(self):
        return len(self.terms)

    def __bool__(self):
        return bool(self.terms)

    def __repr__(self):
        return (f"QPOperator(n_terms={len(self.terms)}, m={self.m}, q={self.q}, "
                f"hermitian={self.hermitian})")

    @property
    def zero_mode(self):
        return (0,) * self.m

    def is_static(self):
        z = self.zero_mode
        return all(l == z for (_, l) in self.terms)

    def modes(self):
        return sorted({l for (_, l) in self.terms})

    def supports(self):
        return sorted({S for (S, _) in self.terms})

    def max_mode(self):
        return max((max(abs(x) for x in l) for (_, l) in self.terms if l), default=0)

    def opnorm(self, key):
        v = self._norms.get(key)
        if v is None:
            v = float(np.linalg.norm(self.terms[key][1], 2))
            self._norms[key] = v
        return v

    def _combine(self, other, sign):
        _check_compat(self, other)
        acc = _Acc(self.q)
        for (S, l), (E, M) in self.terms.items():
            acc.add(S, l, E, M)
        for (S, l), (E, M) in other.terms.items():
            acc.add(S, l, E, M if sign > 0 else -M)
        return self.like(acc.terms(), hermitian=self.hermitian and other.hermitian,
                         lmax=_merge_lmax(self.lmax, other.lmax))

    def __add__(self, other):
        return self._combine(other, +1)

    def __sub__(self, other):
        return self._combine(other, -1)

    def __neg__(self):
        return self * -1.0

    def __mul__(self, c):
        c = complex(c)
        if c == 0:
            return self.like({})
        terms = {k: (E, c * M) for k, (E, M) in self.terms.items()}
        return self.like(terms, hermitian=self.hermitian and c.imag == 0)

    __rmul__ = __mul__

    def adjoint(self):
        terms = {(S, tuple(-x for x in l)): (E, M.conj().T)
                 for (S, l), (E, M) in self.terms.items()}
        return self.like(terms, hermitian=self.hermitian)

    def hermiticity_defect(self):
        diff = self - self.adjoint()
        return max((np.abs(M).max() for (_, M) in diff.terms.values()), default=0.0)

    def derivative(self, nu):
        """nu . d/dphi, exact: multiplies mode l by i nu.l."""
        nu = np.asarray(nu, dtype=float)
        terms = {}
        for (S, l), (E, M) in self.terms.items():
            f = float(np.dot(nu, l)) if l else 0.0
            if f != 0.0:
                terms[(S, l)] = (E, 1j * f * M)
        return self.like(terms, hermitian=self.hermitian)

    def at(self, phi):
        """Static operator A(phi)."""
        phi = np.asarray(phi, dtype=float)
        acc = _Acc(self.q)
        z = self.zero_mode
        for (S, l), (E, M) in self.terms.items():
            ph = np.exp(1j * float(np.dot(l, phi))) if self.m else 1.0
            acc.add(S, z, E, ph * M)
        return self.like(acc.terms(), hermitian=self.hermitian)

    def static_part(self):
        z = self.zero_mode
        return self.like({k: v for k, v in self.terms.items() if k[1] == z},
                         hermitian=self.hermitian)

    def select(self, pred):
        return self.like({k: v for k, v in self.terms.items() if pred(k[0], k[1])})

    def with_modes(self, m):
        """Re-index a static operator as one with m frequencies."""
        if not self.is_static():
            raise ContractError("only static operators can change frequency count")
        terms = {(S, (0,) * m): v for (S, _), v in self.terms.items()}
        return QPOperator(self.lattice, m, self.q, terms, hermitian=self.hermitian,
                          lmax=self.lmax)

    def dense_dim(self):
        return self.q ** self.lattice.n_sites


def _merge_lmax(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return max(a, b)


def _check_compat(A, B):
    if A.lattice != B.lattice:
        raise DomainError("operators live on different lattices")
    if A.m != B.m or A.q != B.q:
        raise DomainError(f"incompatible operators (m={A.m},{B.m}; q={A.q},{B.q})")


# ---------------------------------------------------------------- norms

@dataclass(frozen=True)
class NormParams:
    kappa: float = 0.0
    rho: float = 0.0
    zeta: float = 0.0

    def __post_init__(self):
        if self.kappa < 0 or self.rho < 0 or self.zeta < 0:
            raise DomainError("norm parameters must be nonnegative")


def _site_sup(lattice, contributions):
    acc = np.zeros(lattice.n_sites)
    for S, w in contributions:
        acc[list(S)] += w
    return float(acc.max()) if len(acc) else 0.0


def norm_kappa_rho(A, kappa, rho):
    """sup_x sum_{S ni x} sum_l ||(A_S)_l|| e^{kappa|S|} e^{rho|l|}, |l| the l1 norm."""
    contrib = [(S, A.opnorm((S, l)) * math.exp(kappa * len(S) + rho * l1(l)))
               for (S, l) in A.terms]
    return _site_sup(A.lattice, contrib)


def norm_kappa(A, kappa):
    if not A.is_static():
        raise ContractError("norm_kappa needs a time-independent operator")
    return norm_kappa_rho(A, kappa, 0.0)


def norm_graded(A, kappa, rho, zeta):
    contrib = [(S, A.opnorm((S, l, k)) * math.exp(kappa * len(S) + rho * l1(l) + zeta * l1(k)))
               for (S, l, k) in A.terms]
    return _site_sup(A.lattice, contrib)


def op_norm_bound(A, support=None):
    """Certified bound on sup_phi ||A(phi)||_op: |Lambda| ||A||_{0,0}, or |S| ||A||_{0,0}."""
    n00 = norm_kappa_rho(A, 0.0, 0.0)
    if support is not None:
        S = set(A.lattice.support(support))
        if all(set(s) <= S for (s, _) in A.terms):
            return len(S) * n00
    return A.lattice.n_sites * n00


# ---------------------------------------------------------- dense bridge

def _check_cap(lattice, q):
    dim = q ** lattice.n_sites
    cap = dense_cap()
    if dim > cap:
        raise ResourceError(f"dense dimension {dim} exceeds cap {cap} (set {CAP_ENV})")
    return dim


def local_dense(M, E, n, q, out, coeff=1.0):
    offE, offR = _offsets(tuple(E), n, q)
    rows = offR[:, None, None] + offE[None, :, None]
    cols = offR[:, None, None] + offE[None, None, :]
    out[rows, cols] += coeff * M[None, :, :]
    return out


def to_dense(A, phi=None):
    """Matrix of A(phi) on the full Hilbert space (site order = lattice order)."""
    dim = _check_cap(A.lattice, A.q)
    n = A.lattice.n_sites
    out = np.zeros((dim, dim), dtype=complex)
    phi = np.zeros(A.m) if phi is None else np.asarray(phi, dtype=float)
    for (S, l), (E, M) in A.terms.items():
        c = np.exp(1j * float(np.dot(l, phi))) if A.m else 1.0
        local_dense(M, E, n, A.q, out, c)
    return out


def to_sparse(A, phi=None):
    import scipy.sparse as sp

    dim = _check_cap(A.lattice, A.q)
    n = A.lattice.n_sites
    phi = np.zeros(A.m) if phi is None else np.asarray(phi, dtype=float)
    rows, cols, vals = [], [], []
    for (S, l), (E, M) in A.terms.items():
        c = np.exp(1j * float(np.dot(l, phi))) if A.m else 1.0
        offE, offR = _offsets(tuple(E), n, A.q)
        r = np.broadcast_to(offR[:, None, None] + offE[None, :, None], (len(offR),) + M.shape)
        k = np.broadcast_to(offR[:, None, None] + offE[None, None, :], (len(offR),) + M.shape)
        v = np.broadcast_to(c * M[None], r.shape)
        nz = v != 0
        rows.append(r[nz])
        cols.append(k[nz])
        vals.append(v[nz])
    if not rows:
        return sp.csr_matrix((dim, dim), dtype=complex)
    return sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                         shape=(dim, dim))


def site_operator(lattice, q, matrix, sites, m=0):
    """Convenience: a static single-term operator on the given sites."""
    return QPOperator.from_terms(lattice, m, q, [(sites, (0,) * m, matrix)],
                                 hermitian=np.allclose(matrix, np.conj(matrix).T))


# ------------------------------------------------------ local commutator

def _fourier_commutator(am, bm, m):
    """Mode-wise [A, B] for Fourier-coefficient dicts on a common site set.

    Few modes on one side: batched products of each of its modes against the
    stacked other side. Otherwise a convolution by FFT over the l-grid.
    """
    if m == 0:
        Ma = am[()]
        Mb = bm[()]
        return {(): Ma @ Mb - Mb @ Ma}
    la = np.array(list(am.keys()), dtype=int)
    lb = np.array(list(bm.keys()), dtype=int)
    amin, bmin = la.min(0), lb.min(0)
    size = tuple(int(s) for s in (la.max(0) - amin) + (lb.max(0) - bmin) + 1)
    grid = int(np.prod(size))
    shift = amin + bmin
    if len(am) * len(bm) <= 2 * grid:
        if len(am) <= len(bm):
            small, sl, big, bl, sign = am, la - amin, bm, lb - bmin, 1.0
        else:
            small, sl, big, bl, sign = bm, lb - bmin, am, la - amin, -1.0
        stack = np.stack(list(big.values()))
        C = np.zeros((grid,) + stack.shape[1:], dtype=complex)
        touched = np.zeros(grid, dtype=bool)
        for off, M in zip(sl, small.values()):
            idx = np.ravel_multi_index((bl + off).T, size)
            C[idx] += sign * (M @ stack - stack @ M)
            touched[idx] = True
        floor = 0.0
    else:
        D = next(iter(am.values())).shape[0]
        Ag = np.zeros(size + (D, D), dtype=complex)
        Bg = np.zeros(size + (D, D), dtype=complex)
        Ag[tuple((la - amin).T)] = np.stack(list(am.values()))
        Bg[tuple((lb - bmin).T)] = np.stack(list(bm.values()))
        axes = tuple(range(m))
        Af = np.fft.fftn(Ag, axes=axes)
        Bf = np.fft.fftn(Bg, axes=axes)
        C = np.fft.ifftn(Af @ Bf - Bf @ Af, axes=axes).reshape((grid, D, D))
        touched = np.ones(grid, dtype=bool)
        na = math.sqrt(sum(np.linalg.norm(M) ** 2 for M in am.values()))
        nb = math.sqrt(sum(np.linalg.norm(M) ** 2 for M in bm.values()))
        floor = 8 * _EPS * grid * na * nb
    norms = np.linalg.norm(C.reshape(grid, -1), axis=1)
    keep = np.nonzero(touched & (norms > floor))[0]
    coords = np.array(np.unravel_index(keep, size)).T + shift
    return {tuple(int(x) for x in c): C[i] for c, i in zip(coords, keep)}


def local_commutator(A, B, lmax=None, max_support=None):
    """[A, B] with the support bookkeeping [A,B]_S = sum_{S'uS''=S, S'nS''!=0} [A_S', B_S''].

    Modes outside the box |l|_inf <= lmax and supports larger than max_support
    are dropped; their Frobenius weight is recorded in `.truncation`.
    """
    _check_compat(A, B)
    q, m = A.q, A.m
    if lmax is None:
        lmax = _merge_lmax(A.lmax, B.lmax)
    ga, gb = {}, {}
    for (S, l), (E, M) in A.terms.items():
        ga.setdefault((S, E), {})[l] = M
    for (S, l), (E, M) in B.terms.items():
        gb.setdefault((S, E), {})[l] = M
    acc = _Acc(q)
    dropped = 0.0
    for (SA, EA), amodes in ga.items():
        sa, ea = set(SA), set(EA)
        buckets = {}
        for (SB, EB), bmodes in gb.items():
            if sa.isdisjoint(SB) or ea.isdisjoint(EB):
                continue
            U = tuple(sorted(sa.union(SB)))
            F = tuple(sorted(ea.union(EB)))
            bucket = buckets.setdefault((U, F), {})
            for l, M in bmodes.items():
                Me = embed(M, EB, F, q)
                bucket[l] = bucket[l] + Me if l in bucket else Me
        for (U, F), bmodes in buckets.items():
            am = {l: embed(M, EA, F, q) for l, M in amodes.items()}
            for l, C in _fourier_commutator(am, bmodes, m).items():
                if (lmax is not None and l and max(abs(x) for x in l) > lmax) or \
                        (max_support is not None and len(U) > max_support):
                    dropped += float(np.linalg.norm(C))
                    continue
                acc.add(U, l, F, C)
    return QPOperator(A.lattice, m, q, acc.terms(), lmax=lmax, truncation=dropped)


# --------------------------------------------------------- number family

class NumberFamily:
    """Commuting integer-spectrum number operators N^(1..r) and couplings J."""

    def __init__(self, operators, J, validate=True, tol_comm=1e-12, tol_int=1e-9):
        self.operators = list(operators)
        self.J = np.asarray(J, dtype=float).reshape(-1)
        if len(self.J) != len(self.operators):
            raise DomainError("J must have one entry per number operator")
        if self.operators:
            self.lattice = self.operators[0].lattice
            self.q = self.operators[0].q
        self.tol_comm = tol_comm
        self.tol_int = tol_int
        self.local_terms = []
        for a, N in enumerate(self.operators):
            if not N.is_static():
                raise InvariantError(f"N^({a + 1}) is time dependent")
            for (S, _), (E, M) in sorted(N.terms.items()):
                self.local_terms.append((a, S, E, M))
        self.diagonal = all(np.count_nonzero(M - np.diag(np.diag(M))) == 0
                            for (_, _, _, M) in self.local_terms)
        self._cache = {}
        self._rng = np.random.default_rng(12345)
        self._mix = self._rng.uniform(1.0, 2.0, size=self.r) * np.sqrt(np.arange(2, self.r + 2))
        if validate:
            self.validate()

    @classmethod
    def trivial(cls, lattice, q):
        fam = cls([], [], validate=False)
        fam.lattice = lattice
        fam.q = q
        return fam

    @property
    def r(self):
        return len(self.operators)

    def h0(self, m=None):
        """J . N as a static operator (optionally with m frequencies)."""
        m = self.operators[0].m if m is None else m
        acc = _Acc(self.q)
        for (a, S, E, M) in self.local_terms:
            acc.add(S, (0,) * m, E, self.J[a] * M)
        return QPOperator(self.lattice, m, self.q, acc.terms(), hermitian=True)

    def norms(self, kappa):
        return [norm_kappa(N, kappa) for N in self.operators]

    def max_norm0(self):
        return max(self.norms(0.0), default=0.0)

    def validate(self):
        """Numerical checks of self-adjointness, commutation and integer spectrum."""
        q = self.q
        for (a, S, E, M) in self.local_terms:
            if np.abs(M - M.conj().T).max() > 1e-12:
                raise InvariantError(f"(N.i) self-adjointness fails for N^({a + 1}) on {S}")
            ev = np.linalg.eigvalsh(M)
            if np.abs(ev - np.round(ev)).max() > self.tol_int:
                raise InvariantError(f"(N.iv) non-integer spectrum for N^({a + 1}) on {S}")
        for i, (a, S, E, M) in enumerate(self.local_terms):
            for (b, S2, E2, M2) in self.local_terms[i + 1:]:
                if set(E).isdisjoint(E2):
                    continue
                F = tuple(sorted(set(E) | set(E2)))
                X, Y = embed(M, E, F, q), embed(M2, E2, F, q)
                if np.linalg.norm(X @ Y - Y @ X, 2) > self.tol_comm:
                    raise InvariantError(
                        f"(N.iii) local terms of N^({a + 1}) on {S} and N^({b + 1}) on {S2} do not commute")
        for a, N in enumerate(self.operators):
            if not math.isfinite(norm_kappa(N, 1.0)):
                raise InvariantError(f"(N.ii) N^({a + 1}) has infinite norm")
        return True

    def restricted(self, S, E):
        """Joint eigen-data of N|_S near E: (E', integer eigenvalues (D, r), basis or None)."""
        key = (S, E)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        sS = set(S)
        near = [(a, S2, E2, M2) for (a, S2, E2, M2) in self.local_terms
                if set(S2) <= sS and not set(E2).isdisjoint(E)]
        Ebig = tuple(sorted(set(E).union(*[set(t[2]) for t in near]))) if near else tuple(E)
        D = self.q ** len(Ebig)
        q = self.q
        if self.diagonal:
            vals = np.zeros((D, self.r))
            for (a, S2, E2, M2) in near:
                vals[:, a] += np.real(np.diag(embed(M2, E2, Ebig, q)))
            basis = None
        else:
            mats = [np.zeros((D, D), dtype=complex) for _ in range(self.r)]
            for (a, S2, E2, M2) in near:
                mats[a] += embed(M2, E2, Ebig, q)
            mix = sum(c * X for c, X in zip(self._mix, mats)) if self.r else np.zeros((D, D))
            _, basis = np.linalg.eigh(mix)
            vals = np.zeros((D, self.r))
            for a, X in enumerate(mats):
                R = basis.conj().T @ X @ basis
                if np.abs(R - np.diag(np.diag(R))).max() > 1e-8:
                    raise InvariantError("(N.iii) number operators are not jointly diagonalisable")
                vals[:, a] = np.real(np.diag(R))
        rounded = np.round(vals)
        if vals.size and np.abs(vals - rounded).max() > self.tol_int:
            raise InvariantError(f"(N.iv) non-integer joint spectrum on support {S}")
        hit = (Ebig, rounded.astype(np.int64), basis)
        self._cache[key] = hit
        return hit


# ------------------------------------------------------- strong locality

@dataclass
class LocalityReport:
    ok: bool
    worst: float
    pair: tuple | None
    checked: int


def check_strong_locality(A, N, tol=1e-10):
    """Verify [A_S, N^(a)_{S'}] = 0 for every S' overlapping S but not inside it."""
    worst, pair, checked = 0.0, None, 0
    q = A.q
    for (S, l), (E, M) in A.terms.items():
        sS = set(S)
        for (a, S2, E2, M2) in N.local_terms:
            s2 = set(S2)
            if s2 <= sS or s2.isdisjoint(sS) or set(E2).isdisjoint(E):
                continue
            checked += 1
            F = tuple(sorted(set(E) | set(E2)))
            X, Y = embed(M, E, F, q), embed(M2, E2, F, q)
            v = float(np.linalg.norm(X @ Y - Y @ X, 2))
            if v > worst:
                worst, pair = v, (S, l, a + 1, S2)
    return LocalityReport(worst <= tol, worst, pair, checked)


# ---------------------------------------------------------------- grading

class GradedOperator:
    """Coefficients (A_S)_{l,k}: the theta-Fourier modes of e^{i theta.N} A e^{-i theta.N}."""

    def __init__(self, lattice, m, q, r, terms=None, lmax=None):
        self.lattice = lattice
        self.m = m
        self.q = q
        self.r = r
        self.terms = dict(terms) if terms else {}
        self.lmax = lmax
        self._norms = {}

    def __len__(self):
        return len(self.terms)

    def opnorm(self, key):
        v = self._norms.get(key)
        if v is None:
            v = float(np.linalg.norm(self.terms[key][1], 2))
            self._norms[key] = v
        return v

    def grades(self):
        return sorted({k for (_, _, k) in self.terms})

    def at_theta(self, theta=None):
        """A(theta, .) as a QPOperator; theta = 0 reconstructs the source."""
        theta = np.zeros(self.r) if theta is None else np.asarray(theta, dtype=float)
        acc = _Acc(self.q)
        for (S, l, k), (E, M) in self.terms.items():
            ph = np.exp(1j * float(np.dot(k, theta))) if self.r else 1.0
            acc.add(S, l, E, ph * M)
        return QPOperator(self.lattice, self.m, self.q, acc.terms(), lmax=self.lmax)

    def select(self, pred):
        return GradedOperator(self.lattice, self.m, self.q, self.r,
                              {key: v for key, v in self.terms.items() if pred(*key)},
                              lmax=self.lmax)

    def __add__(self, other):
        terms = dict(self.terms)
        for key, (E, M) in other.terms.items():
            if key in terms:
                E0, M0 = terms[key]
                F = tuple(sorted(set(E0) | set(E)))
                terms[key] = (F, embed(M0, E0, F, self.q) + embed(M, E, F, self.q))
            else:
                terms[key] = (E, M)
        return GradedOperator(self.lattice, self.m, self.q, self.r, terms, lmax=self.lmax)


def grade(A, N, check=True):
    """Split every coefficient of A by the integer shift k of the joint N-eigenvalue."""
    if check and N.r:
        rep = check_strong_locality(A, N)
        if not rep.ok:
            raise ContractError(f"operator is not strongly local: worst {rep.worst:.3e} at {rep.pair}")
    q = A.q
    out = {}
    zero_k = (0,) * N.r
    for (S, l), (E, M) in A.terms.items():
        if N.r == 0:
            out[(S, l, zero_k)] = (E, M)
            continue
        Ebig, vals, basis = N.restricted(S, E)
        Me = embed(M, E, Ebig, q)
        if basis is not None:
            Me = basis.conj().T @ Me @ basis
        D = Me.shape[0]
        kk = (vals[:, None, :] - vals[None, :, :]).reshape(D * D, N.r)
        flat = Me.reshape(-1)
        nz = np.nonzero(np.abs(flat) > 0)[0]
        if len(nz) == 0:
            continue
        keys, inv = np.unique(kk[nz], axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        for i, k in enumerate(keys):
            piece = np.zeros(D * D, dtype=complex)
            sel = nz[inv == i]
            piece[sel] = flat[sel]
            piece = piece.reshape(D, D)
            if basis is not None:
                piece = basis @ piece @ basis.conj().T
            if np.linalg.norm(piece) >= PRUNE_TOL:
                out[(S, l, tuple(int(x) for x in k))] = (Ebig, piece)
    return GradedOperator(A.lattice, A.m, q, N.r, out, lmax=A.lmax)


def graded_map(A, N, fn, check=False):
    """Multiply every coefficient entrywise, in the joint N-eigenbasis, by fn(S, l, K, occ).

    K holds the shift k = n(out) - n(in) of each matrix element, shape (D, D, r);
    occ marks the nonzero elements. Equivalent to grading, scaling each (l, k)
    piece and summing, without storing the pieces.
    """
    if check and N.r:
        rep = check_strong_locality(A, N)
        if not rep.ok:
            raise ContractError(f"operator is not strongly local: worst {rep.worst:.3e} at {rep.pair}")
    q = A.q
    acc = _Acc(q)
    for (S, l), (E, M) in A.terms.items():
        if N.r == 0:
            D = M.shape[0]
            K = np.zeros((D, D, 0), dtype=np.int64)
            occ = np.abs(M) > 0
            acc.add(S, l, E, M * fn(S, l, K, occ))
            continue
        Ebig, vals, basis = N.restricted(S, E)
        Me = embed(M, E, Ebig, q)
        if basis is not None:
            Me = basis.conj().T @ Me @ basis
            occ = np.abs(Me) > 1e-14 * max(1.0, np.abs(Me).max())
        else:
            occ = np.abs(Me) > 0
        K = vals[:, None, :] - vals[None, :, :]
        out = Me * fn(S, l, K, occ)
        if basis is not None:
            out = basis @ out @ basis.conj().T
        acc.add(S, l, Ebig, out)
    return A.like(acc.terms(), hermitian=False)


def _as_graded(P, N, graded=None, check=True):
    return graded if graded is not None else grade(P, N, check=check)


def average(A, N, graded=None, check=True):
    """<A>: the (l, k) = (0, 0) graded component, a static operator."""
    zl = (0,) * A.m
    if graded is not None:
        zk = (0,) * N.r
        acc = _Acc(A.q)
        for (S, l, k), (E, M) in graded.terms.items():
            if l == zl and k == zk:
                acc.add(S, zl, E, M)
        return A.like(acc.terms(), hermitian=A.hermitian)

    def fn(S, l, K, occ):
        if l != zl:
            return 0.0
        return (~np.any(K != 0, axis=-1)).astype(float)

    out = graded_map(A.select(lambda S, l: l == zl), N, fn, check=check)
    out.hermitian = A.hermitian
    return out


def double_bracket(P, N, J=None, omega=None, graded=None, floor=DIVISOR_FLOOR, check=True):
    """<<P>> = <P> + sum_{(k,l)!=0} (J.k)/(omega.l + J.k) (P_S)_{l,k}."""
    J = N.J if J is None else np.asarray(J, dtype=float)
    omega = np.zeros(P.m) if omega is None else np.asarray(omega, dtype=float)
    zl = (0,) * P.m

    def fn(S, l, K, occ):
        jk = K @ J if N.r else np.zeros(K.shape[:2])
        div = jk + (float(np.dot(omega, l)) if P.m else 0.0)
        k0 = ~np.any(K != 0, axis=-1)
        bad = occ & ~k0 & (np.abs(div) < floor)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            k = tuple(int(x) for x in K[i, j])
            raise ResonanceError(f"resonant mode k={k}, l={l}: |omega.l + J.k| = {abs(div[i, j]):.3e}",
                                 k=k, l=l, divisor=abs(div[i, j]))
        with np.errstate(divide="ignore", invalid="ignore"):
            fac = np.where(k0, 1.0 if l == zl else 0.0, jk / np.where(div == 0, 1.0, div))
        return fac

    if graded is not None:
        acc = _Acc(P.q)
        for (S, l, k), (E, M) in graded.terms.items():
            jk = float(np.dot(J, k)) if N.r else 0.0
            if not any(k):
                if l == zl:
                    acc.add(S, zl, E, M)
                continue
            div = float(np.dot(omega, l)) + jk if P.m else jk
            if abs(div) < floor:
                raise ResonanceError(f"resonant mode k={k}, l={l}: |omega.l + J.k| = {abs(div):.3e}",
                                     k=k, l=l, divisor=abs(div))
            acc.add(S, zl, E, (jk / div) * M)
        return P.like(acc.terms(), hermitian=P.hermitian)
    mapped = graded_map(P, N, fn, check=check)
    acc = _Acc(P.q)
    for (S, l), (E, M) in mapped.terms.items():
        acc.add(S, zl, E, M)
    return P.like(acc.terms(), hermitian=P.hermitian)


# --------------------------------------------------------- Ad conjugation

@dataclass
class SeriesInfo:
    orders: int
    truncation: float
    last_increment: float


def _left_apply(g, E, y, F, q):
    """(g x 1) y for g acting on sites E within F; leading axis of y is a stack."""
    if E == F:
        return g @ y
    k = len(F)
    pos = [F.index(s) for s in E]
    rest = [i for i in range(k) if i not in pos]
    n, D = y.shape[0], y.shape[-1]
    order = [0] + [1 + p for p in pos] + [1 + p for p in rest] + [k + 1]
    T = y.reshape((n,) + (q,) * k + (D,)).transpose(order)
    sh = T.shape
    T = (g @ T.reshape(n, q ** len(E), -1)).reshape(sh)
    return T.transpose(np.argsort(order)).reshape(n, D, D)


def _dag(x):
    return np.conj(np.swapaxes(x, -1, -2))


class _GridOp:
    """Operator sampled on a uniform phi-grid; blocks keyed by (S, F), F the sites acted on."""

    def __init__(self, q, shape):
        self.q = q
        self.shape = shape
        self.blocks = {}

    @classmethod
    def from_op(cls, A, L):
        shape = (2 * L + 1,) * A.m
        g = cls(A.q, shape)
        per = {}
        for (S, l), (E, M) in A.terms.items():
            if any(abs(x) > L for x in l):
                raise DomainError(f"mode {l} outside the grid box {L}")
            per.setdefault((S, E), []).append((l, M))
        n = int(np.prod(shape))
        for (S, E), items in per.items():
            D = A.q ** len(E)
            arr = np.zeros(shape + (D, D), dtype=complex)
            for l, M in items:
                arr[tuple(x % (2 * L + 1) for x in l)] += M
            if A.m:
                arr = np.fft.ifftn(arr, axes=tuple(range(A.m))) * n
            g.blocks[(S, E)] = arr.reshape((n, D, D))
        return g

    def add(self, S, F, arr):
        key = (S, F)
        cur = self.blocks.get(key)
        self.blocks[key] = arr if cur is None else cur + arr

    def rms(self, key):
        return float(np.sqrt(np.mean(np.sum(np.abs(self.blocks[key]) ** 2, axis=(1, 2)))))

    def to_op(self, like, L, prune):
        """Back to Fourier modes; returns (operator, edge-shell Frobenius mass, pruned mass)."""
        m = like.m
        n = int(np.prod(self.shape))
        acc = _Acc(self.q)
        edge = pruned = 0.0
        labels = [tuple(int(x) if x <= L else int(x) - (2 * L + 1)
                        for x in np.unravel_index(i, self.shape)) for i in range(n)]
        on_edge = [bool(l) and max(abs(x) for x in l) == L for l in labels]
        for (S, F), arr in self.blocks.items():
            D = arr.shape[-1]
            if m:
                modes = np.fft.fftn(arr.reshape(self.shape + (D, D)),
                                    axes=tuple(range(m))).reshape((n, D, D)) / n
            else:
                modes = arr
            norms = np.linalg.norm(modes.reshape(n, -1), axis=1)
            for i in range(n):
                if on_edge[i]:
                    edge += norms[i] ** 2
                if norms[i] < prune:
                    pruned += norms[i] ** 2
                    continue
                acc.add(S, labels[i], F, modes[i].copy())
        return like.like(acc.terms(prune=0.0), lmax=L), math.sqrt(edge), math.sqrt(pruned)


def _merge_blocks(contrib, q):
    """{S: [(F, arr), ...]} -> {(S, union F): sum of embedded arrays}."""
    out = {}
    for S, items in contrib.items():
        Fu = tuple(sorted(set().union(*(F for F, _ in items))))
        acc = None
        for F, arr in items:
            e = embed(arr, F, Fu, q)
            acc = e if acc is None else acc + e
        out[(S, Fu)] = acc
    return out


def _grid_series(G, B, coeff, kappa, rho, tol, max_order, L, max_support, prune):
    """ad_series on a (2L+1)^m phi-grid: pointwise commutators, one transform each way.

    Modes beyond the box fold back (aliasing); the Frobenius mass left on the
    box edge is reported as the estimate of that error.
    """
    m, q = G.m, G.q
    Gg = _GridOp.from_op(G, L)
    Y = _GridOp.from_op(B, L)
    per_s = {}
    for (S, E), arr in Y.blocks.items():
        per_s.setdefault(S, []).append((E, arr))
    Y.blocks = _merge_blocks(per_s, q)
    n = int(np.prod(Gg.shape))
    total = _GridOp(q, Gg.shape)
    herm = G.hermitian and B.hermitian
    prev = 1.0
    dropped = 0.0
    inc = float("inf")
    wl = math.exp(rho * m * L) * math.sqrt(n)
    gsum_cache = {}
    gblocks = [(SA, EA, set(SA), set(EA), ga) for (SA, EA), ga in Gg.blocks.items()]

    def gsum(members):
        hit = gsum_cache.get(members)
        if hit is None:
            FG = tuple(sorted(set().union(*(gblocks[i][1] for i in members))))
            acc = None
            for i in members:
                e = embed(gblocks[i][4], gblocks[i][1], FG, q)
                acc = e if acc is None else acc + e
            hit = gsum_cache[members] = (FG, acc)
        return hit

    for p in range(1, max_order + 1):
        c = coeff(p)
        ratio = c / prev
        prev = c
        # both factors hermitian on the grid: [g, y] = t - t^dagger with t = g y
        hstep = herm and abs(complex(ratio).real) <= 1e-15 * abs(ratio)
        contrib = {}
        for (SB, FB), yb in Y.blocks.items():
            sb, fb = set(SB), set(FB)
            groups = {}
            for i, (SA, EA, sa, ea, _) in enumerate(gblocks):
                if sa.isdisjoint(sb) or ea.isdisjoint(fb):
                    continue
                groups.setdefault(tuple(sorted(sa | sb)), []).append(i)
            for U, members in groups.items():
                if max_support is not None and len(U) > max_support:
                    dropped += abs(ratio) * 2 * Y.rms((SB, FB)) * sum(
                        Gg.rms(gblocks[i][:2]) for i in members)
                    continue
                FG, g = gsum(tuple(members))
                F = tuple(sorted(fb | set(FG)))
                y = embed(yb, FB, F, q)
                t = _left_apply(g, FG, y, F, q)
                if hstep:
                    C = t - _dag(t)
                else:
                    C = t - _dag(_left_apply(_dag(g), FG, _dag(y), F, q))
                contrib.setdefault(U, []).append((F, ratio * C))
        new = _GridOp(q, Gg.shape)
        new.blocks = _merge_blocks(contrib, q)
        inc_terms = []
        for key in list(new.blocks):
            r = new.rms(key)
            if r < prune:
                dropped += r
                del new.blocks[key]
                continue
            inc_terms.append((key[0], wl * math.exp(kappa * len(key[0])) * r))
        Y = new
        if not Y.blocks:
            break
        for (S, F), arr in Y.blocks.items():
            total.add(S, F, arr)
        inc = _site_sup(G.lattice, inc_terms)
        if inc < tol:
            break
    else:
        raise ConvergenceError(f"Ad series not converged after {max_order} orders "
                               f"(last increment bound {inc:.3e})")
    out, edge, pruned = total.to_op(B, L, prune * 1e-2)
    out.hermitian = herm
    return out, SeriesInfo(p, dropped + edge + pruned, inc)


def ad_series(G, B, coeff, kappa=0.0, rho=0.0, tol=1e-12, max_order=80,
              lmax=None, max_support=None, prune=None):
    """sum_{p>=1} coeff(p) ad_G^p(B), stopped once an increment's (kappa,rho)-norm < tol.

    The recursion carries the scaled term Y_p = coeff(p) ad_G^p(B), so pruning
    (Frobenius below `prune`, default tol/100) and the reported truncation
    refer to what actually enters the sum.
    """
    total = B.like({}, lmax=lmax)
    if not G.terms or not B.terms:
        return total, SeriesInfo(0, 0.0, 0.0)
    prune = tol * 1e-2 if prune is None else prune
    if lmax is not None and G.m:
        return _grid_series(G, B, coeff, kappa, rho, tol, max_order, int(lmax),
                            max_support, prune)
    Y = B
    prev = 1.0
    dropped = 0.0
    inc = float("inf")
    for p in range(1, max_order + 1):
        c = coeff(p)
        if c == 0:
            raise DomainError("series coefficients must be nonzero")
        X = local_commutator(G, Y, lmax=lmax, max_support=max_support)
        dropped += abs(c / prev) * X.truncation
        Y = X * (c / prev)
        prev = c
        kept = {key: v for key, v in Y.terms.items() if np.linalg.norm(v[1]) >= prune}
        dropped += math.sqrt(sum(np.linalg.norm(v[1]) ** 2 for key, v in Y.terms.items()
                                 if key not in kept))
        Y = Y.like(kept, lmax=Y.lmax)
        if not Y.terms:
            return total, SeriesInfo(p, dropped, 0.0)
        total = total + Y
        inc = norm_kappa_rho(Y, kappa, rho)
        if inc < tol:
            return total, SeriesInfo(p, dropped, inc)
    raise ConvergenceError(f"Ad series not converged after {max_order} orders (last increment {inc:.3e})")


def guard_ratio(G, kappa, sigma, rho=0.0):
    """4 e^{-kappa} ||G||_{kappa+sigma,rho} / sigma, which must stay below 1."""
    if sigma <= 0:
        return float("inf")
    return 4.0 * math.exp(-kappa) * norm_kappa_rho(G, kappa + sigma, rho) / sigma


def ad_bound(G, B, kappa, sigma, rho=0.0, eta=None):
    """Upper bound C e^{-kappa} sigma^{-1} ||G|| ||B|| with C = 4/(1-eta) on ||e^{iG}Be^{-iG} - B||."""
    eta = guard_ratio(G, kappa, sigma, rho) if eta is None else eta
    if eta >= 1:
        return float("inf")
    C = 4.0 / (1.0 - eta)
    return (C * math.exp(-kappa) / sigma * norm_kappa_rho(G, kappa + sigma, rho)
            * norm_kappa_rho(B, kappa + sigma, rho))


def ad_conjugate(G, B, kappa=0.0, sigma=None, tol=1e-12, rho=0.0, eta=0.99,
                 guard="strict", max_order=80, lmax=None, max_support=None):
    """e^{iG} B e^{-iG} through the Ad series; see `convention_self_test`."""
    if sigma is not None:
        ratio = guard_ratio(G, kappa, sigma, rho)
        if guard == "strict" and ratio > eta:
            raise ConvergenceError(f"convergence guard violated: ratio {ratio:.3e} > eta={eta}",
                                   ratio=ratio)
    sign = _CONVENTION.sign
    rest, info = ad_series(G, B, lambda p: (sign * 1j) ** p / math.factorial(p),
                           kappa, rho, tol, max_order, lmax, max_support)
    out = B + rest
    out.hermitian = G.hermitian and B.hermitian
    out.truncation = info.truncation
    return out


class _Convention:
    sign = None


_CONVENTION = _Convention()


def convention_self_test(seed=0):
    """Fix the Ad-series sign against dense e^{iG} B e^{-iG} on a random one-site pair."""
    from .lattice import Lattice
    from scipy.linalg import expm

    rng = np.random.default_rng(seed)
    lat = Lattice.segment(1)

    def rand_herm():
        X = rng.normal(size=(2, 2)) + 1j * rng.normal(size=(2, 2))
        return 0.3 * (X + X.conj().T)

    g, b = rand_herm(), rand_herm()
    G = QPOperator.from_terms(lat, 0, 2, [((0,), (), g)], hermitian=True)
    B = QPOperator.from_terms(lat, 0, 2, [((0,), (), b)], hermitian=True)
    target = expm(1j * g) @ b @ expm(-1j * g)
    errs = {}
    for s in (+1, -1):
        _CONVENTION.sign = s
        errs[s] = np.abs(to_dense(ad_conjugate(G, B, tol=1e-15)) - target).max()
    best = min(errs, key=errs.get)
    _CONVENTION.sign = best
    if errs[best] > 1e-10:
        _CONVENTION.sign = None
        raise InvariantError(f"Ad-series self-test failed (errors {errs})")
    return best


convention_self_test()
