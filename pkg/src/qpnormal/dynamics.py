"""Dense time evolution at desk scale and the diagnostics built on it."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .errors import DomainError, InvariantError, ResourceError
from .opalg import _check_cap, dense_cap, local_dense, norm_kappa_rho, to_dense

DENSE_NORM_MAX = 2 ** 10


def dense_modes(A):
    """{l: matrix of the l-th Fourier coefficient on the full space}."""
    dim = _check_cap(A.lattice, A.q)
    n = A.lattice.n_sites
    out = {}
    for (S, l), (E, M) in A.terms.items():
        if l not in out:
            out[l] = np.zeros((dim, dim), dtype=complex)
        local_dense(M, E, n, A.q, out[l])
    return out


def _expm_herm(K, dt):
    """exp(-i K dt) for hermitian K."""
    w, v = np.linalg.eigh(K)
    return (v * np.exp(-1j * dt * w)) @ v.conj().T


class DenseModel:
    """H(t) = H_static + sum_l e^{i l.nu t} H_l on the full Hilbert space."""

    def __init__(self, static, modes, nu):
        self.static = np.asarray(static, dtype=complex)
        self.modes = {tuple(l): np.asarray(M, dtype=complex) for l, M in modes.items()}
        self.nu = np.asarray(nu, dtype=float)
        self._l = np.array(list(self.modes), dtype=float).reshape(len(self.modes), len(self.nu))
        self._stack = np.stack(list(self.modes.values())) if self.modes else None

    @classmethod
    def from_ops(cls, ops, nu):
        dims = {_check_cap(op.lattice, op.q) for op in ops}
        if len(dims) != 1:
            raise DomainError("operators live on different Hilbert spaces")
        dim = dims.pop()
        static = np.zeros((dim, dim), dtype=complex)
        modes = {}
        for op in ops:
            for l, M in dense_modes(op).items():
                if not any(l):
                    static += M
                else:
                    modes[l] = modes[l] + M if l in modes else M
        return cls(static, modes, nu)

    @property
    def dim(self):
        return self.static.shape[0]

    def is_static(self):
        return not self.modes

    def H(self, t):
        if self._stack is None:
            return self.static
        ph = np.exp(1j * (self._l @ self.nu) * t)
        return self.static + np.tensordot(ph, self._stack, axes=1)


@dataclass
class PropagatorTrace:
    t_grid: np.ndarray
    U_snapshots: np.ndarray
    unitarity_defect: float
    method: str
    dt: float


def default_dt(family, nu, lmax, n_sites):
    """min(0.01, 0.1 / (|J| r max||N||_0 |Lambda| + |nu|_1 lmax))."""
    scale = (float(np.abs(family.J).sum()) * family.r * family.max_norm0() * n_sites
             + float(np.abs(nu).sum()) * lmax)
    return min(0.01, 0.1 / scale) if scale > 0 else 0.01


def _step_factory(model, dt, method):
    if method == "midpoint":
        return lambda t: _expm_herm(model.H(t + 0.5 * dt), dt)
    if method == "magnus4":
        c = math.sqrt(3) / 6
        k = math.sqrt(3) / 12 * dt

        def step(t):
            H1 = model.H(t + (0.5 - c) * dt)
            H2 = model.H(t + (0.5 + c) * dt)
            # Omega = -i dt (H1+H2)/2 - sqrt(3)/12 dt^2 [H2, H1] = -i dt K
            K = 0.5 * (H1 + H2) - 1j * k * (H2 @ H1 - H1 @ H2)
            return _expm_herm(K, dt)

        return step
    raise DomainError(f"unknown integrator {method!r}")


def propagate(model, t_max, dt, method="midpoint", snapshot_every=1, times=None):
    """U(t) with U(0) = 1, stepping U <- exp(-i H dt) U.

    Snapshots every `snapshot_every` steps, or at the listed `times` (each is
    reached exactly by shortening the step that would overshoot it).
    """
    if model.dim > _check_cap_dim():
        raise ResourceError(f"dense dimension {model.dim} above the cap")
    if dt <= 0 or t_max < 0:
        raise DomainError("dt must be positive and t_max nonnegative")
    dim = model.dim
    U = np.eye(dim, dtype=complex)
    snaps, grid = [U.copy()], [0.0]
    if model.is_static():
        S0 = model.static
        if not np.count_nonzero(S0 - np.diag(np.diagonal(S0))):
            # diagonal: exact phases, no eigenvector round-off
            w, v = np.real(np.diagonal(S0)).copy(), np.eye(dim)
        else:
            w, v = np.linalg.eigh(S0)
        targets = (np.asarray(times, dtype=float) if times is not None else
                   np.arange(1, int(round(t_max / dt)) // snapshot_every + 1) * dt * snapshot_every)
        for t in targets:
            if t == 0:
                continue
            snaps.append((v * np.exp(-1j * t * w)) @ v.conj().T)
            grid.append(float(t))
        return _finish(grid, snaps, method, dt)
    if times is not None:
        targets = sorted(float(t) for t in times if t > 0)
        full = _step_factory(model, dt, method)
        t = 0.0
        for target in targets:
            while target - t > 1e-12:
                h = min(dt, target - t)
                U = (full if h == dt else _step_factory(model, h, method))(t) @ U
                t += h
            t = target
            snaps.append(U.copy())
            grid.append(target)
        return _finish(grid, snaps, method, dt)
    n = int(round(t_max / dt))
    step = _step_factory(model, dt, method)
    for i in range(n):
        U = step(i * dt) @ U
        if (i + 1) % snapshot_every == 0:
            snaps.append(U.copy())
            grid.append((i + 1) * dt)
    return _finish(grid, snaps, method, dt)


def _check_cap_dim():
    return dense_cap()


def _finish(grid, snaps, method, dt):
    S = np.stack(snaps)
    eye = np.eye(S.shape[1])
    defect = max(float(np.abs(U.conj().T @ U - eye).max()) for U in S)
    if defect > 1e-8:
        raise InvariantError(f"unitarity defect {defect:.2e} above 1e-8; reduce the step size")
    return PropagatorTrace(np.asarray(grid), S, defect, method, dt)


def spectral_norm(X, hermitian=False, tol=1e-10):
    """||X||_op: dense up to 2^10, Lanczos/ARPACK above (X may be a LinearOperator)."""
    if isinstance(X, np.ndarray) and X.shape[0] <= DENSE_NORM_MAX:
        return float(np.linalg.norm(X, 2))
    if hermitian:
        # the two ends separately: "LM" stalls on +-pairs (commutator spectra)
        hi = spla.eigsh(X, k=1, which="LA", tol=tol, return_eigenvectors=False)[0]
        lo = spla.eigsh(X, k=1, which="SA", tol=tol, return_eigenvectors=False)[0]
        return float(max(abs(hi), abs(lo)))
    s = spla.svds(X, k=1, tol=tol, return_singular_vectors=False)
    return float(s[0])


def self_convergence(model, t_max, dt, observable, method="midpoint"):
    """Ratio err(dt)/err(dt/2) of <U* O U>(t_max) differences; about 4 for order 2."""
    res = []
    for h in (dt, dt / 2, dt / 4):
        U = propagate(model, t_max, h, method, snapshot_every=int(round(t_max / h))).U_snapshots[-1]
        res.append(U.conj().T @ observable @ U)
    e1 = np.linalg.norm(res[0] - res[1], 2)
    e2 = np.linalg.norm(res[1] - res[2], 2)
    return float(e1 / e2) if e2 > 0 else math.inf


@dataclass
class DriftCurve:
    times: np.ndarray
    values: np.ndarray
    param: float = 0.0
    labels: list = field(default_factory=list)

    def rows(self):
        return [(float(t), a + 1, float(self.values[i, a]))
                for i, t in enumerate(self.times) for a in range(self.values.shape[1])]


def drift_curve(trace, family, param=0.0):
    """(1/|Lambda|) ||U* N^(a) U - N^(a)||_op per snapshot and alpha."""
    n_sites = family.operators[0].lattice.n_sites if family.operators else 1
    mats = [to_dense(N) for N in family.operators]
    vals = np.zeros((len(trace.t_grid), len(mats)))
    for a, N in enumerate(mats):
        for i, U in enumerate(trace.U_snapshots):
            if i == 0:
                continue
            D = U.conj().T @ N @ U - N
            vals[i, a] = spectral_norm(D, hermitian=True) / n_sites
    return DriftCurve(trace.t_grid, vals, param)


def heff_evolution(H_eff):
    """Closure t -> exp(-i H_eff t) from one diagonalisation."""
    w, v = np.linalg.eigh(H_eff)

    def U(t):
        return (v * np.exp(-1j * t * w)) @ v.conj().T

    return U


def compare_effective(trace, H_eff, O):
    """||U*(t) O U(t) - e^{i H_eff t} O e^{-i H_eff t}||_op along the trace."""
    Ue = heff_evolution(H_eff)
    out = np.zeros(len(trace.t_grid))
    for i, (t, U) in enumerate(zip(trace.t_grid, trace.U_snapshots)):
        V = Ue(t)
        X = U.conj().T @ O @ U - V.conj().T @ O @ V
        out[i] = spectral_norm(X, hermitian=True)
    return out


def frame_unitary(generators, phi):
    """Dense Y(phi) = e^{-iG_{n-1}(phi)} ... e^{-iG_0(phi)}."""
    Y = None
    for G in generators:
        E = _expm_herm(to_dense(G, phi), 1.0)
        Y = E if Y is None else E @ Y
    return Y


def conjugacy_check(model_H, model_nf, generators, nu, t_grid, dt, method="magnus4"):
    """max_t ||Y(nu t) U_H(t) Y*(0) - U_{H_nf}(t)||_op, both sides integrated independently."""
    t_grid = np.asarray(t_grid, dtype=float)
    tr_h = propagate(model_H, float(t_grid.max()), dt, method, times=t_grid)
    tr_n = propagate(model_nf, float(t_grid.max()), dt, method, times=t_grid)
    eye = np.eye(model_H.dim, dtype=complex)
    Y0 = frame_unitary(generators, np.zeros(len(nu))) if generators else eye
    devs = []
    for t, Uh, Un in zip(tr_h.t_grid, tr_h.U_snapshots, tr_n.U_snapshots):
        Yt = frame_unitary(generators, nu * t) if generators else eye
        devs.append(spectral_norm(Yt @ Uh @ Y0.conj().T - Un))
    return float(max(devs)), np.asarray(devs), tr_h.t_grid


# ------------------------------------------------------------ Lieb-Robinson

@dataclass
class LRRow:
    distance: int
    t: float
    measured: float
    bound: float


@dataclass
class LRTable:
    rows: list
    C_fit: float
    kappa: float
    v_unit: float
    valid: bool


def lieb_robinson_probe(Z, A, A_support, Bs, times, kappa, lattice_dim=1):
    """Measure ||[A, e^{itZ} B e^{-itZ}]||_op for each (distance, B) in Bs and t in times.

    Z: static QPOperator; A: sparse or dense local operator on the full space;
    Bs: list of (distance, operator, support size). The bound
    ||A|| ||B|| e^{-kappa(d - v t)} min(|S_A|, |S_B|) with
    v = C kappa^{-(lattice_dim+2)} e^kappa ||Z||_{2 kappa} is evaluated with the
    smallest C that makes it hold on every row with t > 0.
    """
    import scipy.sparse as sp
    from .opalg import to_sparse

    Zs = to_sparse(Z)
    dim = Zs.shape[0]
    Zd = Zs.toarray()
    if np.allclose(Zd.imag, 0):
        Zd = Zd.real
    w, v = np.linalg.eigh(Zd)
    del Zd
    vh = v.conj().T
    # everything in the eigenbasis of Z, where B(t) is B_ab e^{it(w_a - w_b)}
    At = vh @ (sp.csr_matrix(A) @ v)
    nA = spectral_norm(At, hermitian=True)
    zn = norm_kappa_rho(Z, 2 * kappa, 0.0)
    v_unit = kappa ** (-(lattice_dim + 2)) * math.exp(kappa) * zn
    raw = []
    for d, B, sB in Bs:
        Bt0 = vh @ (sp.csr_matrix(B) @ v)
        nB = spectral_norm(Bt0, hermitian=True)
        for t in times:
            ph = np.exp(1j * t * w)
            Bt = (ph[:, None] * Bt0) * ph.conj()[None, :]
            C = 1j * (At @ Bt - Bt @ At)
            del Bt
            meas = spectral_norm(C, hermitian=True, tol=1e-9)
            del C
            pref = nA * nB * min(A_support, sB) * math.exp(-kappa * d)
            raw.append((d, float(t), meas, pref))
    C_fit = 0.0
    for d, t, meas, pref in raw:
        if t > 0 and meas > pref and v_unit > 0:
            C_fit = max(C_fit, math.log(meas / pref) / (kappa * v_unit * t))
    rows, valid = [], True
    for d, t, meas, pref in raw:
        bound = pref * math.exp(kappa * C_fit * v_unit * t)
        valid &= meas <= bound * (1 + 1e-9) + 1e-12
        rows.append(LRRow(d, t, meas, bound))
    return LRTable(rows, C_fit, kappa, v_unit, bool(valid))
