"""Homological equations i[J.N, G] + nu.d_phi G + P = Z in both regimes.

Division happens on graded coefficients (S, l, k); the generator is then
evaluated at theta = 0 by summing over k.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import RegimeError, ResonanceError
from .errors import ContractError
from .opalg import (DIVISOR_FLOOR, GradedOperator, _Acc, average, check_strong_locality,
                    dense_cap, double_bracket, graded_map, l1, norm_kappa_rho, to_dense)


@dataclass
class HomSolution:
    G: object
    Z: object
    residual: float
    divisor_min: float
    graded: GradedOperator | None = None
    variant: str = "inv"


@dataclass
class UvIrSplit:
    K_cut: float
    L_cut: float
    parts: dict

    @property
    def ir(self):
        return self.parts[("ir", "ir")]

    @property
    def uv(self):
        p = self.parts
        return p[("uv", "ir")] + p[("ir", "uv")] + p[("uv", "uv")]


def _predicted(cert, k, l):
    if cert is None:
        return None
    return cert.gamma_est / max(1, l1(k) + l1(l)) ** cert.tau


class _Divider:
    """Entrywise factor i/(J.k + nu.l) on occupied elements; tracks the smallest divisor."""

    def __init__(self, J, nu, floor, cert=None, keep=None):
        self.J = np.asarray(J, dtype=float)
        self.nu = np.asarray(nu, dtype=float)
        self.floor = floor
        self.cert = cert
        self.keep = keep
        self.dmin = np.inf

    def __call__(self, S, l, K, occ):
        r = K.shape[-1]
        jk = K @ self.J if r else np.zeros(K.shape[:2])
        div = jk + (float(np.dot(self.nu, l)) if len(l) else 0.0)
        zero = ~np.any(K != 0, axis=-1) & (not any(l))
        live = occ & ~zero
        if self.keep is not None:
            live &= self.keep(l, K)
        if live.any():
            a = np.abs(div[live])
            amin = float(a.min())
            if amin < self.floor:
                i, j = np.argwhere(live & (np.abs(div) == amin))[0]
                k = tuple(int(x) for x in K[i, j])
                pred = _predicted(self.cert, k, l)
                msg = f"resonant mode k={k}, l={l}: |J.k + nu.l| = {amin:.3e}"
                if pred is not None:
                    msg += f" (Diophantine bound predicts >= {pred:.3e})"
                raise ResonanceError(msg, k=k, l=l, divisor=amin, predicted=pred)
            self.dmin = min(self.dmin, amin)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(live, 1j / np.where(live, div, 1.0), 0.0)


def _divide(g, J, nu, floor, cert=None, keep=None):
    """Graded-operator version: G coefficients (i/(J.k + nu.l)) P_{l,k} summed over k."""
    zl = (0,) * g.m
    accG = _Acc(g.q)
    accZ = _Acc(g.q)
    dmin = np.inf
    for (S, l, k), (E, M) in g.terms.items():
        if keep is not None and not keep(S, l, k):
            continue
        if l == zl and not any(k):
            accZ.add(S, zl, E, M)
            continue
        div = float(np.dot(J, k)) + (float(np.dot(nu, l)) if g.m else 0.0)
        if abs(div) < floor:
            pred = _predicted(cert, k, l)
            msg = f"resonant mode k={k}, l={l}: |J.k + nu.l| = {abs(div):.3e}"
            if pred is not None:
                msg += f" (Diophantine bound predicts >= {pred:.3e})"
            raise ResonanceError(msg, k=k, l=l, divisor=abs(div), predicted=pred)
        dmin = min(dmin, abs(div))
        accG.add(S, l, E, (1j / div) * M)
    return accG.terms(), accZ.terms(), dmin


def _solve_parts(P, N, nu, floor, cert, check, graded, keep=None):
    """(G at theta=0, <P>, min divisor), via stored grading when given, else entrywise."""
    if graded is not None:
        gt, zt, dmin = _divide(graded, N.J, nu, floor, cert)
        return P.like(gt, hermitian=P.hermitian), P.like(zt, hermitian=P.hermitian), dmin
    if check and N.r:
        rep = check_strong_locality(P, N)
        if not rep.ok:
            raise ContractError(f"operator is not strongly local: worst {rep.worst:.3e} at {rep.pair}")
    div = _Divider(N.J, nu, floor, cert, keep)
    G = graded_map(P, N, div)
    G.hermitian = P.hermitian
    Z = average(P, N, check=False)
    return G, Z, div.dmin


def homological_residual(G, P, Z, N, nu, n_phi=5, seed=0):
    """max over random phi of ||i[J.N, G] + nu.dG + P - Z||_op (dense)."""
    if G.dense_dim() > dense_cap():
        return float("nan")
    rng = np.random.default_rng(seed)
    H0 = to_dense(N.h0(G.m))
    dG = G.derivative(nu)
    Zd = to_dense(Z)
    worst = 0.0
    for _ in range(n_phi):
        phi = rng.uniform(0, 2 * np.pi, size=G.m)
        Gd = to_dense(G, phi)
        R = 1j * (H0 @ Gd - Gd @ H0) + to_dense(dG, phi) + to_dense(P, phi) - Zd
        worst = max(worst, float(np.linalg.norm(R, 2)))
    return worst


def _obs_shift(G):
    """G(phi) - G(0): subtract the phi = 0 value from the static mode."""
    acc = _Acc(G.q)
    zl = (0,) * G.m
    for (S, l), (E, M) in G.terms.items():
        acc.add(S, l, E, M)
        acc.add(S, zl, E, -M)
    return G.like(acc.terms(), hermitian=G.hermitian)


def solve_hom_inv(P, N, omega, floor=DIVISOR_FLOOR, cert=None, check=True,
                  residual=True, graded=None):
    """G with (G_S)_{l,k} = -(P_S)_{l,k} / (i(J.k + omega.l)) and Z = <P>."""
    omega = np.asarray(omega, dtype=float)
    G, Z, dmin = _solve_parts(P, N, omega, floor, cert, check, graded)
    res = homological_residual(G, P, Z, N, omega) if residual else float("nan")
    return HomSolution(G, Z, res, float(dmin), graded, "inv")


def solve_hom_obs(P, N, omega, floor=DIVISOR_FLOOR, cert=None, check=True,
                  residual=True, graded=None):
    """G_obs = G - G(0) and Z_obs = <<P>>."""
    omega = np.asarray(omega, dtype=float)
    G, _, dmin = _solve_parts(P, N, omega, floor, cert, check, graded)
    G = _obs_shift(G)
    Z = double_bracket(P, N, N.J, omega, graded=graded, floor=floor, check=False)
    res = homological_residual(G, P, Z, N, omega) if residual else float("nan")
    return HomSolution(G, Z, res, float(dmin), graded, "obs")


def split_uv_ir(P, K_cut, L_cut):
    """Partition graded modes by |k| <= K_cut and |l| <= L_cut (l1 norms)."""
    def cls(S, l, k):
        return ("ir" if l1(k) <= K_cut else "uv", "ir" if l1(l) <= L_cut else "uv")

    parts = {}
    for ik in ("ir", "uv"):
        for il in ("ir", "uv"):
            parts[(ik, il)] = P.select(lambda S, l, k, ik=ik, il=il: cls(S, l, k) == (ik, il))
    return UvIrSplit(K_cut, L_cut, parts)


def fast_cutoffs(lam, gamma_omega, tau_omega, J):
    """K = gamma_omega lam^{1/2} / (2|J|), L = lam^{1/(2 tau_omega)} with |J| the l1 norm."""
    Jn = float(np.abs(J).sum())
    K = gamma_omega * np.sqrt(lam) / (2 * Jn) if Jn > 0 else np.inf
    return K, lam ** (1.0 / (2 * tau_omega))


def _ir_mask(K_cut, L_cut):
    def keep(l, K):
        return (np.abs(K).sum(-1) <= K_cut) & (l1(l) <= L_cut)
    return keep


def solve_hom_ff(P, N, lam, omega, K_cut, L_cut, gamma_omega, gamma_J=None, tau_J=None,
                 variant="inv", floor=DIVISOR_FLOOR, check=True, residual=True):
    """Fast-forcing solve: divide only ir x ir modes by J.k + lam omega.l.

    Returns (HomSolution, leftover) with leftover = P^uv, the undivided part.
    Raises RegimeError if a divided mode breaks the divisor lower bounds
    (gamma_omega/2) lam^{1/2} for l != 0 or gamma_J/|k|^tau_J for l = 0.
    """
    omega = np.asarray(omega, dtype=float)
    nu = lam * omega
    if check and N.r:
        rep = check_strong_locality(P, N)
        if not rep.ok:
            raise ContractError(f"operator is not strongly local: worst {rep.worst:.3e} at {rep.pair}")
    keep = _ir_mask(K_cut, L_cut)
    bound_l = 0.5 * gamma_omega * np.sqrt(lam)
    Jv = np.asarray(N.J, dtype=float)

    def bounds(S, l, K, occ):
        live = occ & keep(l, K)
        k0 = ~np.any(K != 0, axis=-1)
        div = np.abs((K @ Jv if N.r else 0.0) + float(np.dot(nu, l)))
        if any(l):
            bad = live & (div < bound_l)
            if bad.any():
                i, j = np.argwhere(bad)[0]
                k = tuple(int(x) for x in K[i, j])
                raise RegimeError(f"divisor {div[i, j]:.3e} at k={k}, l={l} below (gamma/2)lam^1/2 = "
                                  f"{bound_l:.3e}; increase lambda", k=k, l=l, divisor=float(div[i, j]),
                                  predicted=bound_l)
        elif gamma_J is not None:
            kn = np.abs(K).sum(-1)
            with np.errstate(divide="ignore"):
                need = np.where(k0, 0.0, gamma_J / np.maximum(kn, 1) ** tau_J)
            bad = live & ~k0 & (div < need * (1 - 1e-12))
            if bad.any():
                i, j = np.argwhere(bad)[0]
                k = tuple(int(x) for x in K[i, j])
                raise RegimeError(f"divisor {div[i, j]:.3e} at k={k}, l=0 below gamma_J/|k|^tau = "
                                  f"{need[i, j]:.3e}", k=k, l=l, divisor=float(div[i, j]),
                                  predicted=float(need[i, j]))
        return live.astype(float)

    P_ir = graded_map(P, N, bounds)
    P_ir.hermitian = P.hermitian
    leftover = P - P_ir
    leftover.hermitian = P.hermitian
    div = _Divider(N.J, nu, floor, keep=keep)
    G = graded_map(P, N, div)
    G.hermitian = P.hermitian
    if variant == "obs":
        G = _obs_shift(G)
        Z = double_bracket(P_ir, N, N.J, nu, floor=floor, check=False)
    else:
        Z = average(P_ir, N, check=False)
    res = homological_residual(G, P_ir, Z, N, nu) if residual else float("nan")
    sol = HomSolution(G, Z, res, float(div.dmin), None, variant)
    sol.P_solved = P_ir
    return sol, leftover


def generator_bound(P, kappa, rho, delta, gamma, tau, r, c):
    """Right side of ||G||_{kappa - c delta, rho - delta} <= 4^r tau^tau (1+delta)^r / (e^tau gamma delta^{tau+r}) ||P||_{kappa,rho}."""
    pref = 4 ** r * tau ** tau * (1 + delta) ** r / (np.exp(tau) * gamma * delta ** (tau + r))
    return pref * norm_kappa_rho(P, kappa, rho)
