"""Decentralized dual-consensus ADMM for one subgraph of vehicles.

Every vehicle ``i`` owns a stacked deviation vector ``dZ = (dz_1..dz_T, du_0..du_{T-1})``
around a nominal rollout and two constraint blocks written as ``J dZ <= k``:

* block ``[1]``: private box rows (control and speed bounds), held by ``i`` only;
* block ``[2, i]``: collision rows of target ``i`` against each neighbor ``j``.
  Each pairwise half-plane ``n^T (p_i - p_j) >= d`` is split reciprocally so the
  target's rows involve only its own positions; the neighbor carries the mirror
  half. Satisfying both halves implies the coupled half-plane.

Surrounding vehicles keep consensus copies of every neighbor's ``[2, i]`` block
with a zero coupling matrix, which is what makes their update a pure scaling
of ``r``. The feasible dual cone is the nonnegative orthant throughout.

Iterations are bulk-synchronous: all ``y`` copies are exchanged, every vehicle
updates from that snapshot, then the next round starts.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import dynamics
from .dynamics import NU, NX, VehicleParams, wrap_angle

log = logging.getLogger(__name__)

BOX = "box"
COL = "col"


@dataclass
class PlannerConfig:
    sigma: float = 1.0
    rho: float = 0.5
    k_max: int = 200
    # inner loop exits early once primal change, consensus and split residuals fall below this
    inner_tol: float = 1e-4
    max_outer: int = 5
    outer_tol: float = 0.05
    d_safe: float = 3.0
    # added to d_safe inside the collision rows only
    safety_margin: float = 0.25
    Q: tuple = (10.0, 10.0, 1.0, 1.0)
    R: tuple = (1.0, 10.0)
    # None -> 1 / (2 (sigma + 2 rho |n|)) per block
    gamma: float | None = None
    use_shortcuts: bool = True
    # row equilibration; scaling a row of (J, k) leaves its half-space unchanged
    box_row_scale: float = 4.0
    collision_row_scale: float = 30.0

    @property
    def d_plan(self) -> float:
        return self.d_safe + self.safety_margin

    def gamma_for(self, degree: int) -> float:
        if self.gamma is not None:
            return self.gamma
        return 1.0 / (2.0 * (self.sigma + 2.0 * self.rho * degree))


@dataclass
class VehicleBlock:
    vid: int
    z0: np.ndarray
    reference: np.ndarray          # (T+1, 4)
    nom_states: np.ndarray         # (T+1, 4)
    nom_controls: np.ndarray       # (T, 2)
    A: np.ndarray                  # (T, 4, 4)
    B: np.ndarray                  # (T, 4, 2)
    L1: np.ndarray
    L2: np.ndarray
    cost_const: float
    E: np.ndarray                  # dynamics equalities, E dZ = 0
    J1: np.ndarray
    k1: np.ndarray
    J2: np.ndarray
    k2: np.ndarray
    # neighbor id -> slice of rows inside J2
    col_rows: dict = field(default_factory=dict)
    _kkt: tuple | None = None

    @property
    def horizon(self) -> int:
        return len(self.nom_controls)

    @property
    def n(self) -> int:
        return self.L1.size


@dataclass
class SubgraphProblem:
    ids: list
    vehicles: dict
    neighbors: dict                # id -> sorted list of neighbor ids
    config: PlannerConfig
    params: VehicleParams

    def __post_init__(self):
        self._holders = {o: sorted([o] + list(self.neighbors[o])) for o in self.ids}
        self._k_share = {o: self.vehicles[o].k2 / len(self._holders[o]) for o in self.ids}
        # who sends vehicle i a copy of owner's block: neighbors of i that hold it
        self._senders = {i: {o: [u for u in self.neighbors[i] if u in self._holders[o]]
                             for o in [i] + list(self.neighbors[i])} for i in self.ids}

    @property
    def horizon(self) -> int:
        return self.vehicles[self.ids[0]].horizon

    @property
    def is_complete(self) -> bool:
        n = len(self.ids)
        return all(len(self.neighbors[i]) == n - 1 for i in self.ids)

    def degree(self, i: int) -> int:
        return len(self.neighbors[i])

    def holders(self, owner: int) -> list:
        """Vehicles keeping a copy of ``owner``'s collision block."""
        return self._holders[owner]


@dataclass
class BlockDual:
    p: np.ndarray
    s: np.ndarray
    r: np.ndarray
    y: np.ndarray
    x: np.ndarray

    @classmethod
    def zeros(cls, m: int) -> "BlockDual":
        return cls(*(np.zeros(m) for _ in range(5)))

    def copy(self) -> "BlockDual":
        return BlockDual(self.p.copy(), self.s.copy(), self.r.copy(), self.y.copy(), self.x.copy())


@dataclass
class DualState:
    """Dual variables held by one vehicle, keyed by ``(BOX, i)`` or ``(COL, owner)``."""
    blocks: dict
    k: int = 0

    def copy(self) -> "DualState":
        return DualState({key: b.copy() for key, b in self.blocks.items()}, self.k)


@dataclass
class PlannedTrajectory:
    states: dict                   # id -> (T+1, 4), linear prediction
    controls: dict                 # id -> (T, 2)
    residual: float
    objective: float
    converged: bool
    iterations: int = 0
    outer_passes: int = 0
    fallback: bool = False
    problem: SubgraphProblem | None = None
    deviations: dict | None = None


# ---------------------------------------------------------------------------
# problem construction

def _state_index(T: int, tau: int) -> int:
    """Column of dz_tau (tau >= 1) inside dZ."""
    return (tau - 1) * NX


def _control_index(T: int, tau: int) -> int:
    return NX * T + NU * tau


def _tracking_terms(ref, nom_states, nom_controls, Q, R):
    T = len(nom_controls)
    n = (NX + NU) * T
    err = nom_states - ref
    err[:, 2] = wrap_angle(err[:, 2])
    L1 = np.zeros(n)
    diag = np.zeros(n)
    for tau in range(1, T + 1):
        c = _state_index(T, tau)
        L1[c:c + NX] = 2.0 * Q * err[tau]
        diag[c:c + NX] = 2.0 * Q
    for tau in range(T):
        c = _control_index(T, tau)
        L1[c:c + NU] = 2.0 * R * nom_controls[tau]
        diag[c:c + NU] = 2.0 * R
    const = float(np.sum(Q * err ** 2) + np.sum(R * nom_controls ** 2))
    return L1, np.diag(diag), const


def _dynamics_rows(A, B):
    T = len(A)
    n = (NX + NU) * T
    E = np.zeros((NX * T, n))
    for tau in range(T):
        rows = slice(NX * tau, NX * (tau + 1))
        E[rows, _state_index(T, tau + 1):_state_index(T, tau + 1) + NX] = np.eye(NX)
        if tau > 0:
            c = _state_index(T, tau)
            E[rows, c:c + NX] = -A[tau]
        c = _control_index(T, tau)
        E[rows, c:c + NU] = -B[tau]
    return E


def _box_rows(nom_states, nom_controls, params: VehicleParams):
    T = len(nom_controls)
    n = (NX + NU) * T
    lo, hi = params.lower, params.upper
    J, k = [], []
    for tau in range(T):
        c = _control_index(T, tau)
        for m in range(NU):
            row = np.zeros(n)
            row[c + m] = 1.0
            J.append(row)
            k.append(hi[m] - nom_controls[tau, m])
            J.append(-row)
            k.append(nom_controls[tau, m] - lo[m])
    for tau in range(1, T + 1):
        c = _state_index(T, tau) + 3
        row = np.zeros(n)
        row[c] = 1.0
        J.append(row)
        k.append(params.v_max - nom_states[tau, 3])
        J.append(-row)
        k.append(nom_states[tau, 3])
    return np.array(J), np.array(k)


def collision_normal(q_i, q_j, i: int, j: int, fallback=None) -> np.ndarray:
    """Unit normal pointing from ``q_j`` to ``q_i``; antisymmetric in (i, j).

    Coincident points use ``fallback`` (a pair of positions, typically the
    current ones) and then a fixed axis.
    """
    d = np.asarray(q_i, dtype=float)[:2] - np.asarray(q_j, dtype=float)[:2]
    norm = math.hypot(d[0], d[1])
    if norm < 1e-9:
        log.warning("coincident prior positions for vehicles %d and %d; using fallback normal", i, j)
        if fallback is not None:
            return collision_normal(fallback[0], fallback[1], i, j)
        return np.array([1.0, 0.0]) if i < j else np.array([-1.0, 0.0])
    return d / norm


def _collision_rows(i, nbrs, nom_states, priors, z0, d_plan, T):
    n = (NX + NU) * T
    J, k = [], []
    col_rows = {}
    for j in nbrs:
        start = len(J)
        for tau in range(1, T + 1):
            q_i, q_j = priors[i][tau], priors[j][tau]
            nrm = collision_normal(q_i, q_j, i, j, fallback=(z0[i], z0[j]))
            dist = float(nrm @ (q_i - q_j))
            row = np.zeros(n)
            c = _state_index(T, tau)
            row[c:c + 2] = -nrm
            J.append(row)
            # n^T (p_i - q_i) >= (d - dist) / 2, p_i = nominal + dp_i
            k.append(float(nrm @ (nom_states[tau, :2] - q_i)) + 0.5 * (dist - d_plan))
        col_rows[j] = slice(start, len(J))
    if not J:
        return np.zeros((0, n)), np.zeros(0), col_rows
    return np.array(J), np.array(k), col_rows


def build_problem(ids, z0, references, controls=None, priors=None, edges=None,
                  config: PlannerConfig | None = None,
                  params: VehicleParams = dynamics.DEFAULT_PARAMS) -> SubgraphProblem:
    """Convexify the tracking OCP of a subgraph around nominal rollouts.

    Parameters
    ----------
    ids : list of int
        Vehicle ids in the subgraph.
    z0 : dict
        Current state per vehicle.
    references : dict
        ``(T+1, 4)`` reference trajectory per vehicle.
    controls : dict, optional
        Nominal controls ``(T, 2)``; zeros when missing.
    priors : dict, optional
        ``(T+1, 2)`` prior positions used for collision normals. Defaults to
        the nominal rollout, since references may pass through each other.
    edges : iterable of (i, j), optional
        Coupled pairs. Defaults to every pair (a clique).
    """
    config = config or PlannerConfig()
    ids = sorted(int(i) for i in ids)
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate vehicle id in subgraph")
    T = len(next(iter(references.values()))) - 1
    if edges is None:
        edges = {(a, b) for a in ids for b in ids if a < b}
    neighbors = {i: [] for i in ids}
    for a, b in edges:
        if a == b:
            continue
        neighbors[a].append(b)
        neighbors[b].append(a)
    neighbors = {i: sorted(set(v)) for i, v in neighbors.items()}
    Q = np.asarray(config.Q, dtype=float)
    R = np.asarray(config.R, dtype=float)
    u_noms, noms = {}, {}
    for i in ids:
        u_noms[i] = (np.zeros((T, NU)) if controls is None or i not in controls
                     else np.asarray(controls[i], dtype=float))
        noms[i] = dynamics.rollout(z0[i], u_noms[i], params=params)
    if priors is None:
        priors = {i: noms[i][:, :2] for i in ids}
    priors = {i: np.asarray(priors[i], dtype=float)[:, :2] for i in ids}

    vehicles = {}
    for i in ids:
        ref = np.asarray(references[i], dtype=float)
        if len(ref) != T + 1:
            raise ValueError(f"reference of vehicle {i} has length {len(ref)}, expected {T + 1}")
        u_nom, nom = u_noms[i], noms[i]
        A, B = dynamics.linearize_along(nom, u_nom, params=params)
        L1, L2, const = _tracking_terms(ref, nom, u_nom, Q, R)
        J1, k1 = _box_rows(nom, u_nom, params)
        J2, k2, col_rows = _collision_rows(i, neighbors[i], nom, priors, z0, config.d_plan, T)
        J1, k1 = config.box_row_scale * J1, config.box_row_scale * k1
        J2, k2 = config.collision_row_scale * J2, config.collision_row_scale * k2
        vehicles[i] = VehicleBlock(
            vid=i, z0=np.asarray(z0[i], dtype=float), reference=ref, nom_states=nom,
            nom_controls=u_nom, A=A, B=B, L1=L1, L2=L2, cost_const=const,
            E=_dynamics_rows(A, B), J1=J1, k1=k1, J2=J2, k2=k2, col_rows=col_rows,
        )
    return SubgraphProblem(ids=ids, vehicles=vehicles, neighbors=neighbors, config=config, params=params)


def vehicle_objective(vb: VehicleBlock, dz) -> float:
    """Tracking cost of the nominal-plus-deviation trajectory."""
    dz = np.asarray(dz, dtype=float)
    return float(vb.cost_const + vb.L1 @ dz + 0.5 * dz @ vb.L2 @ dz)


def init_duals(problem: SubgraphProblem, warm: dict | None = None) -> dict:
    """Fresh dual state; ``[1]`` blocks warm-started from ``warm`` when given, ``[2]`` blocks zeroed."""
    duals = {}
    for i in problem.ids:
        vb = problem.vehicles[i]
        blocks = {(BOX, i): BlockDual.zeros(len(vb.k1))}
        if warm is not None and i in warm and (BOX, i) in warm[i].blocks:
            old = warm[i].blocks[(BOX, i)]
            if old.y.shape == blocks[(BOX, i)].y.shape:
                blocks[(BOX, i)].y = old.y.copy()
                blocks[(BOX, i)].x = old.x.copy()
        for owner in [i] + problem.neighbors[i]:
            blocks[(COL, owner)] = BlockDual.zeros(len(problem.vehicles[owner].k2))
        duals[i] = DualState(blocks)
    return duals


def exchange(problem: SubgraphProblem, duals: dict) -> dict:
    """Snapshot of every ``[2]`` copy: ``inbox[i][owner][u] = y^{u,k}`` for neighbors ``u`` of ``i``."""
    # updates rebind y instead of writing into it, so references are a safe snapshot
    return {i: {owner: {u: duals[u].blocks[(COL, owner)].y for u in senders}
                for owner, senders in problem._senders[i].items()}
            for i in problem.ids}


# ---------------------------------------------------------------------------
# per-vehicle updates

def _k_share(problem: SubgraphProblem, owner: int) -> np.ndarray:
    return problem._k_share[owner]


def dual_update_target(problem: SubgraphProblem, duals: dict, i: int, inbox: dict) -> None:
    """p, s, r updates of vehicle ``i`` for its own blocks (before the primal step).

    The collision block uses the consensus factor ``rho (N - 1)`` against the
    common value held by the surrounding vehicles; the private block has no
    consensus partner, so its ``p`` stays zero.
    """
    cfg = problem.config
    box = duals[i].blocks[(BOX, i)]
    box.s = box.s + cfg.sigma * (box.y - box.x)
    box.r = cfg.sigma * box.x - (problem.vehicles[i].k1 + box.s)

    blk = duals[i].blocks[(COL, i)]
    n_sur = problem.degree(i)
    copies = inbox[i][i]
    y_sur = copies[problem.neighbors[i][0]] if copies else np.zeros_like(blk.y)
    blk.p = blk.p + cfg.rho * n_sur * (blk.y - y_sur)
    blk.s = blk.s + cfg.sigma * (blk.y - blk.x)
    blk.r = (cfg.sigma * blk.x + cfg.rho * n_sur * (blk.y + y_sur)
             - (_k_share(problem, i) + blk.p + blk.s))


def dual_update_surrounding(problem: SubgraphProblem, duals: dict, v: int, i: int, inbox: dict) -> None:
    """Shortcut update of vehicle ``v``'s copy of target ``i``'s collision block.

    Only consensus with the target matters: the other surrounding copies equal
    ``v``'s own, so they fold into the ``2 |n^v| - 1`` factor, and ``y`` is a
    plain scaling of ``r``.
    """
    cfg = problem.config
    blk = duals[v].blocks[(COL, i)]
    y_tgt = inbox[v][i][i]
    deg = problem.degree(v)
    blk.p = blk.p + cfg.rho * (blk.y - y_tgt)
    blk.s = blk.s + cfg.sigma * (blk.y - blk.x)
    blk.r = (cfg.sigma * blk.x + cfg.rho * (2 * deg - 1) * blk.y + cfg.rho * y_tgt
             - (_k_share(problem, i) + blk.p + blk.s))
    blk.y = 2.0 * cfg.gamma_for(deg) * blk.r
    blk.x = np.maximum(blk.s / cfg.sigma + blk.y, 0.0)


def dual_update_generic(problem: SubgraphProblem, duals: dict, a: int, owner: int, inbox: dict) -> None:
    """Unabbreviated p, s, r (and, for copies, y, x) update of ``a``'s copy of ``owner``'s block.

    Sums over every neighbor copy individually instead of assuming equal
    surrounding values. Used on non-complete subgraphs and to check the
    shortcuts.
    """
    cfg = problem.config
    blk = duals[a].blocks[(COL, owner)]
    copies = inbox[a][owner]
    ys = list(copies.values())
    deg = len(ys)
    sum_y = np.sum(ys, axis=0) if ys else np.zeros_like(blk.y)
    blk.p = blk.p + cfg.rho * (deg * blk.y - sum_y)
    blk.s = blk.s + cfg.sigma * (blk.y - blk.x)
    blk.r = cfg.sigma * blk.x + cfg.rho * (deg * blk.y + sum_y) - (_k_share(problem, owner) + blk.p + blk.s)
    if a != owner:
        blk.y = 2.0 * cfg.gamma_for(deg) * blk.r
        blk.x = np.maximum(blk.s / cfg.sigma + blk.y, 0.0)


def _kkt(problem: SubgraphProblem, i: int):
    """KKT matrix of the primal step and the block of its inverse mapping gradient to ``dZ``."""
    vb = problem.vehicles[i]
    if vb._kkt is None:
        cfg = problem.config
        c2 = 1.0 / (2.0 * cfg.gamma_for(problem.degree(i)))
        c1 = 1.0 / (2.0 * cfg.gamma_for(0))
        H = vb.L2 + vb.J1.T @ vb.J1 / c1
        if vb.J2.size:
            H = H + vb.J2.T @ vb.J2 / c2
        m = vb.E.shape[0]
        K = np.block([[H, vb.E.T], [vb.E, np.zeros((m, m))]])
        try:
            inv = np.linalg.inv(K)
        except np.linalg.LinAlgError:
            inv = np.full_like(K, np.nan)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError(f"singular KKT system for vehicle {i} (cond={np.linalg.cond(K):.3e})")
        # dZ = -inv[:n, :n] g, with g = L1 + J1^T r1 / c1 + J2^T r2 / c2
        G = -inv[:vb.n, :vb.n]
        vb._kkt = (K, G, c1, c2, G @ vb.L1, G @ vb.J1.T / c1, G @ vb.J2.T / c2)
    return vb._kkt


def primal_update_lqr(problem: SubgraphProblem, duals: dict, i: int) -> np.ndarray:
    """Minimize the tracking cost plus the dual-weighted constraint terms under linear dynamics.

    Objective: ``L1^T dZ + 1/2 dZ^T L2 dZ + 1/(2 c) ||J dZ + r||^2`` summed over
    the private (c = sigma) and collision (c = sigma + 2 rho |n|) blocks,
    subject to ``E dZ = 0``. The KKT system is inverted once per
    convexification, so each call is two matrix-vector products.
    """
    vb = problem.vehicles[i]
    _, _, _, _, g0, g1, g2 = _kkt(problem, i)
    dz = g0 + g1 @ duals[i].blocks[(BOX, i)].r
    if vb.J2.size:
        dz = dz + g2 @ duals[i].blocks[(COL, i)].r
    if not math.isfinite(float(dz.sum())):
        raise np.linalg.LinAlgError(f"non-finite primal iterate for vehicle {i}")
    return dz


def kkt_residual(problem: SubgraphProblem, duals: dict, i: int, dz) -> float:
    """Max-norm of stationarity plus feasibility residual for the primal step."""
    vb = problem.vehicles[i]
    K, _, c1, c2 = _kkt(problem, i)[:4]
    g = vb.L1 + vb.J1.T @ duals[i].blocks[(BOX, i)].r / c1
    if vb.J2.size:
        g = g + vb.J2.T @ duals[i].blocks[(COL, i)].r / c2
    H = K[:vb.n, :vb.n]
    # least-squares multiplier for the equality rows
    lam, *_ = np.linalg.lstsq(vb.E.T, -(H @ dz + g), rcond=None)
    stat = H @ dz + g + vb.E.T @ lam
    feas = vb.E @ dz
    return float(max(np.abs(stat).max(initial=0.0), np.abs(feas).max(initial=0.0)))


def dual_projection_target(problem: SubgraphProblem, duals: dict, i: int, dz) -> None:
    """y and x updates of vehicle ``i``'s own blocks after the primal step."""
    cfg = problem.config
    vb = problem.vehicles[i]
    box = duals[i].blocks[(BOX, i)]
    box.y = 2.0 * cfg.gamma_for(0) * (vb.J1 @ dz + box.r)
    box.x = np.maximum(box.s / cfg.sigma + box.y, 0.0)
    blk = duals[i].blocks[(COL, i)]
    blk.y = 2.0 * cfg.gamma_for(problem.degree(i)) * (vb.J2 @ dz + blk.r)
    blk.x = np.maximum(blk.s / cfg.sigma + blk.y, 0.0)


def consensus_residual(problem: SubgraphProblem, duals: dict) -> float:
    """max over edges of ||y^i - y^j||_inf across every shared block."""
    worst = 0.0
    for owner in problem.ids:
        holders = problem.holders(owner)
        for a in holders:
            for b in problem.neighbors[a]:
                if b in holders and b > a:
                    diff = duals[a].blocks[(COL, owner)].y - duals[b].blocks[(COL, owner)].y
                    if diff.size:
                        worst = max(worst, float(np.abs(diff).max()))
    return worst


def constraint_violation(problem: SubgraphProblem, dzs: dict) -> float:
    """Largest violation of ``J dZ <= k`` in physical units (row scaling undone)."""
    cfg = problem.config
    worst = 0.0
    for i in problem.ids:
        vb = problem.vehicles[i]
        for J, k, w in ((vb.J1, vb.k1, cfg.box_row_scale), (vb.J2, vb.k2, cfg.collision_row_scale)):
            if k.size:
                worst = max(worst, float(np.max(J @ dzs[i] - k)) / w)
    return worst


def split_residual(duals: dict) -> float:
    """max ||y - x||_inf over every block copy; zero at a fixed point."""
    worst = 0.0
    for d in duals.values():
        for blk in d.blocks.values():
            if blk.y.size:
                worst = max(worst, float(np.abs(blk.y - blk.x).max()))
    return worst


def admm_iteration(problem: SubgraphProblem, duals: dict, use_shortcuts: bool | None = None) -> dict:
    """One bulk-synchronous round over all vehicles; returns the new deviations."""
    if use_shortcuts is None:
        use_shortcuts = problem.config.use_shortcuts and problem.is_complete
    inbox = exchange(problem, duals)
    dzs = {}
    for i in problem.ids:
        if use_shortcuts:
            dual_update_target(problem, duals, i, inbox)
            for owner in problem.neighbors[i]:
                dual_update_surrounding(problem, duals, i, owner, inbox)
        else:
            cfg = problem.config
            box = duals[i].blocks[(BOX, i)]
            box.s = box.s + cfg.sigma * (box.y - box.x)
            box.r = cfg.sigma * box.x - (problem.vehicles[i].k1 + box.s)
            dual_update_generic(problem, duals, i, i, inbox)
            for owner in problem.neighbors[i]:
                dual_update_generic(problem, duals, i, owner, inbox)
        dzs[i] = primal_update_lqr(problem, duals, i)
        dual_projection_target(problem, duals, i, dzs[i])
        duals[i].k += 1
    return dzs


def run_admm(problem: SubgraphProblem, duals: dict | None = None, k_max: int | None = None,
             trace: Callable | None = None, use_shortcuts: bool | None = None,
             tol: float | None = None):
    """Inner loop from ``duals`` (fresh when None).

    Runs at most ``k_max`` rounds; with ``tol`` set, stops once the primal
    change, the consensus residual and the split residual are all below it.
    Returns ``(deviations, duals, rounds)``.
    """
    k_max = problem.config.k_max if k_max is None else k_max
    duals = init_duals(problem) if duals is None else duals
    dzs = {i: np.zeros(problem.vehicles[i].n) for i in problem.ids}
    rounds = 0
    for k in range(k_max):
        new = admm_iteration(problem, duals, use_shortcuts)
        rounds = k + 1
        change = max(float(np.abs(new[i] - dzs[i]).max(initial=0.0)) for i in problem.ids)
        dzs = new
        check = tol is not None and change < tol
        res = consensus_residual(problem, duals) if (check or trace is not None) else math.inf
        if trace is not None:
            trace({
                "iteration": rounds,
                "consensus_residual": res,
                "primal_change": change,
                "constraint_violation": constraint_violation(problem, dzs),
                "objective": sum(vehicle_objective(problem.vehicles[i], dzs[i]) for i in problem.ids),
            })
        if check and res < tol and split_residual(duals) < tol:
            break
    return dzs, duals, rounds


# ---------------------------------------------------------------------------
# outer loop

def _shift_controls(controls, T):
    controls = np.asarray(controls, dtype=float).reshape(-1, NU)
    if len(controls) >= T:
        return controls[:T].copy()
    pad = np.zeros((T - len(controls), NU))
    return np.vstack([controls, pad])


def solve_subgraph(ids, z0, references, warm_controls=None, priors=None, edges=None,
                   config: PlannerConfig | None = None,
                   params: VehicleParams = dynamics.DEFAULT_PARAMS,
                   trace: Callable | None = None) -> PlannedTrajectory:
    """Linearize / solve / exchange until the plan stops moving or the pass cap is hit.

    A subgraph without collision coupling needs no exchange and stops after
    one pass. On a non-finite iterate the previous plan is returned with
    ``fallback=True``.
    """
    config = config or PlannerConfig()
    ids = sorted(ids)
    T = len(next(iter(references.values()))) - 1
    controls = {i: _shift_controls(warm_controls[i], T) if warm_controls and i in warm_controls
                else np.zeros((T, NU)) for i in ids}
    warm_duals = None
    prev_positions = None
    result = None
    total_iters = 0
    for outer in range(1, config.max_outer + 1):
        problem = build_problem(ids, z0, references, controls, priors, edges, config, params)
        duals = init_duals(problem, warm_duals)
        if trace is not None:
            def _trace(rec, outer=outer):
                trace(dict(rec, outer=outer, ids=ids))
        else:
            _trace = None
        try:
            dzs, duals, rounds = run_admm(problem, duals, trace=_trace, tol=config.inner_tol)
        except np.linalg.LinAlgError as exc:
            log.warning("subgraph %s: %s", ids, exc)
            dzs, rounds = None, config.k_max
        total_iters += rounds
        if dzs is None or not all(np.all(np.isfinite(d)) for d in dzs.values()):
            log.warning("subgraph %s: non-finite iterate, keeping previous plan", ids)
            states = {i: dynamics.rollout(z0[i], controls[i], params=params) for i in ids}
            return PlannedTrajectory(states=states, controls=controls, residual=math.inf,
                                     objective=math.inf, converged=False, iterations=total_iters,
                                     outer_passes=outer, fallback=True, problem=problem)
        states, new_controls = {}, {}
        for i in ids:
            vb = problem.vehicles[i]
            dz = dzs[i]
            dstates = np.vstack([np.zeros(NX), dz[:NX * T].reshape(T, NX)])
            states[i] = vb.nom_states + dstates
            new_controls[i] = vb.nom_controls + dz[NX * T:].reshape(T, NU)
        residual = consensus_residual(problem, duals)
        objective = sum(vehicle_objective(problem.vehicles[i], dzs[i]) for i in ids)
        positions = np.stack([states[i][:, :2] for i in ids])
        moved = math.inf if prev_positions is None else float(np.abs(positions - prev_positions).max())
        result = PlannedTrajectory(states=states, controls=new_controls, residual=residual,
                                   objective=objective, converged=False, iterations=total_iters,
                                   outer_passes=outer, problem=problem, deviations=dzs)
        coupled = any(problem.neighbors[i] for i in ids)
        if not coupled or moved < config.outer_tol:
            result.converged = True
            break
        prev_positions = positions
        warm_duals = duals
        # clip the nominal to the box so the next linearization point is admissible
        controls = {i: np.clip(new_controls[i], params.lower, params.upper) for i in ids}
        priors = {i: dynamics.rollout(z0[i], controls[i], params=params)[:, :2] for i in ids}
    return result
