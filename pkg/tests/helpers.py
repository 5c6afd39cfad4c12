"""Shared oracle helpers for the test suite."""
import cvxpy as cp
import numpy as np

from amodsim import admm

T = 15
DT = 0.1


def straight(p0, heading, speed, T=T, dt=DT):
    """Constant-speed reference along a straight line."""
    return np.array([[p0[0] + np.cos(heading) * speed * dt * t, p0[1] + np.sin(heading) * speed * dt * t,
                      heading, speed] for t in range(T + 1)])


def head_on():
    z0 = {1: np.array([-10.0, 0.0, 0.0, 5.0]), 2: np.array([10.0, 0.3, np.pi, 5.0])}
    refs = {1: straight(z0[1][:2], 0.0, 7.0), 2: straight(z0[2][:2], np.pi, 7.0)}
    return z0, refs


def intersection():
    z0 = {1: np.array([-8.0, 0.0, 0.0, 5.0]), 2: np.array([0.0, -8.0, np.pi / 2, 5.0]),
          3: np.array([9.0, 1.0, np.pi, 5.0])}
    refs = {1: straight(z0[1][:2], 0.0, 7.0), 2: straight(z0[2][:2], np.pi / 2, 7.0),
            3: straight(z0[3][:2], np.pi, 7.0)}
    return z0, refs


def centralized_qp(problem):
    """Optimal value of the convexified subgraph problem solved as one dense QP."""
    obj, cons = 0, []
    for i in problem.ids:
        vb = problem.vehicles[i]
        z = cp.Variable(vb.n)
        obj += vb.cost_const + vb.L1 @ z + 0.5 * cp.quad_form(z, cp.psd_wrap(vb.L2))
        cons += [vb.E @ z == 0, vb.J1 @ z <= vb.k1]
        if vb.k2.size:
            cons.append(vb.J2 @ z <= vb.k2)
    prob = cp.Problem(cp.Minimize(obj), cons)
    prob.solve(solver=cp.CLARABEL)
    return prob.value


def min_distance(plan):
    ids = sorted(plan.states)
    best = np.inf
    for a in range(len(ids)):
        for b in range(a + 1, len(ids)):
            d = np.linalg.norm(plan.states[ids[a]][:, :2] - plan.states[ids[b]][:, :2], axis=1)
            best = min(best, float(d.min()))
    return best


def solve_oracle_instance(instance, config=None):
    z0, refs = instance()
    return admm.solve_subgraph(sorted(z0), z0, refs, config=config or admm.PlannerConfig())
