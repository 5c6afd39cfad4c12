"""Kinematic bicycle model used by the planner.

State ``z = (x, y, heading, speed)``, control ``u = (acceleration, steering)``.
The discrete update is a forward-Euler step of the bicycle kinematics with the
speed clamped to ``[0, v_max]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NX = 4
NU = 2


@dataclass(frozen=True)
class VehicleParams:
    wheelbase: float = 2.5
    v_max: float = 10.0
    # symmetric bounds: -u_lower <= u <= u_upper
    u_lower: tuple = (3.0, 0.5)
    u_upper: tuple = (3.0, 0.5)
    dt: float = 0.1

    @property
    def lower(self) -> np.ndarray:
        return -np.asarray(self.u_lower, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.asarray(self.u_upper, dtype=float)


DEFAULT_PARAMS = VehicleParams()


def wrap_angle(theta):
    """Map an angle (or array of angles) into (-pi, pi]."""
    theta = np.asarray(theta, dtype=float)
    wrapped = np.mod(theta + math.pi, 2.0 * math.pi) - math.pi
    wrapped = np.where(wrapped == -math.pi, math.pi, wrapped)
    # values already in range pass through untouched (the shift above rounds)
    wrapped = np.where((theta > -math.pi) & (theta <= math.pi), theta, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def _check_steering(delta: float) -> None:
    if abs(delta) >= math.pi / 2:
        raise ValueError(f"steering angle {delta!r} outside (-pi/2, pi/2)")


def step(z, u, dt: float | None = None, params: VehicleParams = DEFAULT_PARAMS) -> np.ndarray:
    dt = params.dt if dt is None else dt
    x, y, th, v = (float(c) for c in z)
    a, delta = float(u[0]), float(u[1])
    _check_steering(delta)
    x_n = x + v * math.cos(th) * dt
    y_n = y + v * math.sin(th) * dt
    th_n = wrap_angle(th + v / params.wheelbase * math.tan(delta) * dt)
    v_n = min(max(v + a * dt, 0.0), params.v_max)
    return np.array([x_n, y_n, th_n, v_n])


def linearize(z, u, dt: float | None = None, params: VehicleParams = DEFAULT_PARAMS):
    """Analytic Jacobians ``(A, B)`` of :func:`step` at ``(z, u)``.

    The speed clamp is treated as inactive, i.e. these are the Jacobians of
    the unclamped Euler map.
    """
    dt = params.dt if dt is None else dt
    _, _, th, v = (float(c) for c in z)
    delta = float(u[1])
    _check_steering(delta)
    L = params.wheelbase
    c, s = math.cos(th), math.sin(th)
    A = np.eye(NX)
    A[0, 2] = -v * s * dt
    A[0, 3] = c * dt
    A[1, 2] = v * c * dt
    A[1, 3] = s * dt
    A[2, 3] = math.tan(delta) / L * dt
    B = np.zeros((NX, NU))
    B[2, 1] = v / (L * math.cos(delta) ** 2) * dt
    B[3, 0] = dt
    return A, B


def rollout(z0, controls, dt: float | None = None, params: VehicleParams = DEFAULT_PARAMS) -> np.ndarray:
    """States ``z_0 .. z_T`` obtained by applying ``controls`` from ``z0``."""
    traj = [np.asarray(z0, dtype=float).copy()]
    for u in np.asarray(controls, dtype=float).reshape(-1, NU):
        traj.append(step(traj[-1], u, dt, params))
    return np.vstack(traj)


def linearize_along(states, controls, dt: float | None = None, params: VehicleParams = DEFAULT_PARAMS):
    """Stacked Jacobians along a nominal trajectory, shapes (T, 4, 4) and (T, 4, 2)."""
    T = len(controls)
    As = np.empty((T, NX, NX))
    Bs = np.empty((T, NX, NU))
    for t in range(T):
        As[t], Bs[t] = linearize(states[t], controls[t], dt, params)
    return As, Bs
