"""Planar pose/delta algebra and state-block value semantics.

Conventions used throughout the package:

* a pose ``x = (p, theta)`` places a body in the world: ``p`` in meters,
  ``theta`` in radians, always kept in ``(-pi, pi]``;
* a delta ``d = (dp, dtheta)`` is a rigid motion expressed in the frame of
  the pose it is composed onto;
* a tangent increment is a plain length-3 array ``(tx, ty, ttheta)`` added
  componentwise, with the angle wrapped.

Composition of a pose with a delta and of two deltas share one formula, so
both are thin wrappers over the same routine.  All Jacobians are closed
form; the tangent convention is additive at the element itself, which for
the split (p, theta) parametrization is exact in the angle component.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, InvalidValueError

EUCLIDEAN = "euclidean"
ANGLE = "angle"

_TAU = math.tau


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi].

    Idempotent; pi maps to pi, -pi maps to pi.
    """
    a = float(a)
    if not math.isfinite(a):
        raise InvalidValueError(f"angle must be finite, got {a}")
    r = math.remainder(a, _TAU)
    if r <= -math.pi:
        r += _TAU
    return r


def rot2(theta: float) -> np.ndarray:
    """2x2 rotation matrix R(theta)."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def drot2(theta: float) -> np.ndarray:
    """Derivative dR/dtheta of the 2x2 rotation matrix."""
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


def _as_finite_vector(values, n: int | None, what: str) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    elif v.ndim != 1:
        raise ContractError(f"{what} must be a vector, got shape {v.shape}")
    if n is not None and v.shape[0] != n:
        raise ContractError(f"{what} must have length {n}, got {v.shape[0]}")
    for x in v.tolist():
        if not math.isfinite(x):
            raise InvalidValueError(f"{what} must be finite, got {v}")
    return v


@dataclass
class StateBlock:
    """Minimal estimable unit: a value vector, its parametrization, a fixed flag.

    Angle blocks hold exactly one value and are normalized on construction.
    Fixed blocks are registered with the solver but never moved by it.
    """

    values: np.ndarray
    kind: str = EUCLIDEAN
    fixed: bool = False

    def __post_init__(self):
        if self.kind not in (EUCLIDEAN, ANGLE):
            raise ContractError(f"unknown block kind {self.kind!r}")
        n = 1 if self.kind == ANGLE else None
        self.values = _as_finite_vector(self.values, n, "state block values")
        if self.kind == ANGLE:
            self.values = np.array([normalize_angle(self.values[0])])

    @property
    def tangent_dim(self) -> int:
        return self.values.shape[0]

    def copy(self) -> "StateBlock":
        return StateBlock(self.values.copy(), self.kind, self.fixed)


@dataclass
class Pose2:
    """Planar pose: position (m) and heading (rad, wrapped)."""

    p: np.ndarray
    theta: float

    def __post_init__(self):
        self.p = _as_finite_vector(self.p, 2, "pose position")
        self.theta = normalize_angle(self.theta)

    @classmethod
    def identity(cls) -> "Pose2":
        return cls(np.zeros(2), 0.0)

    @classmethod
    def from_array(cls, v) -> "Pose2":
        v = _as_finite_vector(v, 3, "pose array")
        return cls(v[:2], v[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.p[0], self.p[1], self.theta])


@dataclass
class Delta2:
    """Rigid motion increment expressed in the origin frame."""

    dp: np.ndarray
    dtheta: float

    def __post_init__(self):
        self.dp = _as_finite_vector(self.dp, 2, "delta translation")
        self.dtheta = normalize_angle(self.dtheta)

    @classmethod
    def identity(cls) -> "Delta2":
        return cls(np.zeros(2), 0.0)

    @classmethod
    def from_array(cls, v) -> "Delta2":
        v = _as_finite_vector(v, 3, "delta array")
        return cls(v[:2], v[2])

    def as_array(self) -> np.ndarray:
        return np.array([self.dp[0], self.dp[1], self.dtheta])


def _compose(pa: np.ndarray, ta: float, pb: np.ndarray, tb: float):
    """Shared composition kernel: (pa, ta) followed by (pb, tb) in a's frame.

    Returns the composed (p, theta) plus the two 3x3 Jacobians.
    """
    c, s = math.cos(ta), math.sin(ta)
    bx, by = pb[0], pb[1]
    p = np.array([pa[0] + c * bx - s * by, pa[1] + s * bx + c * by])
    theta = normalize_angle(ta + tb)
    j_a = np.array([
        [1.0, 0.0, -s * bx - c * by],
        [0.0, 1.0, c * bx - s * by],
        [0.0, 0.0, 1.0],
    ])
    j_b = np.array([
        [c, -s, 0.0],
        [s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return p, theta, j_a, j_b


def pose_compose(a: Pose2, b: Delta2):
    """a boxplus b: advance pose ``a`` by delta ``b`` expressed in a's frame.

    Returns (pose, J_a, J_b) with J_a = [[I, R'(a.theta) b.dp], [0, 1]] and
    J_b = [[R(a.theta), 0], [0, 1]].
    """
    p, theta, j_a, j_b = _compose(a.p, a.theta, b.dp, b.dtheta)
    return Pose2(p, theta), j_a, j_b


def delta_compose(a: Delta2, b: Delta2):
    """Delta composition (same formula as pose_compose on delta operands)."""
    p, theta, j_a, j_b = _compose(a.dp, a.dtheta, b.dp, b.dtheta)
    return Delta2(p, theta), j_a, j_b


def pose_between(xi: Pose2, xj: Pose2):
    """xj boxminus xi: the delta that takes xi to xj, in xi's frame.

    Inverse of pose_compose: xi boxplus (xj boxminus xi) == xj.
    """
    c, s = math.cos(xi.theta), math.sin(xi.theta)
    dx, dy = xj.p[0] - xi.p[0], xj.p[1] - xi.p[1]
    dp = np.array([c * dx + s * dy, -s * dx + c * dy])
    dtheta = normalize_angle(xj.theta - xi.theta)
    j_xi = np.array([
        [-c, -s, -s * dx + c * dy],
        [s, -c, -c * dx - s * dy],
        [0.0, 0.0, -1.0],
    ])
    j_xj = np.array([
        [c, s, 0.0],
        [-s, c, 0.0],
        [0.0, 0.0, 1.0],
    ])
    return Delta2(dp, dtheta), j_xi, j_xj


def delta_plus(d: Delta2, t) -> Delta2:
    """Additive tangent plus on a delta; the angle component wraps."""
    t = _as_finite_vector(t, 3, "tangent")
    return Delta2(d.dp + t[:2], normalize_angle(d.dtheta + t[2]))


def delta_minus(d2: Delta2, d1: Delta2) -> np.ndarray:
    """Additive tangent difference d2 - d1; inverse of delta_plus."""
    return np.array([
        d2.dp[0] - d1.dp[0],
        d2.dp[1] - d1.dp[1],
        normalize_angle(d2.dtheta - d1.dtheta),
    ])


def block_plus(block: StateBlock, dx) -> np.ndarray:
    """Retract a tangent increment onto a block's values.

    Euclidean blocks add; angle blocks add then wrap.  Returns new values
    without mutating the block.
    """
    dx = np.atleast_1d(np.asarray(dx, dtype=float))
    if dx.shape != (block.tangent_dim,):
        raise ContractError(
            f"tangent has shape {dx.shape}, block expects ({block.tangent_dim},)"
        )
    if block.kind == ANGLE:
        return np.array([normalize_angle(block.values[0] + dx[0])])
    return block.values + dx
