"""Referring transformations across coupled boundaries.

A transform maps a point ``P`` to ``P' = y + R @ P`` where ``y`` is a
translation and ``R`` a proper rotation.  Chains of referrals collapse to a
single pair via :func:`compose`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHO_TOL = 1e-12


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise ValueError("zero-length normal")
    return v / n


def _perpendicular(n: np.ndarray) -> np.ndarray:
    # cross with the axis of the smallest-magnitude component
    axis = np.zeros(3)
    axis[int(np.argmin(np.abs(n)))] = 1.0
    p = np.cross(n, axis)
    return p / np.linalg.norm(p)


def rotation_between(n_alpha, n_beta) -> np.ndarray:
    """Rotation tensor taking ``-n_alpha`` onto ``n_beta``.

    Antiparallel normals (the usual facing coupled faces) give the identity
    exactly.  Parallel normals give a half-turn about a deterministic axis
    perpendicular to the normal.
    """
    na = _unit(n_alpha)
    nb = _unit(n_beta)
    c = float(na @ nb)
    axis = np.cross(na, nb)
    s = np.linalg.norm(axis)
    if s < 1e-14:
        if c < 0.0:
            return np.eye(3)
        k = _perpendicular(na)
        return 2.0 * np.outer(k, k) - np.eye(3)
    k = axis / s
    return -c * np.eye(3) + (1.0 + c) * np.outer(k, k) + np.outer(na, nb) - np.outer(nb, na)


def check_rotation(R, tol: float = ORTHO_TOL) -> None:
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3):
        raise ValueError(f"rotation must be 3x3, got {R.shape}")
    if np.max(np.abs(R.T @ R - np.eye(3))) > tol:
        raise ValueError("rotation tensor is not orthogonal")
    if abs(np.linalg.det(R) - 1.0) > tol:
        raise ValueError("rotation tensor is not proper (det != +1)")


@dataclass(frozen=True, eq=False)
class TransformPair:
    """Translation ``y`` and rotation ``R``; acts as ``y + R @ p``."""

    y: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(3)
        R = np.array(self.R, dtype=float).reshape(3, 3)
        y.flags.writeable = False
        R.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "R", R)

    @classmethod
    def identity(cls) -> "TransformPair":
        return cls(np.zeros(3), np.eye(3))

    @classmethod
    def translation(cls, y) -> "TransformPair":
        return cls(y, np.eye(3))

    @property
    def is_identity(self) -> bool:
        return not self.y.any() and np.array_equal(self.R, np.eye(3))

    @property
    def has_rotation(self) -> bool:
        return not np.array_equal(self.R, np.eye(3))

    def apply(self, p) -> np.ndarray:
        return apply(self, p)

    def rotate(self, v) -> np.ndarray:
        """Rotate direction-like quantities (velocities); translation ignored."""
        v = np.asarray(v, dtype=float)
        if not self.has_rotation:
            return v.copy()
        return v @ self.R.T

    def inverse(self) -> "TransformPair":
        Rt = self.R.T
        return TransformPair(-(Rt @ self.y), Rt)

    def close_to(self, other: "TransformPair", tol: float) -> bool:
        return (
            np.max(np.abs(self.y - other.y)) <= tol
            and np.max(np.abs(self.R - other.R)) <= 1e-9
        )

    def __repr__(self):
        if self.has_rotation:
            return f"TransformPair(y={self.y.tolist()}, R={self.R.tolist()})"
        return f"TransformPair(y={self.y.tolist()})"


def apply(t: TransformPair, p) -> np.ndarray:
    """Apply ``t`` to one point (shape (3,)) or many (shape (n, 3))."""
    p = np.asarray(p, dtype=float)
    if t.has_rotation:
        return p @ t.R.T + t.y
    return p + t.y


def compose(outer: TransformPair, inner: TransformPair) -> TransformPair:
    """Single transform equal to applying ``inner`` then ``outer``."""
    return TransformPair(outer.y + outer.R @ inner.y, outer.R @ inner.R)


def boundary_transform(centre_alpha, normal_alpha, centre_beta, normal_beta) -> TransformPair:
    """Transform referring points across face ``alpha`` to beyond face ``beta``.

    Both normals are outward from their own side of the coupling.  The
    result maps the centre of ``alpha`` onto the centre of ``beta``.
    """
    R = rotation_between(normal_alpha, normal_beta)
    Ca = np.asarray(centre_alpha, dtype=float)
    Cb = np.asarray(centre_beta, dtype=float)
    if np.array_equal(R, np.eye(3)):
        return TransformPair(Cb - Ca, R)
    return TransformPair(Cb - R @ Ca, R)


def same_referral(a, b, tol: float) -> bool:
    """Duplicate test for referred cells.

    ``a`` and ``b`` are ``(source_rank, source_cell, TransformPair)``.  Only
    the translation part is compared; a real cell has zero translation.
    """
    ra, ca, ta = a
    rb, cb, tb = b
    if ra != rb or ca != cb:
        return False
    return float(np.linalg.norm(ta.y - tb.y)) < tol
