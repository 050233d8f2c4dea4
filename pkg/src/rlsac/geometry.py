"""Minimal solvers, residuals, refinement and pose extraction for both tasks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateSampleError(ValueError):
    """A (minimal) sample does not determine a unique model."""


class PoseRecoveryError(ValueError):
    pass


SAMPSON_SENTINEL = 1e12


@dataclass(frozen=True)
class Line2D:
    """``a*x + b*y + c = 0`` with unit normal; ``b > 0`` or ``b == 0 and a > 0``."""

    a: float
    b: float
    c: float

    @classmethod
    def from_normal(cls, a: float, b: float, c: float) -> "Line2D":
        s = np.hypot(a, b)
        if s == 0:
            raise DegenerateSampleError("zero normal")
        a, b, c = a / s, b / s, c / s
        if b < 0 or (b == 0 and a < 0):
            a, b, c = -a, -b, -c
        return cls(float(a), float(b), float(c))

    @property
    def normal(self) -> np.ndarray:
        return np.array([self.a, self.b])


@dataclass(frozen=True)
class RelativePose:
    """Maps camera-1 coordinates to camera 2: ``X2 = R @ X1 + t``."""

    rotation: np.ndarray
    translation_dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation_dir", np.asarray(self.translation_dir, dtype=np.float64))


# -- lines --------------------------------------------------------------------------

def fit_line_2pts(p1, p2) -> Line2D:
    p1 = np.asarray(p1, dtype=np.float64)
    p2 = np.asarray(p2, dtype=np.float64)
    d = p2 - p1
    length = np.hypot(d[0], d[1])
    if length <= 1e-12:
        raise DegenerateSampleError("coincident points")
    a, b = -d[1] / length, d[0] / length
    return Line2D.from_normal(a, b, -(a * p1[0] + b * p1[1]))


def line_point_residual(line: Line2D, p) -> np.ndarray | float:
    """Perpendicular distance; ``p`` may be a single point or an ``(N, 2)`` array."""
    p = np.asarray(p, dtype=np.float64)
    return np.abs(line.a * p[..., 0] + line.b * p[..., 1] + line.c)


def refine_line_tls(points) -> Line2D:
    """Total-least-squares line through the centroid."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or len(pts) < 2 or np.ptp(pts, axis=0).max() <= 1e-12:
        raise DegenerateSampleError("need at least two distinct points")
    centroid = pts.mean(axis=0)
    q = pts - centroid
    _, vecs = np.linalg.eigh(q.T @ q)
    n = vecs[:, 0]
    return Line2D.from_normal(n[0], n[1], -(n @ centroid))


def line_angular_error(est: Line2D, gt: Line2D) -> float:
    cos = np.clip(abs(est.a * gt.a + est.b * gt.b), 0.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


# -- epipolar geometry ----------------------------------------------------------------

def hartley_normalization(pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Similarity taking ``pts`` to centroid 0 and RMS distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    rms = np.sqrt(((pts - centroid) ** 2).sum(axis=1).mean())
    if rms <= 1e-12:
        raise DegenerateSampleError("all points coincide")
    s = np.sqrt(2.0) / rms
    T = np.array([[s, 0.0, -s * centroid[0]],
                  [0.0, s, -s * centroid[1]],
                  [0.0, 0.0, 1.0]])
    homog = np.column_stack([pts, np.ones(len(pts))]) @ T.T
    return homog, T


def canonical_fundamental(f: np.ndarray) -> np.ndarray:
    f = f / np.linalg.norm(f)
    flat = f.reshape(-1)
    if flat[np.argmax(np.abs(flat))] < 0:
        f = -f
    return f


def fit_fundamental_8pt(correspondences) -> np.ndarray:
    """Normalised 8-point algorithm on ``(n >= 8, 4)`` rows of ``x1, y1, x2, y2``.

    Returns a rank-2, unit-Frobenius 3x3 matrix with ``x2^T F x1 = 0``.
    """
    c = np.asarray(correspondences, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 4 or len(c) < 8:
        raise DegenerateSampleError(f"need (>=8, 4) correspondences, got {c.shape}")
    h1, T1 = hartley_normalization(c[:, :2])
    h2, T2 = hartley_normalization(c[:, 2:])
    u1, v1 = h1[:, 0], h1[:, 1]
    u2, v2 = h2[:, 0], h2[:, 1]
    A = np.column_stack([u2 * u1, u2 * v1, u2, v2 * u1, v2 * v1, v2, u1, v1, np.ones(len(c))])
    _, s, vt = np.linalg.svd(A)
    if s[7] <= 1e-10 * s[0]:
        raise DegenerateSampleError("design matrix is rank deficient")
    f = vt[-1].reshape(3, 3)
    u, sf, vtf = np.linalg.svd(f)
    sf[2] = 0.0
    f = T2.T @ (u @ np.diag(sf) @ vtf) @ T1
    return canonical_fundamental(f)


def sampson_residual(f, x1, x2) -> np.ndarray | float:
    """Square root of the Sampson error, in pixels.

    ``x1``/``x2`` are ``(2,)`` points or ``(N, 2)`` arrays.
    """
    f = np.asarray(f, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    h1 = np.concatenate([x1, np.ones(x1.shape[:-1] + (1,))], axis=-1)
    h2 = np.concatenate([x2, np.ones(x2.shape[:-1] + (1,))], axis=-1)
    fx1 = h1 @ f.T
    ftx2 = h2 @ f
    # x2^T F x1 summed from sorted terms, so swapping the views (F -> F^T) is bit-exact
    terms = (f * (h2[..., :, None] * h1[..., None, :])).reshape(h1.shape[:-1] + (9,))
    num = np.sort(terms, axis=-1).sum(axis=-1) ** 2
    den = (fx1[..., 0] ** 2 + fx1[..., 1] ** 2) + (ftx2[..., 0] ** 2 + ftx2[..., 1] ** 2)
    safe = den >= 1e-20
    out = np.where(safe, np.sqrt(num / np.where(safe, den, 1.0)), SAMPSON_SENTINEL)
    return float(out) if out.ndim == 0 else out


def skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def fundamental_from_pose(rotation, translation, k1, k2) -> np.ndarray:
    e = skew(translation) @ rotation
    return canonical_fundamental(np.linalg.inv(k2).T @ e @ np.linalg.inv(k1))


def _midpoint_depths(rotation, t, n1, n2) -> tuple[np.ndarray, np.ndarray]:
    """Depths of midpoint-triangulated points in both cameras."""
    c2 = -rotation.T @ t
    d1 = n1
    d2 = n2 @ rotation  # rows: R^T n2
    a = np.einsum("ij,ij->i", d1, d1)
    b = np.einsum("ij,ij->i", d1, d2)
    c = np.einsum("ij,ij->i", d2, d2)
    w1 = d1 @ c2
    w2 = d2 @ c2
    den = a * c - b * b
    ok = np.abs(den) > 1e-15
    den = np.where(ok, den, 1.0)
    lam1 = (c * w1 - b * w2) / den
    lam2 = (b * w1 - a * w2) / den
    p = 0.5 * (lam1[:, None] * d1 + (c2 + lam2[:, None] * d2))
    z1 = np.where(ok, p[:, 2], -1.0)
    z2 = np.where(ok, (p @ rotation.T + t)[:, 2], -1.0)
    return z1, z2


def pose_from_fundamental(f, k1, k2, inlier_correspondences) -> RelativePose:
    """Decompose ``E = K2^T F K1`` and pick the candidate passing cheirality most often."""
    corr = np.asarray(inlier_correspondences, dtype=np.float64).reshape(-1, 4)
    if len(corr) < 1:
        raise PoseRecoveryError("need at least one correspondence")
    e = np.asarray(k2).T @ np.asarray(f) @ np.asarray(k1)
    u, _, vt = np.linalg.svd(e)
    if np.linalg.det(u) < 0:
        u = -u
    if np.linalg.det(vt) < 0:
        vt = -vt
    w = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    r1 = u @ w @ vt
    r2 = u @ w.T @ vt
    t = u[:, 2]
    n1 = np.column_stack([corr[:, :2], np.ones(len(corr))]) @ np.linalg.inv(k1).T
    n2 = np.column_stack([corr[:, 2:], np.ones(len(corr))]) @ np.linalg.inv(k2).T
    best, best_count = None, 0
    for rot, tr in ((r1, t), (r1, -t), (r2, t), (r2, -t)):
        z1, z2 = _midpoint_depths(rot, tr, n1, n2)
        count = int(np.count_nonzero((z1 > 0) & (z2 > 0)))
        if count > best_count:
            best, best_count = (rot, tr), count
    if best is None:
        raise PoseRecoveryError("no decomposition puts any point in front of both cameras")
    return RelativePose(best[0], best[1])


def rotation_angle_deg(r) -> float:
    return float(np.degrees(np.arccos(np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0))))


def pose_errors(est: RelativePose, gt: RelativePose) -> tuple[float, float]:
    """(rotation error, translation direction error) in degrees; t is sign-free."""
    rot = rotation_angle_deg(gt.rotation.T @ est.rotation)
    cos_t = np.clip(abs(float(gt.translation_dir @ est.translation_dir)), 0.0, 1.0)
    return rot, float(np.degrees(np.arccos(cos_t)))


def rotation_about_axis(axis, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = skew(axis)
    return np.eye(3) + np.sin(angle_rad) * k + (1.0 - np.cos(angle_rad)) * (k @ k)
