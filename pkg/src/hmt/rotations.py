"""Conversions among axis-angle, rotation-matrix, and 6D rotation forms.

All matrices act on column vectors (p' = R @ p). Axis-angle vectors encode
the axis as direction and the angle as magnitude, canonicalized to [0, pi];
the zero vector is the identity. The 6D form is the first two *columns* of a
rotation matrix, concatenated column-major, so the identity is
(1, 0, 0, 0, 1, 0).

Every function broadcasts over leading batch dimensions.
"""

import numpy as np

from .errors import DegenerateRot6DError, InvalidInputError, InvalidRotationError

_EPS = 1e-12


def _check_finite(a, what):
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"non-finite {what}")


def canonicalize_axis_angle(v):
    """Map an axis-angle vector to the canonical range: angle in [0, pi].

    Angles are wrapped modulo 2*pi and the axis sign is flipped when the
    wrapped angle exceeds pi. Angle pi keeps the axis as given.
    """
    v = np.asarray(v, dtype=np.float64)
    _check_finite(v, "axis-angle")
    angle = np.linalg.norm(v, axis=-1, keepdims=True)
    wrapped = np.mod(angle, 2.0 * np.pi)
    over = wrapped > np.pi
    target = np.where(over, wrapped - 2.0 * np.pi, wrapped)  # in (-pi, pi]
    scale = np.where(angle > _EPS, target / np.maximum(angle, _EPS), 0.0)
    out = v * scale
    # A negative target angle means axis flip with positive magnitude.
    return out


def axis_angle_to_matrix(v):
    """Rodrigues rotation: axis-angle (..., 3) -> matrices (..., 3, 3).

    The zero vector maps to the identity. Raises on non-finite input.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != 3:
        raise InvalidInputError(f"axis-angle must have 3 components, got {v.shape[-1]}")
    _check_finite(v, "axis-angle")
    theta = np.linalg.norm(v, axis=-1)
    safe = np.maximum(theta, _EPS)
    k = v / safe[..., None]
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    zero = np.zeros_like(kx)
    K = np.stack(
        [
            np.stack([zero, -kz, ky], axis=-1),
            np.stack([kz, zero, -kx], axis=-1),
            np.stack([-ky, kx, zero], axis=-1),
        ],
        axis=-2,
    )
    s = np.sin(theta)[..., None, None]
    c1 = (1.0 - np.cos(theta))[..., None, None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    m = eye + s * K + c1 * (K @ K)
    # Tiny angles: sin/1-cos factors vanish, leaving the identity exactly.
    small = (theta <= _EPS)[..., None, None]
    return np.where(small, eye, m)


def _validate_matrix(m, tol=1e-6):
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise InvalidRotationError(f"expected (..., 3, 3) matrix, got {m.shape}")
    _check_finite(m, "rotation matrix")
    ortho = np.abs(np.swapaxes(m, -1, -2) @ m - np.eye(3)).max()
    det = np.linalg.det(m)
    if ortho > tol or np.abs(det - 1.0).max() > tol:
        raise InvalidRotationError(
            f"matrix not a rotation: orthonormality residual {ortho:.3e}, det range "
            f"[{det.min():.6f}, {det.max():.6f}]"
        )
    return m


def matrix_to_axis_angle(m, tol=1e-6):
    """Rotation matrices (..., 3, 3) -> canonical axis-angle (..., 3).

    The returned angle lies in [0, pi]. Near pi the axis is recovered from
    the dominant diagonal element of (R + I)/2 to avoid cancellation in the
    skew part. Raises for matrices that are not orthonormal within `tol`.
    """
    m = _validate_matrix(m, tol)
    trace = np.trace(m, axis1=-2, axis2=-1)
    cos = np.clip((trace - 1.0) * 0.5, -1.0, 1.0)
    skew = np.stack(
        [
            m[..., 2, 1] - m[..., 1, 2],
            m[..., 0, 2] - m[..., 2, 0],
            m[..., 1, 0] - m[..., 0, 1],
        ],
        axis=-1,
    )
    sin = np.linalg.norm(skew, axis=-1) * 0.5
    # atan2 stays well-conditioned at both ends of [0, pi].
    angle = np.arctan2(sin, cos)

    generic_axis = skew / np.maximum(2.0 * sin, _EPS)[..., None]

    # Near pi the skew part vanishes; recover the axis from the symmetric
    # part instead: (R + R^T + 2I)/4 -> axis axis^T, read off its major row.
    outer = (m + np.swapaxes(m, -1, -2) + 2.0 * np.eye(3)) * 0.25
    diag = np.stack([outer[..., 0, 0], outer[..., 1, 1], outer[..., 2, 2]], axis=-1)
    big = np.argmax(diag, axis=-1)
    major = np.sqrt(np.clip(np.take_along_axis(diag, big[..., None], axis=-1), 0.0, None))[..., 0]
    major_row = np.take_along_axis(
        outer, big[..., None, None].repeat(3, axis=-1), axis=-2
    )[..., 0, :]
    pi_axis = major_row / np.maximum(major[..., None], _EPS)
    # Pick the sign consistent with the (tiny but signed) skew part.
    sign_ref = np.sum(pi_axis * skew, axis=-1)
    pi_axis = pi_axis * np.where(sign_ref < 0.0, -1.0, 1.0)[..., None]
    pi_axis = pi_axis / np.maximum(np.linalg.norm(pi_axis, axis=-1, keepdims=True), _EPS)

    near_pi = (np.pi - angle) < 1e-5
    axis = np.where(near_pi[..., None], pi_axis, generic_axis)
    small = angle < _EPS
    out = axis * angle[..., None]
    return np.where(small[..., None], 0.0, out)


def matrix_to_rot6d(m):
    """Rotation matrices (..., 3, 3) -> 6D form (..., 6).

    Output is concat(column 0, column 1).
    """
    m = np.asarray(m, dtype=np.float64)
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot6d_to_matrix(r):
    """6D rotations (..., 6) -> matrices (..., 3, 3) via Gram-Schmidt.

    c0 = normalize(r[0:3]); c1 = normalize(r[3:6] - (c0.r[3:6]) c0);
    c2 = c0 x c1. Raises DegenerateRot6DError when the first vector is
    near zero or the two vectors are near parallel.
    """
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise InvalidInputError(f"6D rotation must have 6 components, got {r.shape[-1]}")
    _check_finite(r, "6D rotation")
    a = r[..., 0:3]
    b = r[..., 3:6]
    na = np.linalg.norm(a, axis=-1)
    if np.any(na <= 1e-8):
        raise DegenerateRot6DError("first 6D column has near-zero norm")
    c0 = a / na[..., None]
    proj = np.sum(c0 * b, axis=-1, keepdims=True)
    b_orth = b - proj * c0
    nb = np.linalg.norm(b_orth, axis=-1)
    if np.any(nb <= 1e-8):
        raise DegenerateRot6DError("6D columns are near parallel")
    c1 = b_orth / nb[..., None]
    c2 = np.cross(c0, c1)
    return np.stack([c0, c1, c2], axis=-1)


def slerp(m0, m1, t):
    """Geodesic interpolation between two rotation matrices.

    R(t) = m0 @ exp(t * log(m0^T m1)); t=0 gives m0, t=1 gives m1.
    Internal helper for gap filling in sequence cleaning.
    """
    m0 = np.asarray(m0, dtype=np.float64)
    m1 = np.asarray(m1, dtype=np.float64)
    rel = matrix_to_axis_angle(np.swapaxes(m0, -1, -2) @ m1)
    return m0 @ axis_angle_to_matrix(rel * t)


def axis_angle_distance(a, b):
    """Geodesic angle (radians) between two axis-angle rotations."""
    ra = axis_angle_to_matrix(a)
    rb = axis_angle_to_matrix(b)
    rel = np.swapaxes(ra, -1, -2) @ rb
    trace = np.trace(rel, axis1=-2, axis2=-1)
    return np.arccos(np.clip((trace - 1.0) * 0.5, -1.0, 1.0))
