"""Unit quaternions, stored (w, x, y, z), plus rigid 4x4 helpers."""

import numpy as np


def normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def multiply(a, b):
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def to_matrix(q):
    w, x, y, z = np.moveaxis(normalize(q), -1, 0)
    m = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return m.reshape(m.shape[:-1] + (3, 3))


def from_axis_angle(v):
    v = np.asarray(v, dtype=np.float64)
    theta = np.linalg.norm(v, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 1e-12, theta, 1.0), 0.5 - theta**2 / 48)
    return np.concatenate([np.cos(half), k * v], axis=-1)


def geodesic_angle(a, b):
    """Rotation angle in [0, pi] between unit quaternions (sign-invariant)."""
    d = np.abs(np.sum(normalize(a) * normalize(b), axis=-1))
    return 2 * np.arccos(np.clip(d, 0.0, 1.0))


def rotate(q, v):
    return np.einsum("...ij,...j->...i", to_matrix(q), v)


def rigid(rotation_q, translation):
    """4x4 transform(s) from quaternion(s) and translation(s)."""
    r = to_matrix(rotation_q)
    t = np.asarray(translation, dtype=np.float64)
    out = np.zeros(r.shape[:-2] + (4, 4))
    out[..., :3, :3] = r
    out[..., :3, 3] = t
    out[..., 3, 3] = 1.0
    return out


def invert_rigid(m):
    m = np.asarray(m, dtype=np.float64)
    r = np.swapaxes(m[..., :3, :3], -1, -2)
    out = np.zeros_like(m)
    out[..., :3, :3] = r
    out[..., :3, 3] = -np.einsum("...ij,...j->...i", r, m[..., :3, 3])
    out[..., 3, 3] = 1.0
    return out
