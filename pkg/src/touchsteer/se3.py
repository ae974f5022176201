"""Rigid transforms and the relative-pose conversion used for action chunks.

A trajectory re-expressed relative to a reference step is invariant to any
global rigid motion of the whole recording; that invariance is what makes
relative chunks a usable action representation across demonstrations.
"""

import numpy as np

_REORTHO_EVERY = 64


class Se3Pose:
    """Rotation matrix + translation (meters)."""

    __slots__ = ("rot", "trans", "_depth")

    def __init__(self, rot=None, trans=None, validate=True, _depth=0):
        self.rot = np.eye(3) if rot is None else np.array(rot, dtype=np.float64)
        self.trans = np.zeros(3) if trans is None else np.array(trans, dtype=np.float64)
        self._depth = _depth
        if self.rot.shape != (3, 3) or self.trans.shape != (3,):
            raise ValueError(f"pose needs (3,3) rotation and (3,) translation, got {self.rot.shape}, {self.trans.shape}")
        if validate:
            err = np.abs(self.rot.T @ self.rot - np.eye(3)).max()
            if err > 1e-6:
                raise ValueError(f"rotation not orthonormal (|R^T R - I| = {err:.3e})")
            if np.linalg.det(self.rot) < 0:
                raise ValueError("rotation has negative determinant")

    def orthonormality_error(self):
        return float(np.abs(self.rot.T @ self.rot - np.eye(3)).max())

    def as_matrix(self):
        m = np.eye(4)
        m[:3, :3] = self.rot
        m[:3, 3] = self.trans
        return m

    @classmethod
    def from_matrix(cls, m, validate=True):
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3], validate=validate)

    @classmethod
    def from_planar(cls, x, y, theta):
        """Planar pose embedded in SE(3): rotation about z, translation (x, y, 0)."""
        c, s = np.cos(theta), np.sin(theta)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.array([x, y, 0.0]), validate=False)

    def to_planar(self):
        return float(self.trans[0]), float(self.trans[1]), float(np.arctan2(self.rot[1, 0], self.rot[0, 0]))

    def __repr__(self):
        return f"Se3Pose(t={np.round(self.trans, 4).tolist()})"


def _polar_project(rot):
    u, _, vt = np.linalg.svd(rot)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] = -u[:, -1]
        r = u @ vt
    return r


def compose(a, b):
    """a then b: the transform mapping b-frame coordinates through a."""
    rot = a.rot @ b.rot
    trans = a.rot @ b.trans + a.trans
    depth = max(a._depth, b._depth) + 1
    if depth >= _REORTHO_EVERY:
        rot = _polar_project(rot)
        depth = 0
    return Se3Pose(rot, trans, validate=False, _depth=depth)


def invert(a):
    rt = a.rot.T.copy()
    return Se3Pose(rt, -(rt @ a.trans), validate=False, _depth=a._depth)


def to_base_frame(tracker_seq, t_wb, t_te):
    """Express tracked poses in the robot base frame: inv(T_WB) T_WT T_TE."""
    if not tracker_seq:
        raise ValueError("to_base_frame: empty sequence")
    wb_inv = invert(t_wb)
    return [compose(compose(wb_inv, t_wt), t_te) for t_wt in tracker_seq]


def relative_pose(sequence, ref):
    """Re-express a pose sequence relative to sequence[ref].

    p_rel = R_ref^T (p - p_ref), R_rel = R_ref^T R; the reference element
    maps to (0, I).
    """
    if not sequence:
        raise ValueError("relative_pose: empty sequence")
    if not -len(sequence) <= ref < len(sequence):
        raise ValueError(f"relative_pose: ref {ref} outside sequence of length {len(sequence)}")
    anchor = sequence[ref]
    rt = anchor.rot.T
    return [
        Se3Pose(rt @ p.rot, rt @ (p.trans - anchor.trans), validate=False)
        for p in sequence
    ]


def pose_to_vec(pose):
    """12-vector encoding: 9 rotation entries (row-major) then translation."""
    return np.concatenate([pose.rot.ravel(), pose.trans])


def vec_to_pose(vec, validate=False):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (12,):
        raise ValueError(f"pose vector must have 12 entries, got {vec.shape}")
    return Se3Pose(vec[:9].reshape(3, 3), vec[9:], validate=validate)


def random_pose(rng, trans_scale=1.0):
    """Uniformly random rotation (QR of a Gaussian) with Gaussian translation."""
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, [0, 1]] = q[:, [1, 0]]
    return Se3Pose(q, rng.normal(scale=trans_scale, size=3), validate=False)
