"""Hand pose container, feature encodings, forward kinematics, and fitting.

A pose is 15 per-joint rotations (axis-angle), a global wrist rotation, a
wrist translation in camera frame (meters), and 10 shape coefficients. The
kinematic model is a rigid 21-joint tree with linear shape correctives on
the bone offsets; joint order is wrist, then thumb/index/middle/ring/pinky
as (base, mid, distal, tip). theta[k] articulates the k-th non-tip joint in
that order; tips carry no local rotation.

Five per-frame feature encodings are supported, all laid out as
[wrist_rotation | translation | joint_rotations | (shape) | (joints)]:

    51  = 15*3 + 3 + 3           axis-angle rotations
    99  = 15*6 + 6 + 3           6D rotations
    109 = 99 + 10                6D + shape coefficients
    114 = 51 + 63                axis-angle + 21 joint positions
    162 = 99 + 63                6D + 21 joint positions

Joint positions are auxiliary reconstruction targets only; decoding ignores
them and recovers the pose from the parameter columns.
"""

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import DecodeError, EncodeError, FitDivergedError, InvalidInputError
from .rotations import (
    axis_angle_to_matrix,
    canonicalize_axis_angle,
    matrix_to_axis_angle,
    matrix_to_rot6d,
    rot6d_to_matrix,
)

N_JOINTS = 21
N_ARTICULATED = 15
# Non-tip joints in tree order; theta[i] drives ARTICULATED[i].
ARTICULATED = (1, 2, 3, 5, 6, 7, 9, 10, 11, 13, 14, 15, 17, 18, 19)
TIPS = (4, 8, 12, 16, 20)

IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


@dataclass(frozen=True)
class HandSkeleton:
    """Rigid kinematic tree: parent table, bone offsets, shape correctives."""

    parent: np.ndarray      # (21,) int, -1 marks the wrist root
    offsets: np.ndarray     # (20, 3) offset of joint j+1 in its parent frame, meters
    shape_dirs: np.ndarray  # (21, 3, 10) linear correctives added to the offsets

    def __post_init__(self):
        parent = np.asarray(self.parent, dtype=np.int64)
        offsets = np.asarray(self.offsets, dtype=np.float64)
        shape_dirs = np.asarray(self.shape_dirs, dtype=np.float64)
        if parent.shape != (N_JOINTS,) or parent[0] != -1:
            raise InvalidInputError("skeleton parent table must have 21 entries with root at 0")
        if offsets.shape != (N_JOINTS - 1, 3) or shape_dirs.shape != (N_JOINTS, 3, 10):
            raise InvalidInputError("skeleton offsets must be (20,3) and shape_dirs (21,3,10)")
        # Connected and acyclic: every joint reaches the root through parents.
        for j in range(1, N_JOINTS):
            seen, cur = set(), j
            while cur != -1:
                if cur in seen:
                    raise InvalidInputError(f"skeleton parent table has a cycle at joint {j}")
                seen.add(cur)
                cur = int(parent[cur])
        object.__setattr__(self, "parent", parent)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "shape_dirs", shape_dirs)
        self.parent.setflags(write=False)
        self.offsets.setflags(write=False)
        self.shape_dirs.setflags(write=False)

    @staticmethod
    def load(path) -> "HandSkeleton":
        with open(path) as f:
            doc = json.load(f)
        return HandSkeleton(
            parent=np.array(doc["parent"]),
            offsets=np.array(doc["offsets"]),
            shape_dirs=np.array(doc["shape_dirs"]),
        )


@lru_cache(maxsize=1)
def default_skeleton() -> HandSkeleton:
    """The skeleton shipped with the package."""
    ref = resources.files("hmt").joinpath("assets/skeleton_default.json")
    with resources.as_file(ref) as path:
        return HandSkeleton.load(path)


@dataclass
class HandPose:
    """One frame of MANO-style hand parameters."""

    theta: np.ndarray          # (15, 3) axis-angle per articulated joint
    rrot: np.ndarray           # (3,) global wrist rotation, axis-angle
    tau: np.ndarray            # (3,) wrist translation, meters, camera frame
    beta: np.ndarray = field(default_factory=lambda: np.zeros(10))
    side: str = "right"

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float64).reshape(N_ARTICULATED, 3)
        self.rrot = np.asarray(self.rrot, dtype=np.float64).reshape(3)
        self.tau = np.asarray(self.tau, dtype=np.float64).reshape(3)
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(10)

    @staticmethod
    def rest(side="right") -> "HandPose":
        return HandPose(np.zeros((N_ARTICULATED, 3)), np.zeros(3), np.zeros(3), np.zeros(10), side)

    def validate(self):
        for name, arr in (("theta", self.theta), ("rrot", self.rrot),
                          ("tau", self.tau), ("beta", self.beta)):
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"non-finite {name} in hand pose")
        if np.abs(self.beta).max(initial=0.0) > 5.0 + 1e-9:
            raise InvalidInputError("shape coefficients exceed |beta| <= 5")
        if np.linalg.norm(self.theta, axis=-1).max() > np.pi + 1e-9:
            raise InvalidInputError("joint angles exceed pi; canonicalize first")
        if self.side not in ("left", "right"):
            raise InvalidInputError(f"unknown hand side {self.side!r}")

    def canonical(self) -> "HandPose":
        return replace(
            self,
            theta=canonicalize_axis_angle(self.theta),
            rrot=canonicalize_axis_angle(self.rrot),
        )


class FeatureVariant(Enum):
    D51 = 51
    D99 = 99
    D109 = 109
    D114 = 114
    D162 = 162

    @property
    def dim(self) -> int:
        return self.value

    @property
    def uses_rot6d(self) -> bool:
        return self in (FeatureVariant.D99, FeatureVariant.D109, FeatureVariant.D162)

    @property
    def has_beta(self) -> bool:
        return self is FeatureVariant.D109

    @property
    def has_joints(self) -> bool:
        return self in (FeatureVariant.D114, FeatureVariant.D162)

    @property
    def rot_width(self) -> int:
        return 6 if self.uses_rot6d else 3

    def layout(self):
        """Column offsets: (rrot, tau, theta, beta, joints) start indices."""
        w = self.rot_width
        rrot = 0
        tau = w
        theta = w + 3
        cursor = theta + N_ARTICULATED * w
        beta = cursor if self.has_beta else None
        if self.has_beta:
            cursor += 10
        joints = cursor if self.has_joints else None
        if self.has_joints:
            cursor += N_JOINTS * 3
        assert cursor == self.dim
        return rrot, tau, theta, beta, joints

    def wrist_columns(self) -> np.ndarray:
        """Columns carrying global pose: wrist rotation, translation, wrist joint."""
        rrot, tau, _, _, joints = self.layout()
        cols = list(range(rrot, rrot + self.rot_width)) + [tau, tau + 1, tau + 2]
        if joints is not None:
            cols += [joints, joints + 1, joints + 2]
        return np.array(cols)

    def finger_columns(self) -> np.ndarray:
        """All remaining columns: articulation, shape, non-wrist joints."""
        wrist = set(self.wrist_columns().tolist())
        return np.array([c for c in range(self.dim) if c not in wrist])


@dataclass
class FeatureSequence:
    """T x D feature matrix for one hand over a window."""

    data: np.ndarray
    variant: FeatureVariant
    fps: float
    beta_ref: np.ndarray
    side: str = "right"

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.beta_ref = np.asarray(self.beta_ref, dtype=np.float64).reshape(10)
        if self.data.ndim != 2 or self.data.shape[1] != self.variant.dim:
            raise EncodeError(
                f"feature matrix width {self.data.shape} does not match {self.variant.name}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidInputError("non-finite feature matrix")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def _effective_offsets(skel: HandSkeleton, beta: np.ndarray) -> np.ndarray:
    """(20, 3) bone offsets after shape correctives for joints 1..20."""
    return skel.offsets + skel.shape_dirs[1:] @ beta


def forward_kinematics(pose: HandPose, skel: HandSkeleton) -> np.ndarray:
    """Joint positions (21, 3) in camera frame, meters.

    Joint 0 sits at the translation; each child adds its (shape-corrected)
    offset rotated by the parent's accumulated global rotation. The
    translation is applied once, after the tree walk, so shifting tau by a
    delta shifts every joint by exactly that delta.
    """
    pose.validate()
    offs = _effective_offsets(skel, pose.beta)
    glob_r = np.empty((N_JOINTS, 3, 3))
    joints = np.zeros((N_JOINTS, 3))
    glob_r[0] = axis_angle_to_matrix(pose.rrot)
    theta_of = {j: i for i, j in enumerate(ARTICULATED)}
    for j in range(1, N_JOINTS):
        p = int(skel.parent[j])
        joints[j] = joints[p] + glob_r[p] @ offs[j - 1]
        if j in theta_of:
            glob_r[j] = glob_r[p] @ axis_angle_to_matrix(pose.theta[theta_of[j]])
        else:
            glob_r[j] = glob_r[p]
    return joints + pose.tau


def _fk_batch(thetas, rrots, taus, betas, skel: HandSkeleton) -> np.ndarray:
    """Vectorized FK over T frames: returns (T, 21, 3)."""
    T = thetas.shape[0]
    offs = skel.offsets[None] + np.einsum("jck,tk->tjc", skel.shape_dirs[1:], betas)
    glob_r = np.empty((T, N_JOINTS, 3, 3))
    joints = np.zeros((T, N_JOINTS, 3))
    glob_r[:, 0] = axis_angle_to_matrix(rrots)
    local = axis_angle_to_matrix(thetas)  # (T, 15, 3, 3)
    theta_of = {j: i for i, j in enumerate(ARTICULATED)}
    for j in range(1, N_JOINTS):
        p = int(skel.parent[j])
        joints[:, j] = joints[:, p] + np.einsum("tab,tb->ta", glob_r[:, p], offs[:, j - 1])
        if j in theta_of:
            glob_r[:, j] = glob_r[:, p] @ local[:, theta_of[j]]
        else:
            glob_r[:, j] = glob_r[:, p]
    return joints + taus[:, None, :]


def _rotation_jacobian(v: np.ndarray) -> np.ndarray:
    """d(Rodrigues)/dv: (3, 3, 3) with [i] = dR/dv_i.

    Closed form via the rotation's action on basis vectors; at the origin
    the derivative is the skew generator of each axis.
    """
    theta2 = float(v @ v)
    gens = np.zeros((3, 3, 3))
    gens[0] = [[0, 0, 0], [0, 0, -1], [0, 1, 0]]
    gens[1] = [[0, 0, 1], [0, 0, 0], [-1, 0, 0]]
    gens[2] = [[0, -1, 0], [1, 0, 0], [0, 0, 0]]
    if theta2 < 1e-14:
        return gens
    R = axis_angle_to_matrix(v)
    out = np.empty((3, 3, 3))
    eye = np.eye(3)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    for i in range(3):
        w = v[i] * vx + _skew(np.cross(v, (eye - R)[:, i]))
        out[i] = (w / theta2) @ R
    return out


def _skew(u):
    return np.array([[0, -u[2], u[1]], [u[2], 0, -u[0]], [-u[1], u[0], 0]])


def fk_with_jacobian(pose: HandPose, skel: HandSkeleton):
    """FK plus the joint-position jacobian w.r.t. the 51 pose parameters.

    Parameter layout: [rrot(3), tau(3), theta(45 row-major)]. Returns
    (joints (21,3), jac (21,3,51)). Shape coefficients are held fixed.
    """
    offs = _effective_offsets(skel, pose.beta)
    glob_r = np.empty((N_JOINTS, 3, 3))
    joints = np.empty((N_JOINTS, 3))
    d_r = np.zeros((N_JOINTS, 51, 3, 3))
    jac = np.zeros((N_JOINTS, 3, 51))

    glob_r[0] = axis_angle_to_matrix(pose.rrot)
    joints[0] = pose.tau
    d_rrot = _rotation_jacobian(pose.rrot)
    for i in range(3):
        d_r[0, i] = d_rrot[i]
        jac[0, i, 3 + i] = 1.0  # d p0_i / d tau_i

    theta_of = {j: i for i, j in enumerate(ARTICULATED)}
    local = {j: axis_angle_to_matrix(pose.theta[i]) for j, i in theta_of.items()}
    d_local = {j: _rotation_jacobian(pose.theta[i]) for j, i in theta_of.items()}

    for j in range(1, N_JOINTS):
        p = int(skel.parent[j])
        o = offs[j - 1]
        joints[j] = joints[p] + glob_r[p] @ o
        jac[j] = jac[p] + np.einsum("qab,b->aq", d_r[p], o)
        if j in theta_of:
            k = theta_of[j]
            d_r[j] = d_r[p] @ local[j]
            base = 6 + 3 * k
            for i in range(3):
                d_r[j, base + i] += glob_r[p] @ d_local[j][i]
            glob_r[j] = glob_r[p] @ local[j]
        else:
            d_r[j] = d_r[p]
            glob_r[j] = glob_r[p]
    return joints, jac


def encode_feature(poses, variant: FeatureVariant, skel: HandSkeleton = None) -> FeatureSequence:
    """Encode a pose sequence into the requested feature layout.

    The shape reference is frozen to frame 0. Joint-position columns are
    produced by forward kinematics when the variant carries them.
    """
    if not poses:
        raise EncodeError("empty pose sequence")
    sides = {p.side for p in poses}
    if len(sides) != 1:
        raise EncodeError(f"mixed hand sides in one sequence: {sorted(sides)}")
    if variant.has_joints and skel is None:
        raise EncodeError(f"{variant.name} needs a skeleton for joint columns")
    for p in poses:
        p.validate()

    T = len(poses)
    thetas = np.stack([p.theta for p in poses])
    rrots = np.stack([p.rrot for p in poses])
    taus = np.stack([p.tau for p in poses])
    betas = np.stack([p.beta for p in poses])

    out = np.zeros((T, variant.dim))
    rrot_c, tau_c, theta_c, beta_c, joint_c = variant.layout()
    w = variant.rot_width
    if variant.uses_rot6d:
        out[:, rrot_c:rrot_c + 6] = matrix_to_rot6d(axis_angle_to_matrix(rrots))
        th6 = matrix_to_rot6d(axis_angle_to_matrix(thetas))
        out[:, theta_c:theta_c + 90] = th6.reshape(T, 90)
    else:
        out[:, rrot_c:rrot_c + 3] = rrots
        out[:, theta_c:theta_c + 45] = thetas.reshape(T, 45)
    out[:, tau_c:tau_c + 3] = taus
    if beta_c is not None:
        out[:, beta_c:beta_c + 10] = betas
    if joint_c is not None:
        joints = _fk_batch(thetas, rrots, taus, betas, skel)
        out[:, joint_c:joint_c + 63] = joints.reshape(T, 63)
    return FeatureSequence(out, variant, fps=15.0, beta_ref=betas[0], side=poses[0].side)


def decode_feature(fs: FeatureSequence, skel: HandSkeleton = None):
    """Invert encode_feature, ignoring auxiliary joint columns.

    6D rotation blocks pass through Gram-Schmidt; a degenerate block raises
    DecodeError carrying the frame and joint index. Shape comes from the
    feature columns when present, otherwise from beta_ref.
    """
    variant = fs.variant
    rrot_c, tau_c, theta_c, beta_c, _ = variant.layout()
    poses = []
    for t in range(fs.n_frames):
        row = fs.data[t]
        if variant.uses_rot6d:
            try:
                rrot = matrix_to_axis_angle(rot6d_to_matrix(row[rrot_c:rrot_c + 6]))
            except Exception as e:
                raise DecodeError(f"degenerate wrist rotation at frame {t}: {e}",
                                  frame=t, joint=-1) from e
            theta = np.empty((N_ARTICULATED, 3))
            blocks = row[theta_c:theta_c + 90].reshape(N_ARTICULATED, 6)
            for k in range(N_ARTICULATED):
                try:
                    theta[k] = matrix_to_axis_angle(rot6d_to_matrix(blocks[k]))
                except Exception as e:
                    raise DecodeError(f"degenerate 6D block at frame {t}, joint {k}: {e}",
                                      frame=t, joint=k) from e
        else:
            rrot = canonicalize_axis_angle(row[rrot_c:rrot_c + 3])
            theta = canonicalize_axis_angle(row[theta_c:theta_c + 45].reshape(N_ARTICULATED, 3))
        tau = row[tau_c:tau_c + 3]
        beta = row[beta_c:beta_c + 10] if beta_c is not None else fs.beta_ref
        poses.append(HandPose(theta, rrot, tau, np.array(beta), fs.side))
    return poses


@dataclass
class FitResult:
    pose: HandPose
    residual: float          # final objective: joint MSE + angle-limit penalty
    history: list            # objective after every accepted step
    converged: bool
    iterations: int


def fit_pose_to_joints(target, skel: HandSkeleton, init: HandPose, iters: int = 100,
                       lr: float = 1.0, angle_limit_weight: float = 1e-3,
                       init_reg_weight: float = 1e-8, tol: float = 1e-16) -> FitResult:
    """Recover pose parameters from observed joints.

    Minimizes mean squared joint error plus a quadratic hinge on joint
    angle components beyond +/- pi/2 and a tiny pull toward the init pose,
    using damped least-squares steps on the analytic kinematics jacobian
    (plain gradient descent stalls on this problem: translation and
    fingertip gradients differ by three orders of magnitude). The init
    regularizer pins the twist-about-bone directions that joint positions
    cannot observe. A step that increases the objective is retried with a
    larger damping, which degrades toward a short plain-gradient step, so
    accepted objectives are non-increasing by construction. `lr` scales the
    initial trust (higher = more aggressive first steps). Raises
    FitDivergedError if the objective ever exceeds ten times its initial
    value.
    """
    target = np.asarray(target, dtype=np.float64)
    if target.shape != (N_JOINTS, 3) or not np.all(np.isfinite(target)):
        raise InvalidInputError("fit target must be a finite (21, 3) array")
    init.validate()

    params = np.concatenate([init.rrot, init.tau, init.theta.ravel()])
    init_params = params.copy()
    limit = np.pi / 2
    pen_scale = np.sqrt(angle_limit_weight)
    reg_scale = np.sqrt(init_reg_weight)
    root_n = np.sqrt(N_JOINTS)

    def unpack(q):
        return HandPose(q[6:].reshape(N_ARTICULATED, 3), q[0:3], q[3:6],
                        init.beta.copy(), init.side)

    def residuals(q):
        """Stacked residual vector and jacobian; objective = sum(r^2)."""
        joints, jac = fk_with_jacobian(unpack(q), skel)
        r_pos = (joints - target).ravel() / root_n
        j_pos = jac.reshape(N_JOINTS * 3, 51) / root_n
        over = np.abs(q[6:]) - limit
        act = over > 0
        r_pen = np.where(act, pen_scale * over, 0.0)
        j_pen = np.zeros((45, 51))
        idx = np.where(act)[0]
        j_pen[idx, 6 + idx] = pen_scale * np.sign(q[6:][idx])
        r_reg = reg_scale * (q - init_params)
        j_reg = reg_scale * np.eye(51)
        return np.concatenate([r_pos, r_pen, r_reg]), np.vstack([j_pos, j_pen, j_reg])

    r, J = residuals(params)
    value = float(r @ r)
    initial = value
    history = [value]
    lam = 1e-3 / max(lr, 1e-9)
    converged = False
    it = 0
    for it in range(1, iters + 1):
        if value <= tol:
            converged = True
            break
        g = J.T @ r
        if np.linalg.norm(g) <= 1e-15:
            converged = True
            break
        h = J.T @ J
        diag = np.diag(h).copy()
        accepted = False
        for _ in range(40):
            try:
                delta = np.linalg.solve(h + lam * np.diag(diag + 1e-12), -g)
            except np.linalg.LinAlgError:
                lam *= 4.0
                continue
            trial = params + delta
            r_t, J_t = residuals(trial)
            trial_value = float(r_t @ r_t)
            if np.isfinite(trial_value) and trial_value <= value:
                params, r, J, value = trial, r_t, J_t, trial_value
                history.append(value)
                lam = max(lam / 3.0, 1e-12)
                accepted = True
                break
            lam *= 4.0
        if not accepted:
            converged = True  # no descent step at float resolution
            break
        if value > initial * 10.0:
            raise FitDivergedError(
                "pose fit diverged", initial_residual=initial,
                final_residual=value, iterations=it,
            )
    if value <= tol:
        converged = True
    return FitResult(unpack(params).canonical(), value, history, converged, it)
