"""Physical-space alignment across heterogeneous camera recordings.

Weak-perspective remapping derives a per-axis scale and offset from source
and target pinhole intrinsics, so objects at equal depth share pixel scale
across sources. The two balancing augmentations perturb a motion's depth or
rotate it about the optical axis while transforming the paired image the
same way, keeping projection and pose consistent. Sequences can be
re-expressed in the coordinate frame of a (possibly randomly sampled)
reference frame before tokenization.

Pixel convention: integer coordinates are pixel centers, u along width,
v along height; resampling is bilinear with black fill outside the source.
"""

import json
from dataclasses import dataclass, replace

import numpy as np
from PIL import Image as PILImage

from .errors import AugmentRangeError, BehindCameraError, InvalidInputError
from .mano import HandPose
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise InvalidInputError("resolution must be positive")

    @property
    def principal(self):
        return np.array([self.cx, self.cy])

    @staticmethod
    def from_dict(d) -> "CameraIntrinsics":
        return CameraIntrinsics(d["fx"], d["fy"], d["cx"], d["cy"],
                                int(d["width"]), int(d["height"]))

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @staticmethod
    def load(path) -> "CameraIntrinsics":
        with open(path) as f:
            return CameraIntrinsics.from_dict(json.load(f))

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass(frozen=True)
class AffineMap:
    sx: float
    sy: float
    dx: float
    dy: float

    def __post_init__(self):
        if self.sx <= 0 or self.sy <= 0:
            raise InvalidInputError("affine map scales must be positive")

    def apply(self, uv):
        uv = np.asarray(uv, dtype=np.float64)
        return uv * np.array([self.sx, self.sy]) + np.array([self.dx, self.dy])

    def inverse(self) -> "AffineMap":
        return AffineMap(1.0 / self.sx, 1.0 / self.sy,
                         -self.dx / self.sx, -self.dy / self.sy)


@dataclass
class Image:
    pixels: np.ndarray      # (H, W, C) uint8
    source_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3:
            raise InvalidInputError(f"image must be HxWxC, got shape {px.shape}")
        self.pixels = px.astype(np.uint8, copy=False)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @staticmethod
    def load(path, source_id="") -> "Image":
        return Image(np.asarray(PILImage.open(path).convert("RGB")), source_id)

    def save(self, path):
        arr = self.pixels[:, :, 0] if self.pixels.shape[2] == 1 else self.pixels
        PILImage.fromarray(arr).save(path)


@dataclass
class AugmentRecord:
    kind: str               # depth_scale | inplane_rotation
    lambda_s: float = None
    phi: float = None
    provenance: str = ""

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "provenance": self.provenance}
        if self.lambda_s is not None:
            d["lambda_s"] = self.lambda_s
        if self.phi is not None:
            d["phi"] = self.phi
        return d

    @staticmethod
    def from_dict(d) -> "AugmentRecord":
        return AugmentRecord(d["kind"], d.get("lambda_s"), d.get("phi"),
                             d.get("provenance", ""))


def append_manifest(path, records):
    """Append augmentation records to a JSON-lines manifest."""
    with open(path, "a") as f:
        for rec in records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


@dataclass(frozen=True)
class FramePose:
    """Rigid reference transform: camera-from-reference rotation + origin."""

    r: np.ndarray   # (3, 3)
    t: np.ndarray   # (3,)

    def __post_init__(self):
        object.__setattr__(self, "r", np.asarray(self.r, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "FramePose":
        return FramePose(np.eye(3), np.zeros(3))

    @staticmethod
    def of_pose(pose: HandPose) -> "FramePose":
        return FramePose(axis_angle_to_matrix(pose.rrot), pose.tau.copy())

    def inverse(self) -> "FramePose":
        return FramePose(self.r.T, -self.r.T @ self.t)


# ---------------------------------------------------------------------------
# weak-perspective remapping


def weak_perspective_map(src: CameraIntrinsics, dst: CameraIntrinsics) -> AffineMap:
    """Pixel map aligning the source camera to the target intrinsics."""
    sx = dst.fx / src.fx
    sy = dst.fy / src.fy
    return AffineMap(sx, sy, dst.cx - sx * src.cx, dst.cy - sy * src.cy)


def _sample_bilinear(src: np.ndarray, us: np.ndarray, vs: np.ndarray) -> np.ndarray:
    """Bilinear sample at (us, vs); coordinates outside the source give 0."""
    h, w = src.shape[:2]
    out = np.zeros(us.shape + (src.shape[2],), dtype=np.float64)
    valid = (us >= 0) & (us <= w - 1) & (vs >= 0) & (vs <= h - 1)
    if not np.any(valid):
        return out
    u = us[valid]
    v = vs[valid]
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    pix = src.astype(np.float64)
    val = (
        pix[v0, u0] * (1 - fu) * (1 - fv)
        + pix[v0, u1] * fu * (1 - fv)
        + pix[v1, u0] * (1 - fu) * fv
        + pix[v1, u1] * fu * fv
    )
    out[valid] = val
    return out


def _remap_pixels(img: Image, src_coords_of, out_w: int, out_h: int) -> Image:
    xs, ys = np.meshgrid(np.arange(out_w, dtype=np.float64),
                         np.arange(out_h, dtype=np.float64))
    us, vs = src_coords_of(xs, ys)
    sampled = _sample_bilinear(img.pixels, us, vs)
    return Image(np.clip(np.rint(sampled), 0, 255).astype(np.uint8), img.source_id)


def remap_image(img: Image, amap: AffineMap, target: CameraIntrinsics) -> Image:
    """Resample onto the target resolution; black outside the source."""
    inv = amap.inverse()

    def src_of(xs, ys):
        return inv.sx * xs + inv.dx, inv.sy * ys + inv.dy

    return _remap_pixels(img, src_of, target.width, target.height)


def normalize_fov(src: CameraIntrinsics) -> CameraIntrinsics:
    """Intrinsics with a 90-degree horizontal field of view.

    Keeps the resolution, scales both focals by the same factor (preserving
    pixel aspect), and centers the principal point. Pair with
    weak_perspective_map + remap_image to produce the actual image.
    """
    fx_new = src.width / 2.0
    scale = fx_new / src.fx
    return CameraIntrinsics(fx_new, src.fy * scale, src.width / 2.0,
                            src.height / 2.0, src.width, src.height)


def project_point(k: CameraIntrinsics, p) -> np.ndarray:
    """Pinhole projection of points (..., 3), meters, to pixels (..., 2)."""
    p = np.asarray(p, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point has non-positive depth")
    return np.stack([k.fx * p[..., 0] / z + k.cx, k.fy * p[..., 1] / z + k.cy], axis=-1)


# ---------------------------------------------------------------------------
# view-invariant balancing augmentations


def depth_scale_augment(poses, img, k: CameraIntrinsics, lambda_s: float,
                        lambda_range=(0.7, 1.4), provenance=""):
    """Scale every wrist depth by lambda_s; rescale the image by 1/lambda_s.

    Only the z component of the translation changes, so the projected
    offset from the principal point shrinks by exactly 1/lambda_s; the
    image is rescaled about the principal point to move background content
    identically, then cropped/padded back to the source resolution.
    Returns (poses, image or None, AugmentRecord).
    """
    if not (lambda_range[0] <= lambda_s <= lambda_range[1]):
        raise AugmentRangeError(
            f"lambda_s={lambda_s} outside configured range {list(lambda_range)}"
        )
    for p in poses:
        if p.tau[2] <= 0:
            raise BehindCameraError("wrist behind camera; cannot depth-scale")
    new_poses = [
        replace(p, tau=np.array([p.tau[0], p.tau[1], lambda_s * p.tau[2]]))
        for p in poses
    ]
    new_img = None
    if img is not None:
        c = k.principal

        def src_of(xs, ys):
            return c[0] + lambda_s * (xs - c[0]), c[1] + lambda_s * (ys - c[1])

        new_img = _remap_pixels(img, src_of, k.width, k.height)
    record = AugmentRecord("depth_scale", lambda_s=lambda_s, provenance=provenance)
    return new_poses, new_img, record


def inplane_rotate_augment(poses, img, k: CameraIntrinsics, phi: float, provenance=""):
    """Rotate poses about the optical axis and the image about the principal point."""
    if not (-np.pi < phi <= np.pi):
        raise AugmentRangeError(f"phi={phi} outside (-pi, pi]")
    rz = axis_angle_to_matrix(np.array([0.0, 0.0, phi]))
    new_poses = []
    for p in poses:
        glob = rz @ axis_angle_to_matrix(p.rrot)
        new_poses.append(
            replace(p, tau=rz @ p.tau, rrot=matrix_to_axis_angle(glob))
        )
    new_img = None
    if img is not None:
        c = k.principal
        cos, sin = np.cos(phi), np.sin(phi)

        def src_of(xs, ys):
            # Inverse rotation of the pixel-offset map (u right, v down).
            du = xs - c[0]
            dv = ys - c[1]
            return c[0] + cos * du + sin * dv, c[1] - sin * du + cos * dv

        new_img = _remap_pixels(img, src_of, k.width, k.height)
    record = AugmentRecord("inplane_rotation", phi=phi, provenance=provenance)
    return new_poses, new_img, record


# ---------------------------------------------------------------------------
# reference-frame re-expression


def reexpress_in_frame(poses, ref: FramePose):
    """Express poses relative to the reference: tau' = R^T (tau - t)."""
    rt = ref.r.T
    out = []
    for p in poses:
        glob = rt @ axis_angle_to_matrix(p.rrot)
        out.append(replace(p, tau=rt @ (p.tau - ref.t), rrot=matrix_to_axis_angle(glob)))
    return out


def sample_reference_frame(window_start: float, horizon: float, fps: float,
                           n_frames: int, rng) -> int:
    """Uniform frame index in [window_start - horizon, window_start], seconds.

    Clamped to the sequence bounds; horizon 0 always returns the window's
    first frame.
    """
    if n_frames < 1:
        raise InvalidInputError("empty sequence")
    start = int(round(window_start * fps))
    start = min(max(start, 0), n_frames - 1)
    lo = max(0, start - int(round(horizon * fps)))
    return int(rng.integers(lo, start + 1))
