"""Procedural smooth hand motions for tests, demos, and desk-scale training.

Motions are sums of a few low-frequency sinusoids: wrist translation drifts
inside a box in front of the camera, the global rotation swings about a
fixed random axis, and each finger joint flexes about its bending axis with
a small wobble on the other components. Shape coefficients are constant per
sequence. Everything is deterministic given the generator.
"""

import numpy as np

from .mano import HandPose, encode_feature, default_skeleton
from .rotations import canonicalize_axis_angle


def smooth_pose_track(rng, n_frames: int, fps: float = 15.0, side: str = "right"):
    """One smooth random pose sequence of n_frames."""
    t = np.arange(n_frames) / fps

    def wave(base, amp, fmin=0.2, fmax=0.8):
        f = rng.uniform(fmin, fmax)
        phase = rng.uniform(0, 2 * np.pi)
        return base + amp * np.sin(2 * np.pi * f * t + phase)

    tau = np.stack(
        [
            wave(rng.uniform(-0.10, 0.10), rng.uniform(0.02, 0.08)),
            wave(rng.uniform(-0.10, 0.10), rng.uniform(0.02, 0.08)),
            wave(rng.uniform(0.40, 0.60), rng.uniform(0.02, 0.10)),
        ],
        axis=1,
    )

    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = wave(rng.uniform(-0.8, 0.8), rng.uniform(0.1, 0.6))
    angle = np.clip(angle, -np.pi + 0.2, np.pi - 0.2)
    rrot = axis[None, :] * angle[:, None]

    theta = np.zeros((n_frames, 15, 3))
    for j in range(15):
        flex = np.clip(wave(rng.uniform(0.1, 0.7), rng.uniform(0.05, 0.5)), -0.2, 1.45)
        theta[:, j, 0] = flex
        theta[:, j, 1] = wave(0.0, rng.uniform(0.0, 0.08))
        theta[:, j, 2] = wave(0.0, rng.uniform(0.0, 0.08))

    beta = rng.uniform(-1.5, 1.5, size=10)
    return [
        HandPose(canonicalize_axis_angle(theta[i]), canonicalize_axis_angle(rrot[i]),
                 tau[i], beta.copy(), side)
        for i in range(n_frames)
    ]


def synthetic_windows(rng, n_windows: int, variant, skel=None, fps: int = 15):
    """One-second feature windows from independent smooth motions."""
    skel = skel if skel is not None else default_skeleton()
    return [
        encode_feature(smooth_pose_track(rng, fps, fps), variant, skel)
        for _ in range(n_windows)
    ]


def synthetic_record_dict(rng, record_id: str, n_seconds: float, fps: int = 15,
                          source: str = "synth", with_annotations: bool = True) -> dict:
    """A record in the JSON-lines ingestion schema, both hands present."""
    n = int(round(n_seconds * fps))
    left = smooth_pose_track(rng, n, fps, side="left")
    right = smooth_pose_track(rng, n, fps, side="right")

    def frame(p):
        return {
            "theta": p.theta.ravel().tolist(),
            "rrot": p.rrot.tolist(),
            "tau": p.tau.tolist(),
            "beta": p.beta.tolist(),
        }

    doc = {
        "id": record_id,
        "source": source,
        "fps": fps,
        "intrinsics": {"fx": 500.0, "fy": 500.0, "cx": 320.0, "cy": 240.0,
                       "width": 640, "height": 480},
        "frames": [
            {"t": i / fps, "left": frame(left[i]), "right": frame(right[i])}
            for i in range(n)
        ],
    }
    if with_annotations:
        seconds = max(1, int(np.ceil(n_seconds)))
        verbs = ["reach toward", "grasp", "lift", "rotate", "place", "release",
                 "slide", "press", "pinch", "hold"]
        objects = ["the cup", "the lid", "a small block", "the handle",
                   "the cloth", "a marker", "the box"]
        doc["annotations"] = {
            "per_second": [
                f"{rng.choice(verbs)} {rng.choice(objects)}" for _ in range(seconds)
            ],
            "chunks": [f"manipulate {rng.choice(objects)}"],
        }
    return doc
