"""Pose and distribution metrics for generated hand motion.

Distances operate on (T, J, 3) joint sequences in meters and report
centimeters. Procrustes alignment is solved per frame in closed form
(SVD of the cross-covariance with determinant correction, optimal scale
and translation). The distribution distance fits a Gaussian to each
embedding set and compares them in closed form.
"""

import numpy as np

from .codec import parse_stream
from .errors import DegenerateFrameError, InvalidInputError

M_TO_CM = 100.0


def _check_joint_seq(a, b, name_a="pred", name_b="gt"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3 or a.shape[-1] != 3:
        raise InvalidInputError(
            f"{name_a} {a.shape} and {name_b} {b.shape} must be equal (T, J, 3)"
        )
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise InvalidInputError("non-finite joint coordinates")
    return a, b


def mpjpe(pred, gt) -> float:
    """Mean per-joint position error, centimeters."""
    pred, gt = _check_joint_seq(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean()) * M_TO_CM


def mwte(pred, gt) -> float:
    """Mean wrist (joint 0) translation error, centimeters."""
    pred, gt = _check_joint_seq(pred, gt)
    return float(np.linalg.norm(pred[:, 0] - gt[:, 0], axis=-1).mean()) * M_TO_CM


def umeyama_align(src, dst):
    """Similarity transform (scale, rotation, translation) mapping src onto dst.

    Returns the transformed src points; raises when src is degenerate
    (all points coincident).
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    n = src.shape[0]
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    sc = src - mu_s
    dc = dst - mu_d
    var_s = float((sc ** 2).sum()) / n
    if var_s < 1e-18:
        raise DegenerateFrameError("all joints coincide; alignment undefined")
    cov = dc.T @ sc / n
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u @ vt) < 0:
        s[-1] = -1.0
    rot = u @ np.diag(s) @ vt
    scale = float((d * s).sum()) / var_s
    t = mu_d - scale * rot @ mu_s
    return scale * src @ rot.T + t


def pa_mpjpe(pred, gt) -> float:
    """MPJPE after optimal per-frame similarity alignment, centimeters."""
    pred, gt = _check_joint_seq(pred, gt)
    errs = []
    for t in range(pred.shape[0]):
        aligned = umeyama_align(pred[t], gt[t])
        errs.append(np.linalg.norm(aligned - gt[t], axis=-1).mean())
    return float(np.mean(errs)) * M_TO_CM


def _psd_sqrt(m):
    vals, vecs = np.linalg.eigh(m)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a, b, regularization: float = 1e-6) -> float:
    """Gaussian-fit distance between two embedding sets (each N x E, N >= 2).

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2}), with the cross
    term computed via the symmetrized product, covariances regularized by
    +regularization * I.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise InvalidInputError(f"embedding widths differ: {a.shape} vs {b.shape}")
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise InvalidInputError("need at least 2 embeddings per set")
    mu_a = a.mean(axis=0)
    mu_b = b.mean(axis=0)
    eye = np.eye(a.shape[1]) * regularization
    cov_a = np.cov(a, rowvar=False) + eye
    cov_b = np.cov(b, rowvar=False) + eye
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))


def retrieval_topk(queries, gallery, pairs, k: int = 3) -> float:
    """Fraction of queries whose true partner ranks in the top-k by cosine."""
    queries = np.asarray(queries, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    pairs = np.asarray(pairs, dtype=np.int64)
    if k > gallery.shape[0]:
        raise InvalidInputError(f"k={k} exceeds gallery size {gallery.shape[0]}")
    if pairs.shape[0] != queries.shape[0]:
        raise InvalidInputError("need one gallery index per query")
    qn = queries / np.maximum(np.linalg.norm(queries, axis=1, keepdims=True), 1e-12)
    gn = gallery / np.maximum(np.linalg.norm(gallery, axis=1, keepdims=True), 1e-12)
    sims = qn @ gn.T
    hits = 0
    for i, true_idx in enumerate(pairs):
        true_sim = sims[i, true_idx]
        rank = int((sims[i] > true_sim).sum())  # ties favor the true pair
        hits += rank < k
    return hits / len(pairs)


def valid_rate(streams, vocab, block_size: int = 128) -> float:
    """Fraction of streams the free-format validator accepts."""
    if not streams:
        raise InvalidInputError("empty stream list")
    ok = sum(parse_stream(s, vocab, block_size).valid for s in streams)
    return ok / len(streams)
