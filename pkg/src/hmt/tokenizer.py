"""Part-level grouped residual quantization of motion feature windows.

Pipeline per hand-second (fps frames, zero-padded to a multiple of alpha):

    features (T x D_part) --stack alpha frames--> (T/alpha x alpha*D_part)
        --encoder--> z (T/alpha x d)
        --grouped residual quantization--> indices (T/alpha x n x L), z_hat
        --decoder--> reconstructed features

The feature dimension is split into a wrist part (global rotation,
translation, wrist joint) and a finger part (articulation, shape, remaining
joints), each with its own encoder/decoder and per-group codebooks shared
across the L residual layers. Token ids pack as wrist ids then finger ids
(offset by the wrist codebook size), each flattened (timestep, group, layer)
row-major, giving parts * n * L * ceil(fps/alpha) ids per hand-second --
128 under the default configuration.

Training minimizes reconstruction + commitment (+ wrist) losses with
gradients flowing through the quantizer via the straight-through estimator;
codebooks are maintained as exponential moving averages of their assigned
residuals. Encoders/decoders are affine maps (optionally one tanh hidden
layer) with hand-derived gradients, so every gradient is checkable against
central finite differences.
"""

import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    ConfigError,
    InvalidTokenError,
    MalformedBlockError,
    TrainingDivergedError,
    UninitializedCodebookError,
    WindowingError,
)
from .mano import FeatureSequence, FeatureVariant, decode_feature, default_skeleton, encode_feature

MAGIC = b"HGRQ"
FORMAT_VERSION = 1


@dataclass
class QuantizerConfig:
    alpha: int = 4                 # temporal downsample ratio
    n_groups: int = 2              # channel groups per part
    n_layers: int = 8              # residual quantization layers
    k_wrist: int = 4096
    k_finger: int = 4096
    code_dim: int = 512            # latent width d per part
    fps: int = 15
    variant: FeatureVariant = FeatureVariant.D162
    part_level: bool = True
    hidden: int = 0                # tanh hidden width, 0 = pure affine
    pca_init: bool = True          # seed affine maps from first-batch PCA
    ema_decay: float = 0.99
    ema_eps: float = 1e-5
    dead_code_patience: int = 100  # zero-hit updates before reseeding

    def __post_init__(self):
        if self.code_dim % self.n_groups != 0:
            raise ConfigError(
                f"code_dim {self.code_dim} not divisible by n_groups {self.n_groups}"
            )
        if min(self.alpha, self.n_groups, self.n_layers, self.k_wrist,
               self.k_finger, self.code_dim, self.fps) < 1:
            raise ConfigError("all structural config values must be >= 1")
        if not 0.0 < self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in (0, 1)")

    @property
    def group_dim(self) -> int:
        return self.code_dim // self.n_groups

    @property
    def latent_steps(self) -> int:
        """Latent rows per one-second window."""
        return -(-self.fps // self.alpha)

    @property
    def n_parts(self) -> int:
        return 2 if self.part_level else 1

    @property
    def part_names(self):
        return ("wrist", "finger") if self.part_level else ("full",)

    @property
    def tokens_per_hand_second(self) -> int:
        return self.n_parts * self.n_groups * self.n_layers * self.latent_steps

    @property
    def motion_vocab_size(self) -> int:
        return self.k_wrist + self.k_finger

    def part_codebook_size(self, part: str) -> int:
        if part == "wrist":
            return self.k_wrist
        if part == "finger":
            return self.k_finger
        if part == "full":
            return self.k_wrist + self.k_finger
        raise ConfigError(f"unknown part {part!r}")

    def part_columns(self, part: str) -> np.ndarray:
        if part == "wrist":
            return self.variant.wrist_columns()
        if part == "finger":
            return self.variant.finger_columns()
        if part == "full":
            return np.arange(self.variant.dim)
        raise ConfigError(f"unknown part {part!r}")

    def id_offset(self, part: str) -> int:
        """Offset of this part's ids inside the motion vocabulary."""
        return self.k_wrist if part == "finger" else 0


@dataclass
class Codebook:
    codes: np.ndarray       # (K, group_dim)
    ema_count: np.ndarray   # (K,)
    ema_sum: np.ndarray     # (K, group_dim)
    decay: float
    dead_streak: np.ndarray = None  # (K,) consecutive zero-hit updates
    initialized: bool = True
    # Pin codes[0] to the zero vector. A residual step can then never make
    # a residual longer, so reconstruction error is non-increasing in the
    # layer count for any input.
    reserve_null: bool = False

    def __post_init__(self):
        if self.dead_streak is None:
            self.dead_streak = np.zeros(len(self.codes), dtype=np.int64)

    @staticmethod
    def empty(k: int, dim: int, decay: float, reserve_null: bool = False) -> "Codebook":
        return Codebook(
            codes=np.zeros((k, dim)),
            ema_count=np.ones(k),
            ema_sum=np.zeros((k, dim)),
            decay=decay,
            initialized=False,
            reserve_null=reserve_null,
        )

    def pin_null(self):
        if self.reserve_null:
            self.codes[0] = 0.0
            self.ema_sum[0] = 0.0
            self.ema_count[0] = 1.0
            self.dead_streak[0] = 0


@dataclass
class PartCodec:
    enc_layers: list        # [(W, b), ...] with tanh between layers
    dec_layers: list
    books: list             # n_groups codebooks


@dataclass
class PartTokenizer:
    config: QuantizerConfig
    parts: dict = field(default_factory=dict)  # part name -> PartCodec

    def codec(self, part: str) -> PartCodec:
        if part not in self.parts:
            raise ConfigError(f"tokenizer has no part {part!r}")
        return self.parts[part]


@dataclass
class MotionTokens:
    """Per-hand, per-second motion token ids."""

    hands: dict                  # 'left'/'right' -> list of (tokens_per_block,) int arrays
    tokens_per_block: int

    def blocks(self):
        """Yield (second, hand, ids) time-major, left before right."""
        n = max((len(v) for v in self.hands.values()), default=0)
        for sec in range(n):
            for hand in ("left", "right"):
                if hand in self.hands and sec < len(self.hands[hand]):
                    yield sec, hand, self.hands[hand][sec]

    @property
    def n_blocks(self) -> int:
        return sum(len(v) for v in self.hands.values())


@dataclass
class LossReport:
    recon: float
    commit: float
    wrist: float
    total: float


# ---------------------------------------------------------------------------
# windowing and the affine encoder/decoder


def pad_window(fs: FeatureSequence, alpha: int) -> FeatureSequence:
    """Zero-pad rows so the frame count is a multiple of alpha."""
    t = fs.n_frames
    if t < 1:
        raise WindowingError("cannot pad an empty window")
    t_pad = alpha * (-(-t // alpha))
    if t_pad == t:
        return fs
    out = np.zeros((t_pad, fs.data.shape[1]))
    out[:t] = fs.data
    return replace(fs, data=out)


def _stack_frames(x: np.ndarray, alpha: int) -> np.ndarray:
    t, w = x.shape
    if t % alpha != 0:
        raise WindowingError(f"frame count {t} not a multiple of alpha={alpha}")
    return x.reshape(t // alpha, alpha * w)


def _unstack_frames(x: np.ndarray, alpha: int) -> np.ndarray:
    steps, w = x.shape
    return x.reshape(steps * alpha, w // alpha)


def _mlp_forward(x: np.ndarray, layers):
    """Affine stack with tanh between layers; returns output + layer inputs."""
    ins = []
    for i, (w, b) in enumerate(layers):
        ins.append(x)
        x = x @ w + b
        if i < len(layers) - 1:
            x = np.tanh(x)
    return x, ins


def _mlp_backward(d_out: np.ndarray, layers, ins):
    """Gradients of each (W, b) plus the gradient w.r.t. the input."""
    grads = [None] * len(layers)
    for i in range(len(layers) - 1, -1, -1):
        w, _ = layers[i]
        grads[i] = (ins[i].T @ d_out, d_out.sum(axis=0))
        d_out = d_out @ w.T
        if i > 0:
            d_out = d_out * (1.0 - ins[i] ** 2)  # ins[i] is a tanh output
    return grads, d_out


def _select_part(fs_data: np.ndarray, part: str, cfg: QuantizerConfig) -> np.ndarray:
    cols = cfg.part_columns(part)
    if fs_data.shape[1] == cfg.variant.dim:
        return fs_data[:, cols]
    if fs_data.shape[1] == len(cols):
        return fs_data
    raise ConfigError(
        f"window width {fs_data.shape[1]} matches neither {cfg.variant.name} "
        f"({cfg.variant.dim}) nor the {part} part ({len(cols)})"
    )


def encode_window(fs: FeatureSequence, part: str, tok: PartTokenizer) -> np.ndarray:
    """Padded window -> latent (ceil(T/alpha), code_dim) for one part."""
    x = _select_part(fs.data, part, tok.config)
    stacked = _stack_frames(x, tok.config.alpha)
    z, _ = _mlp_forward(stacked, tok.codec(part).enc_layers)
    return z


def decode_window(z_hat: np.ndarray, part: str, tok: PartTokenizer, n_frames: int) -> np.ndarray:
    """Latent -> part feature columns, truncated to the unpadded length."""
    cfg = tok.config
    z_hat = np.asarray(z_hat, dtype=np.float64)
    if z_hat.ndim != 2 or z_hat.shape[1] != cfg.code_dim:
        raise ConfigError(f"latent shape {z_hat.shape} does not match d={cfg.code_dim}")
    y, _ = _mlp_forward(z_hat, tok.codec(part).dec_layers)
    frames = _unstack_frames(y, cfg.alpha)
    if n_frames > frames.shape[0]:
        raise ConfigError(f"requested {n_frames} frames from {frames.shape[0]} decoded")
    return frames[:n_frames]


# ---------------------------------------------------------------------------
# grouped residual quantization


def _nearest_codes(resid: np.ndarray, codes: np.ndarray) -> np.ndarray:
    # argmin returns the first (lowest-index) minimizer, our tie-break rule.
    d2 = (
        np.sum(resid * resid, axis=1, keepdims=True)
        - 2.0 * resid @ codes.T
        + np.sum(codes * codes, axis=1)
    )
    return np.argmin(d2, axis=1)


def grq_quantize(z: np.ndarray, books, n_layers: int, with_stats: bool = False,
                 with_cums: bool = False):
    """Greedy nearest-code residual descent, n_layers per channel group.

    Returns (indices (steps, n, L), z_hat) plus, on request, per-group
    assignment statistics (hits per code and summed residual inputs, for
    EMA updates) and the per-layer cumulative quantizations (for the
    commitment loss). z_hat accumulates the selected codes in layer order;
    grq_dequantize replays the same accumulation, so the two agree bitwise.
    """
    z = np.asarray(z, dtype=np.float64)
    n = len(books)
    steps, d = z.shape
    if d % n != 0:
        raise ConfigError(f"latent width {d} not divisible by {n} groups")
    dg = d // n
    for book in books:
        if not book.initialized or len(book.codes) == 0:
            raise UninitializedCodebookError("codebook has not been seeded")
        if book.codes.shape[1] != dg:
            raise ConfigError(
                f"codebook width {book.codes.shape[1]} does not match group width {dg}"
            )
    indices = np.empty((steps, n, n_layers), dtype=np.int64)
    z_hat = np.zeros_like(z)
    stats = []
    cums = [np.zeros_like(z) for _ in range(n_layers)] if with_cums else None
    for g, book in enumerate(books):
        sl = slice(g * dg, (g + 1) * dg)
        resid = z[:, sl].copy()
        acc = np.zeros((steps, dg))
        hits = np.zeros(len(book.codes))
        sums = np.zeros_like(book.codes)
        for layer in range(n_layers):
            idx = _nearest_codes(resid, book.codes)
            if with_stats:
                np.add.at(hits, idx, 1.0)
                np.add.at(sums, idx, resid)
            q = book.codes[idx]
            indices[:, g, layer] = idx
            acc += q
            resid -= q
            if with_cums:
                cums[layer][:, sl] = acc
        z_hat[:, sl] = acc
        if with_stats:
            stats.append((hits, sums))
    out = [indices, z_hat]
    if with_stats:
        out.append(stats)
    if with_cums:
        out.append(cums)
    return tuple(out)


def grq_dequantize(indices: np.ndarray, books) -> np.ndarray:
    """Sum the indexed codes per group; exact inverse of grq_quantize's z_hat."""
    indices = np.asarray(indices)
    if indices.ndim != 3 or indices.shape[1] != len(books):
        raise ConfigError(f"indices shape {indices.shape} does not match {len(books)} groups")
    steps, n, n_layers = indices.shape
    dg = books[0].codes.shape[1]
    z_hat = np.zeros((steps, n * dg))
    for g, book in enumerate(books):
        k = len(book.codes)
        if not book.initialized or k == 0:
            raise UninitializedCodebookError("codebook has not been seeded")
        acc = np.zeros((steps, dg))
        for layer in range(n_layers):
            idx = indices[:, g, layer]
            bad = (idx < 0) | (idx >= k)
            if np.any(bad):
                step = int(np.argmax(bad))
                raise InvalidTokenError(
                    f"code index {int(idx[step])} out of range [0, {k}) "
                    f"at (step {step}, group {g}, layer {layer})",
                    position=(step, g, layer),
                )
            acc += book.codes[idx]
        z_hat[:, g * dg : (g + 1) * dg] = acc
    return z_hat


# ---------------------------------------------------------------------------
# whole-motion tokenization


def _window_features(poses, cfg: QuantizerConfig, skel) -> list:
    """Split a pose list into padded one-second feature windows."""
    fps = cfg.fps
    if len(poses) == 0 or len(poses) % fps != 0:
        raise WindowingError(
            f"pose sequence length {len(poses)} is not a whole number of "
            f"one-second windows at {fps} FPS"
        )
    windows = []
    for start in range(0, len(poses), fps):
        fs = encode_feature(poses[start : start + fps], cfg.variant, skel)
        windows.append(pad_window(fs, cfg.alpha))
    return windows


def tokenize_motion(poses_per_hand: dict, tok: PartTokenizer, skel=None) -> MotionTokens:
    """Pose sequences (whole seconds, window reference frame) -> token ids.

    Each hand-second yields exactly config.tokens_per_hand_second ids:
    wrist-part ids first, then finger-part ids offset by the wrist codebook
    size, each flattened (timestep, group, layer) row-major.
    """
    cfg = tok.config
    skel = skel if skel is not None else default_skeleton()
    hands = {}
    for hand, poses in poses_per_hand.items():
        if hand not in ("left", "right"):
            raise WindowingError(f"unknown hand {hand!r}")
        if not poses:
            hands[hand] = []
            continue
        blocks = []
        for fs in _window_features(poses, cfg, skel):
            ids = []
            for part in cfg.part_names:
                z = encode_window(fs, part, tok)
                indices, _ = grq_quantize(z, tok.codec(part).books, cfg.n_layers)
                ids.append(indices.ravel() + cfg.id_offset(part))
            blocks.append(np.concatenate(ids))
        hands[hand] = blocks
    return MotionTokens(hands=hands, tokens_per_block=cfg.tokens_per_hand_second)


def detokenize_motion(tokens: MotionTokens, tok: PartTokenizer, betas: dict,
                      skel=None) -> dict:
    """Token ids -> pose sequences; shape comes from the per-hand betas."""
    cfg = tok.config
    skel = skel if skel is not None else default_skeleton()
    per_part = cfg.n_groups * cfg.n_layers * cfg.latent_steps
    out = {}
    for hand, blocks in tokens.hands.items():
        beta_ref = np.asarray(betas.get(hand, np.zeros(10)), dtype=np.float64)
        poses = []
        for b, ids in enumerate(blocks):
            ids = np.asarray(ids)
            if ids.shape != (cfg.tokens_per_hand_second,):
                raise MalformedBlockError(
                    f"block {b} of hand {hand} has {ids.size} ids, "
                    f"expected {cfg.tokens_per_hand_second}"
                )
            if np.any(ids < 0) or np.any(ids >= cfg.motion_vocab_size):
                pos = int(np.argmax((ids < 0) | (ids >= cfg.motion_vocab_size)))
                raise InvalidTokenError(
                    f"token id {int(ids[pos])} outside [0, {cfg.motion_vocab_size}) "
                    f"at block {b} position {pos}",
                    position=pos,
                )
            full = np.zeros((cfg.fps, cfg.variant.dim))
            for p, part in enumerate(cfg.part_names):
                chunk = ids[p * per_part : (p + 1) * per_part] - cfg.id_offset(part)
                k = cfg.part_codebook_size(part)
                if np.any(chunk < 0) or np.any(chunk >= k):
                    pos = int(np.argmax((chunk < 0) | (chunk >= k)))
                    raise InvalidTokenError(
                        f"id at block {b} position {p * per_part + pos} does not "
                        f"belong to the {part} range",
                        position=p * per_part + pos,
                    )
                indices = chunk.reshape(cfg.latent_steps, cfg.n_groups, cfg.n_layers)
                z_hat = grq_dequantize(indices, tok.codec(part).books)
                cols = cfg.part_columns(part)
                full[:, cols] = decode_window(z_hat, part, tok, cfg.fps)
            fs = FeatureSequence(full, cfg.variant, fps=cfg.fps, beta_ref=beta_ref)
            poses.extend(decode_feature(fs, skel))
        out[hand] = poses
    return out


# ---------------------------------------------------------------------------
# training: losses, straight-through gradients, EMA codebooks


def _batch_matrix(batch, part: str, cfg: QuantizerConfig) -> np.ndarray:
    """Stack a batch of padded windows into one (B*steps, alpha*width) matrix."""
    rows = []
    for fs in batch:
        x = _select_part(fs.data if isinstance(fs, FeatureSequence) else fs, part, cfg)
        rows.append(_stack_frames(x, cfg.alpha))
    return np.concatenate(rows, axis=0)


def tokenizer_loss(batch, tok: PartTokenizer, lam1: float = 0.02, lam2: float = 1.0,
                   frozen: dict = None):
    """Losses and analytic encoder/decoder gradients for one batch.

    Reconstruction is the mean squared error over every feature element;
    commitment is sum over layers of the mean squared gap between the
    latent and the (gradient-stopped) cumulative quantization; the wrist
    term is the mean squared error over wrist columns and applies only in
    non-part-level mode. Quantization is a piecewise-constant map, so
    gradients treat it as identity (straight-through); passing `frozen`
    (the quantization offsets and cumulative sums captured at a base point)
    evaluates the matching differentiable surrogate, which is what a
    finite-difference check must probe.

    Returns (LossReport, grads) with grads[part] = {"enc": [...], "dec": [...]}.
    """
    cfg = tok.config
    wrist_cols_in_full = None
    if not cfg.part_level:
        # Wrist block position inside the stacked full-part frame.
        wrist = set(cfg.variant.wrist_columns().tolist())
        width = cfg.variant.dim
        wrist_cols_in_full = np.array(
            [a * width + c for a in range(cfg.alpha) for c in sorted(wrist)]
        )

    total_recon_sse = 0.0
    total_recon_n = 0
    total_commit_sse = np.zeros(cfg.n_layers)
    total_commit_n = 0
    wrist_sse = 0.0
    wrist_n = 0
    caches = {}

    for part in cfg.part_names:
        x = _batch_matrix(batch, part, cfg)
        codec = tok.codec(part)
        z, enc_ins = _mlp_forward(x, codec.enc_layers)
        if frozen is None:
            _, z_hat, stats, cums = grq_quantize(
                z, codec.books, cfg.n_layers, with_stats=True, with_cums=True
            )
        else:
            # Surrogate for gradient checks: the quantizer's discrete outputs
            # are constants captured at the base point, exactly as the
            # straight-through gradient treats them.
            z_hat = z + frozen[part]["offset"]
            cums = frozen[part]["cums"]
            stats = None
        y, dec_ins = _mlp_forward(z_hat, codec.dec_layers)
        diff = y - x
        total_recon_sse += float(np.sum(diff * diff))
        total_recon_n += diff.size
        for l, cum in enumerate(cums):
            gap = z - cum
            total_commit_sse[l] += float(np.sum(gap * gap))
        total_commit_n += z.size
        if wrist_cols_in_full is not None:
            wd = diff[:, wrist_cols_in_full]
            wrist_sse += float(np.sum(wd * wd))
            wrist_n += wd.size
        caches[part] = dict(
            x=x, z=z, z_hat=z_hat, y=y, diff=diff, cums=cums,
            enc_ins=enc_ins, dec_ins=dec_ins, stats=stats,
        )

    recon = total_recon_sse / total_recon_n
    commit = float(np.sum(total_commit_sse)) / total_commit_n
    wrist = (wrist_sse / wrist_n) if wrist_n else 0.0
    total = recon + lam1 * commit + lam2 * wrist
    if not np.isfinite(total):
        raise TrainingDivergedError(f"non-finite loss: recon={recon} commit={commit}")

    grads = {}
    for part in cfg.part_names:
        c = caches[part]
        codec = tok.codec(part)
        d_y = 2.0 * c["diff"] / total_recon_n
        if wrist_cols_in_full is not None:
            d_y[:, wrist_cols_in_full] += lam2 * 2.0 * c["diff"][:, wrist_cols_in_full] / wrist_n
        dec_grads, d_zhat = _mlp_backward(d_y, codec.dec_layers, c["dec_ins"])
        d_z = d_zhat.copy()  # straight-through: d z_hat / d z = I
        for cum in c["cums"]:
            d_z += lam1 * 2.0 * (c["z"] - cum) / total_commit_n
        enc_grads, _ = _mlp_backward(d_z, codec.enc_layers, c["enc_ins"])
        grads[part] = {"enc": enc_grads, "dec": dec_grads}

    report = LossReport(recon=recon, commit=commit, wrist=wrist, total=total)
    return report, grads, caches


def capture_frozen_offsets(batch, tok: PartTokenizer):
    """Quantization constants at the current point, for surrogate FD checks."""
    cfg = tok.config
    frozen = {}
    for part in cfg.part_names:
        x = _batch_matrix(batch, part, cfg)
        z, _ = _mlp_forward(x, tok.codec(part).enc_layers)
        _, z_hat, cums = grq_quantize(z, tok.codec(part).books, cfg.n_layers,
                                      with_cums=True)
        frozen[part] = {"offset": z_hat - z, "cums": cums}
    return frozen


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, key, param, grad):
        if key not in self.m:
            self.m[key] = np.zeros_like(param)
            self.v[key] = np.zeros_like(param)
        self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * grad
        self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * grad * grad
        mh = self.m[key] / (1 - self.beta1 ** self.t)
        vh = self.v[key] / (1 - self.beta2 ** self.t)
        param -= self.lr * mh / (np.sqrt(vh) + self.eps)


def ema_update(book: Codebook, hits: np.ndarray, residual_sums: np.ndarray,
               patience: int = 100, rng=None, reseed_pool: np.ndarray = None,
               eps: float = 1e-5) -> Codebook:
    """Exponential-moving-average codebook update.

    counts <- g*counts + (1-g)*hits; sums <- g*sums + (1-g)*assigned residual
    sums; codes = sums / max(counts, eps). Codes that go `patience`
    consecutive updates without a hit are reseeded from the provided
    residual pool (skipped when no pool/rng is given).
    """
    g = book.decay
    book.ema_count = g * book.ema_count + (1.0 - g) * hits
    book.ema_sum = g * book.ema_sum + (1.0 - g) * residual_sums
    book.codes = book.ema_sum / np.maximum(book.ema_count, eps)[:, None]
    book.dead_streak = np.where(hits > 0, 0, book.dead_streak + 1)
    if rng is not None and reseed_pool is not None and len(reseed_pool):
        dead = np.where(book.dead_streak >= patience)[0]
        if book.reserve_null:
            dead = dead[dead != 0]
        if len(dead):
            picks = rng.integers(0, len(reseed_pool), size=len(dead))
            book.codes[dead] = reseed_pool[picks]
            book.ema_sum[dead] = reseed_pool[picks]
            book.ema_count[dead] = 1.0
            book.dead_streak[dead] = 0
    book.pin_null()
    return book


def train_step(batch, tok: PartTokenizer, lam1: float = 0.02, lam2: float = 1.0,
               lr: float = 2e-4, opt: AdamState = None, rng=None) -> LossReport:
    """One optimization step: encoder/decoder update + EMA codebook update.

    Plain SGD with the given learning rate unless an AdamState is supplied.
    The dead-code reseed draws from the batch's own residuals and only runs
    when an rng is passed.
    """
    cfg = tok.config
    report, grads, caches = tokenizer_loss(batch, tok, lam1, lam2)
    if opt is not None:
        opt.t += 1
    for part in cfg.part_names:
        codec = tok.codec(part)
        for tag, layers in (("enc", codec.enc_layers), ("dec", codec.dec_layers)):
            for i, (w, b) in enumerate(layers):
                gw, gb = grads[part][tag][i]
                if opt is None:
                    w -= lr * gw
                    b -= lr * gb
                else:
                    opt.step(f"{part}.{tag}.{i}.w", w, gw)
                    opt.step(f"{part}.{tag}.{i}.b", b, gb)
        # EMA update from this batch's assignments, per group.
        dg = cfg.group_dim
        z = caches[part]["z"]
        for gix, book in enumerate(codec.books):
            hits, sums = caches[part]["stats"][gix]
            pool = z[:, gix * dg : (gix + 1) * dg]
            ema_update(book, hits, sums, patience=cfg.dead_code_patience,
                       rng=rng, reseed_pool=pool if rng is not None else None,
                       eps=cfg.ema_eps)
    return report


# ---------------------------------------------------------------------------
# initialization and the training loop


def _kmeans_pp(x: np.ndarray, k: int, rng) -> np.ndarray:
    """k-means++ seed selection (D^2 sampling, no Lloyd refinement)."""
    n = len(x)
    if n == 0:
        raise ConfigError("cannot seed a codebook from an empty sample")
    if n < k:
        reps = np.concatenate([x] * (-(-k // n)), axis=0)[:k]
        jitter = rng.normal(scale=1e-4 * (np.abs(x).mean() + 1e-12), size=reps.shape)
        return reps + jitter
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[i:] = x[rng.integers(0, n, size=k - i)]
            break
        centers[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centers[i]) ** 2, axis=1))
    return centers


def _pca_affine(x: np.ndarray, d: int, n_groups: int):
    """Encoder/decoder affine pairs from the principal components of x.

    The projection is orthonormal, so latent-space quantization error maps
    one-to-one onto feature-space reconstruction error. Components are
    dealt round-robin across channel groups so each group carries a similar
    share of the variance.
    """
    mu = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mu, full_matrices=False)
    comps = vt[:d]  # (r, width), variance-sorted
    v = np.zeros((x.shape[1], d))
    dg = d // n_groups
    for j in range(comps.shape[0]):
        g = j % n_groups
        slot = g * dg + j // n_groups
        if slot < d:
            v[:, slot] = comps[j]
    enc = (v, -mu @ v)
    dec = (v.T.copy(), mu.copy())
    return enc, dec


def init_tokenizer(config: QuantizerConfig, first_batch, rng) -> PartTokenizer:
    """Affine weights from first-batch PCA (or random); seeded codebooks.

    Codebook seeding runs k-means++ on the pooled per-layer residual inputs
    obtained by quantizing the batch against a provisional (layer-0) book.
    """
    tok = PartTokenizer(config=config)
    for part in config.part_names:
        width = len(config.part_columns(part)) * config.alpha
        d = config.code_dim
        if config.hidden > 0:
            enc_dims = [(width, config.hidden), (config.hidden, d)]
            dec_dims = [(d, config.hidden), (config.hidden, width)]
        else:
            enc_dims = [(width, d)]
            dec_dims = [(d, width)]
        enc_layers = [
            (rng.normal(scale=1.0 / np.sqrt(i), size=(i, o)), np.zeros(o))
            for i, o in enc_dims
        ]
        dec_layers = [
            (rng.normal(scale=1.0 / np.sqrt(i), size=(i, o)), np.zeros(o))
            for i, o in dec_dims
        ]
        if config.pca_init and config.hidden == 0 and first_batch:
            x = _batch_matrix(first_batch, part, config)
            enc, dec = _pca_affine(x, d, config.n_groups)
            enc_layers = [enc]
            dec_layers = [dec]
        k = config.part_codebook_size(part)
        books = [Codebook.empty(k, config.group_dim, config.ema_decay, reserve_null=True)
                 for _ in range(config.n_groups)]
        tok.parts[part] = PartCodec(enc_layers, dec_layers, books)

        if first_batch:
            x = _batch_matrix(first_batch, part, config)
            z, _ = _mlp_forward(x, enc_layers)
            dg = config.group_dim
            for g, book in enumerate(books):
                zg = z[:, g * dg : (g + 1) * dg]
                book.codes = _kmeans_pp(zg, k, rng)
                book.initialized = True
                book.pin_null()
            # Bootstrap pass: reseed from the residual inputs of every layer.
            for g, book in enumerate(books):
                zg = z[:, g * dg : (g + 1) * dg]
                pool = [zg]
                resid = zg.copy()
                for _ in range(config.n_layers - 1):
                    idx = _nearest_codes(resid, book.codes)
                    resid = resid - book.codes[idx]
                    pool.append(resid.copy())
                book.codes = _kmeans_pp(np.concatenate(pool, axis=0), k, rng)
                book.ema_sum = book.codes.copy()
                book.ema_count = np.ones(k)
                book.dead_streak = np.zeros(k, dtype=np.int64)
                book.pin_null()
    return tok


def train_tokenizer(windows, config: QuantizerConfig, epochs: int, seed: int,
                    lam1: float = 0.02, lam2: float = 1.0, lr: float = 1e-3,
                    batch_size: int = 256, log=None):
    """Train a tokenizer from scratch on padded feature windows.

    Deterministic given the seed. Returns (tokenizer, per-epoch LossReports).
    """
    rng = np.random.default_rng(seed)
    windows = [pad_window(w, config.alpha) for w in windows]
    order = rng.permutation(len(windows))
    first = [windows[i] for i in order[:min(batch_size * 8, len(windows))]]
    tok = init_tokenizer(config, first, rng)
    opt = AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(windows))
        reports = []
        for start in range(0, len(windows), batch_size):
            batch = [windows[i] for i in order[start : start + batch_size]]
            reports.append(train_step(batch, tok, lam1, lam2, opt=opt, rng=rng))
        mean = LossReport(
            recon=float(np.mean([r.recon for r in reports])),
            commit=float(np.mean([r.commit for r in reports])),
            wrist=float(np.mean([r.wrist for r in reports])),
            total=float(np.mean([r.total for r in reports])),
        )
        history.append(mean)
        if log is not None:
            log(epoch, mean)
    return tok, history


# ---------------------------------------------------------------------------
# model file I/O: little-endian binary with a JSON sidecar


def _write_array(f, arr, dtype):
    f.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def _read_array(f, shape, dtype):
    n = int(np.prod(shape)) * np.dtype(dtype).itemsize
    buf = f.read(n)
    if len(buf) != n:
        raise ConfigError("model file truncated")
    return np.frombuffer(buf, dtype=dtype).reshape(shape).astype(np.float64)


def save_tokenizer(tok: PartTokenizer, path):
    """Binary model file: magic, version, config block, weights, codebooks."""
    cfg = tok.config
    path = str(path)
    with open(path, "wb") as f:
        f.write(MAGIC)
        flags = (1 if cfg.part_level else 0) | (2 if cfg.hidden > 0 else 0)
        f.write(struct.pack(
            "<IIIIIIIIIII",
            FORMAT_VERSION, cfg.alpha, cfg.n_groups, cfg.n_layers,
            cfg.k_wrist, cfg.k_finger, cfg.code_dim, cfg.fps,
            cfg.variant.value, flags, cfg.hidden,
        ))
        f.write(struct.pack("<ddI", cfg.ema_decay, cfg.ema_eps, cfg.dead_code_patience))
        for part in cfg.part_names:
            codec = tok.codec(part)
            for layers in (codec.enc_layers, codec.dec_layers):
                for w, b in layers:
                    _write_array(f, w, "<f4")
                    _write_array(f, b, "<f4")
            for book in codec.books:
                flags_b = (1 if book.initialized else 0) | (2 if book.reserve_null else 0)
                f.write(struct.pack("<B", flags_b))
                _write_array(f, book.codes, "<f4")
                _write_array(f, book.ema_count, "<f4")
                _write_array(f, book.ema_sum, "<f4")
                _write_array(f, book.dead_streak, "<u4")
    sidecar = {
        "format": MAGIC.decode(), "version": FORMAT_VERSION,
        "alpha": cfg.alpha, "n_groups": cfg.n_groups, "n_layers": cfg.n_layers,
        "k_wrist": cfg.k_wrist, "k_finger": cfg.k_finger,
        "code_dim": cfg.code_dim, "fps": cfg.fps, "variant": cfg.variant.name,
        "part_level": cfg.part_level, "hidden": cfg.hidden,
        "ema_decay": cfg.ema_decay, "ema_eps": cfg.ema_eps,
        "dead_code_patience": cfg.dead_code_patience,
        "tokens_per_hand_second": cfg.tokens_per_hand_second,
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=2, sort_keys=True)
        f.write("\n")


def load_tokenizer(path) -> PartTokenizer:
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ConfigError(f"{path} is not a tokenizer model file")
        (version, alpha, n_groups, n_layers, k_wrist, k_finger, code_dim,
         fps, variant_dim, flags, hidden) = struct.unpack("<IIIIIIIIIII", f.read(44))
        if version != FORMAT_VERSION:
            raise ConfigError(f"unsupported model version {version}")
        ema_decay, ema_eps, patience = struct.unpack("<ddI", f.read(20))
        cfg = QuantizerConfig(
            alpha=alpha, n_groups=n_groups, n_layers=n_layers,
            k_wrist=k_wrist, k_finger=k_finger, code_dim=code_dim, fps=fps,
            variant=FeatureVariant(variant_dim), part_level=bool(flags & 1),
            hidden=hidden, ema_decay=ema_decay, ema_eps=ema_eps,
            dead_code_patience=patience,
        )
        tok = PartTokenizer(config=cfg)
        for part in cfg.part_names:
            width = len(cfg.part_columns(part)) * cfg.alpha
            d = cfg.code_dim
            if cfg.hidden > 0:
                enc_dims = [(width, cfg.hidden), (cfg.hidden, d)]
                dec_dims = [(d, cfg.hidden), (cfg.hidden, width)]
            else:
                enc_dims = [(width, d)]
                dec_dims = [(d, width)]
            enc_layers = []
            for i, o in enc_dims:
                enc_layers.append((_read_array(f, (i, o), "<f4"), _read_array(f, (o,), "<f4")))
            dec_layers = []
            for i, o in dec_dims:
                dec_layers.append((_read_array(f, (i, o), "<f4"), _read_array(f, (o,), "<f4")))
            k = cfg.part_codebook_size(part)
            books = []
            for _ in range(cfg.n_groups):
                (book_flags,) = struct.unpack("<B", f.read(1))
                codes = _read_array(f, (k, cfg.group_dim), "<f4")
                count = _read_array(f, (k,), "<f4")
                sums = _read_array(f, (k, cfg.group_dim), "<f4")
                streak_raw = f.read(4 * k)
                streak = np.frombuffer(streak_raw, dtype="<u4").astype(np.int64)
                books.append(Codebook(codes, count, sums, cfg.ema_decay,
                                      dead_streak=streak,
                                      initialized=bool(book_flags & 1),
                                      reserve_null=bool(book_flags & 2)))
            tok.parts[part] = PartCodec(enc_layers, dec_layers, books)
    return tok
