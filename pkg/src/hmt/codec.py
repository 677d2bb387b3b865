"""Motion-block token streams: serialization, validation, decoding masks.

A motion block is a delimited run of exactly `block_size` motion-range ids
between the open and close markers. Streams mix text ids, motion blocks,
and opaque image spans. The free-format validator classifies a stream and
reports the first violation; the block-formatted mask constrains sampling
so a violation can never be produced; the soft mode re-anchors each block
by blending predicted and reference poses and re-quantizing.

Losses: per-token cross entropy; percentile filtering of extreme token
losses (nearest-rank, inclusive); stochastic masking of non-motion logits
on motion-labeled positions.
"""

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InvalidInputError,
    ModeError,
    SerializationError,
)
from .mano import HandPose
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle, matrix_to_rot6d, rot6d_to_matrix
from .tokenizer import MotionTokens, tokenize_motion

SPECIAL_NAMES = ("MOT_OPEN", "MOT_CLOSE", "IMG_OPEN", "IMG_CLOSE", "IMG_CONTEXT", "EOS")
_TAGS = {
    "MOT_OPEN": "<MOT>", "MOT_CLOSE": "</MOT>", "IMG_OPEN": "<IMG>",
    "IMG_CLOSE": "</IMG>", "IMG_CONTEXT": "<IMG_CONTEXT>", "EOS": "<EOS>",
}


@dataclass(frozen=True)
class Vocabulary:
    text_range: tuple     # [lo, hi)
    motion_range: tuple   # [lo, hi)
    specials: dict        # name -> id

    def __post_init__(self):
        t0, t1 = self.text_range
        m0, m1 = self.motion_range
        if not (t0 < t1 and m0 < m1):
            raise InvalidInputError("vocabulary ranges must be non-empty")
        if max(t0, m0) < min(t1, m1):
            raise InvalidInputError("text and motion ranges overlap")
        missing = [n for n in SPECIAL_NAMES if n not in self.specials]
        if missing:
            raise InvalidInputError(f"vocabulary missing specials {missing}")
        ids = list(self.specials.values())
        if len(set(ids)) != len(ids):
            raise InvalidInputError("special token ids collide")
        for name, sid in self.specials.items():
            if t0 <= sid < t1 or m0 <= sid < m1:
                raise InvalidInputError(f"special {name} falls inside a range")

    @staticmethod
    def default(k_motion: int, n_text: int = 1000) -> "Vocabulary":
        m0 = n_text
        m1 = n_text + k_motion
        specials = {name: m1 + i for i, name in enumerate(SPECIAL_NAMES)}
        return Vocabulary((0, n_text), (m0, m1), specials)

    @property
    def size(self) -> int:
        return max(self.text_range[1], self.motion_range[1],
                   max(self.specials.values()) + 1)

    def is_text(self, i) -> bool:
        return self.text_range[0] <= i < self.text_range[1]

    def is_motion(self, i) -> bool:
        return self.motion_range[0] <= i < self.motion_range[1]

    def special(self, name: str) -> int:
        return self.specials[name]

    @staticmethod
    def load(path) -> "Vocabulary":
        with open(path) as f:
            d = json.load(f)
        return Vocabulary(tuple(d["text_range"]), tuple(d["motion_range"]),
                          dict(d["specials"]))

    def save(self, path):
        doc = {"text_range": list(self.text_range),
               "motion_range": list(self.motion_range),
               "specials": dict(self.specials)}
        with open(path, "w") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")


@dataclass
class Segment:
    kind: str    # text | motion | image
    start: int
    end: int     # exclusive


@dataclass
class TokenStream:
    ids: np.ndarray
    segments: list = None

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)


@dataclass
class ParseResult:
    valid: bool
    segments: list = field(default_factory=list)
    position: int = None
    reason: str = None


# ---------------------------------------------------------------------------
# serialization and parsing


def serialize_blocks(tokens: MotionTokens, vocab: Vocabulary) -> TokenStream:
    """Each hand-second becomes MOT_OPEN, block ids, MOT_CLOSE."""
    m0, m1 = vocab.motion_range
    k = m1 - m0
    ids = []
    segments = []
    for _, _, block in tokens.blocks():
        block = np.asarray(block)
        if block.size != tokens.tokens_per_block:
            raise SerializationError(
                f"partial block of {block.size} ids (expected {tokens.tokens_per_block})"
            )
        if np.any(block < 0) or np.any(block >= k):
            raise SerializationError("motion id outside the vocabulary motion range")
        start = len(ids)
        ids.append(vocab.special("MOT_OPEN"))
        ids.extend((block + m0).tolist())
        ids.append(vocab.special("MOT_CLOSE"))
        segments.append(Segment("motion", start, len(ids)))
    return TokenStream(np.array(ids, dtype=np.int64), segments)


def parse_stream(stream, vocab: Vocabulary, block_size: int = 128) -> ParseResult:
    """Free-format validator; verdict plus segments or first violation."""
    ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream, dtype=np.int64)
    segments = []
    mot_open = vocab.special("MOT_OPEN")
    mot_close = vocab.special("MOT_CLOSE")
    img_open = vocab.special("IMG_OPEN")
    img_close = vocab.special("IMG_CLOSE")
    eos = vocab.special("EOS")

    def reject(pos, reason):
        return ParseResult(False, [], pos, reason)

    state = "outside"
    seg_start = 0
    in_block_count = 0
    text_open = False

    for pos, tid in enumerate(ids.tolist()):
        if state == "outside":
            if tid == mot_open:
                if text_open:
                    segments.append(Segment("text", seg_start, pos))
                    text_open = False
                state = "block"
                seg_start = pos
                in_block_count = 0
            elif tid == img_open:
                if text_open:
                    segments.append(Segment("text", seg_start, pos))
                    text_open = False
                state = "image"
                seg_start = pos
            elif tid == mot_close:
                return reject(pos, "unmatched block close")
            elif tid == img_close:
                return reject(pos, "unmatched image close")
            elif vocab.is_motion(tid):
                return reject(pos, "motion id outside a block")
            elif vocab.is_text(tid) or tid == eos or tid == vocab.special("IMG_CONTEXT"):
                if not text_open:
                    text_open = True
                    seg_start = pos
            else:
                return reject(pos, "unknown id")
        elif state == "block":
            if vocab.is_motion(tid):
                in_block_count += 1
                if in_block_count > block_size:
                    return reject(pos, "long block")
            elif tid == mot_close:
                if in_block_count != block_size:
                    return reject(pos, "short block")
                segments.append(Segment("motion", seg_start, pos + 1))
                state = "outside"
            else:
                return reject(pos, "non-motion id inside a block")
        else:  # image span: opaque until close
            if tid == img_close:
                segments.append(Segment("image", seg_start, pos + 1))
                state = "outside"
            elif tid == img_open:
                return reject(pos, "nested image span")

    n = len(ids)
    if state == "block":
        return reject(n - 1 if n else 0, "unclosed block")
    if state == "image":
        return reject(n - 1 if n else 0, "unclosed image span")
    if text_open:
        segments.append(Segment("text", seg_start, n))
    return ParseResult(True, segments)


# ---------------------------------------------------------------------------
# constrained decoding


@dataclass
class DecodeState:
    mode: str = "block"            # free | block | soft
    inside_block: bool = False
    emitted_in_block: int = 0
    blocks_done: int = 0
    target_blocks: int = None

    def advance(self, token_id: int, vocab: Vocabulary, block_size: int = 128):
        """Update counters after a sampled token."""
        if token_id == vocab.special("MOT_OPEN"):
            self.inside_block = True
            self.emitted_in_block = 0
        elif token_id == vocab.special("MOT_CLOSE"):
            self.inside_block = False
            self.blocks_done += 1
        elif self.inside_block and vocab.is_motion(token_id):
            self.emitted_in_block += 1
        return self


def allowed_mask(state: DecodeState, vocab: Vocabulary, block_size: int = 128) -> np.ndarray:
    """Boolean mask over the vocabulary of ids permitted next.

    Inside a block only motion ids are allowed until the block is full,
    then only the close marker. Outside, text and a new block opener;
    the end-of-sequence id stays masked until the target block count is
    reached (always allowed when no target is set).
    """
    if state.mode == "free":
        raise ModeError("allowed_mask applies to block/soft modes only")
    mask = np.zeros(vocab.size, dtype=bool)
    if state.inside_block:
        if state.emitted_in_block < block_size:
            mask[vocab.motion_range[0] : vocab.motion_range[1]] = True
        else:
            mask[vocab.special("MOT_CLOSE")] = True
        return mask
    mask[vocab.text_range[0] : vocab.text_range[1]] = True
    if state.target_blocks is None:
        mask[vocab.special("MOT_OPEN")] = True
        mask[vocab.special("EOS")] = True
    elif state.blocks_done < state.target_blocks:
        mask[vocab.special("MOT_OPEN")] = True
    else:
        mask[vocab.special("EOS")] = True
    return mask


def blend_poses(pred, gt):
    """Per-parameter mean; rotations averaged in 6D then re-orthonormalized."""
    if len(pred) != len(gt):
        raise InvalidInputError(f"block shapes differ: {len(pred)} vs {len(gt)}")
    out = []
    for a, b in zip(pred, gt):
        rrot6 = 0.5 * (matrix_to_rot6d(axis_angle_to_matrix(a.rrot))
                       + matrix_to_rot6d(axis_angle_to_matrix(b.rrot)))
        theta6 = 0.5 * (matrix_to_rot6d(axis_angle_to_matrix(a.theta))
                        + matrix_to_rot6d(axis_angle_to_matrix(b.theta)))
        out.append(HandPose(
            theta=matrix_to_axis_angle(rot6d_to_matrix(theta6)),
            rrot=matrix_to_axis_angle(rot6d_to_matrix(rrot6)),
            tau=0.5 * (a.tau + b.tau),
            beta=0.5 * (a.beta + b.beta),
            side=b.side,
        ))
    return out


def soft_blend(pred_poses, gt_poses, tok, skel=None, hand: str = "right") -> MotionTokens:
    """Mean of predicted and reference poses, re-quantized through `tok`."""
    blended = blend_poses(pred_poses, gt_poses)
    return tokenize_motion({hand: blended}, tok, skel)


# ---------------------------------------------------------------------------
# training-side utilities


@dataclass(frozen=True)
class LossFilterConfig:
    q_low: float = 15.0
    q_high: float = 95.0
    mask_prob: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.q_low < self.q_high <= 100.0):
            raise InvalidInputError("percentile bounds must satisfy 0 <= low < high <= 100")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise InvalidInputError("mask probability must lie in [0, 1]")


def logit_mask(logits: np.ndarray, label_is_motion: bool, p: float, rng,
               vocab: Vocabulary) -> np.ndarray:
    """With probability p on motion labels, sink non-motion logits.

    The sink value is the most negative finite value of the dtype, so a
    downstream softmax stays finite. Motion-range entries pass through
    bitwise; text labels are never masked.
    """
    if not 0.0 <= p <= 1.0:
        raise InvalidInputError("p must lie in [0, 1]")
    if not label_is_motion or rng.random() >= p:
        return logits
    out = np.full_like(logits, np.finfo(logits.dtype).min)
    m0, m1 = vocab.motion_range
    out[..., m0:m1] = logits[..., m0:m1]
    return out


def _nearest_rank(sorted_vals: np.ndarray, q: float) -> float:
    n = len(sorted_vals)
    rank = max(1, int(np.ceil(q / 100.0 * n)))
    return float(sorted_vals[rank - 1])


def filtered_motion_loss(losses, cfg: LossFilterConfig) -> float:
    """Mean of losses inside the [q_low, q_high] nearest-rank percentiles.

    Falls back to the plain mean if the filter empties the set.
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size == 0:
        raise InvalidInputError("empty loss list")
    s = np.sort(losses)
    lo = _nearest_rank(s, cfg.q_low)
    hi = _nearest_rank(s, cfg.q_high)
    kept = losses[(losses >= lo) & (losses <= hi)]
    if kept.size == 0:
        return float(losses.mean())
    return float(kept.mean())


def token_cross_entropy(logits, labels, mask=None) -> float:
    """Mean negative log-softmax of the labels over unmasked positions."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or logits.shape[0] != labels.shape[0]:
        raise InvalidInputError(
            f"logits {logits.shape} and labels {labels.shape} are misaligned"
        )
    if mask is None:
        mask = np.ones(len(labels), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != labels.shape:
            raise InvalidInputError("mask length does not match labels")
    if not np.any(mask):
        return 0.0
    sel = logits[mask]
    lab = labels[mask]
    peak = sel.max(axis=1, keepdims=True)
    lse = peak[:, 0] + np.log(np.exp(sel - peak).sum(axis=1))
    return float(np.mean(lse - sel[np.arange(len(lab)), lab]))


# ---------------------------------------------------------------------------
# text round trip


def stream_to_text(stream, vocab: Vocabulary, readable: bool = False) -> str:
    """Whitespace-separated ids, or readable tags for specials/motion ids."""
    ids = stream.ids if isinstance(stream, TokenStream) else np.asarray(stream)
    if not readable:
        return " ".join(str(int(i)) for i in ids)
    by_id = {sid: _TAGS[name] for name, sid in vocab.specials.items()}
    parts = []
    for i in ids.tolist():
        if i in by_id:
            parts.append(by_id[i])
        elif vocab.is_motion(i):
            parts.append(f"m_{i - vocab.motion_range[0]}")
        else:
            parts.append(str(i))
    return " ".join(parts)


def text_to_stream(text: str, vocab: Vocabulary) -> TokenStream:
    by_tag = {_TAGS[name]: sid for name, sid in vocab.specials.items()}
    ids = []
    for tokn in text.split():
        if tokn in by_tag:
            ids.append(by_tag[tokn])
        elif tokn.startswith("m_"):
            ids.append(vocab.motion_range[0] + int(tokn[2:]))
        else:
            ids.append(int(tokn))
    return TokenStream(np.array(ids, dtype=np.int64))
