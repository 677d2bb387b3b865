"""Dataset mechanics: ingestion, cleaning, windowing, templates, balancing.

Records arrive as JSON-lines with per-frame MANO parameters for each hand
(an absent hand is an explicit null), camera intrinsics, and optional text
annotations. Cleaning repairs wrist teleports by interpolation, detects
left/right swaps, and splits records at unfixable gaps. Chunking tiles a
record into spans of at most ten seconds and slides one-second windows at
half-second stride inside them. Template instantiation turns annotated
windows into instruction samples for three task types (generation,
translation, prediction), each carrying full provenance so any sample can
be regenerated bit-for-bit. Corpus balancing up-samples under-represented
sources with pose-level depth/rotation augmentations.
"""

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .alignment import (
    AugmentRecord,
    CameraIntrinsics,
    FramePose,
    depth_scale_augment,
    inplane_rotate_augment,
    reexpress_in_frame,
    sample_reference_frame,
)
from .codec import Vocabulary, serialize_blocks, stream_to_text
from .errors import BalanceError, IngestError, InvalidInputError
from .mano import HandPose, default_skeleton
from .rotations import axis_angle_to_matrix, matrix_to_axis_angle, slerp
from .tokenizer import tokenize_motion

HANDS = ("left", "right")
TASKS = ("generation", "translation", "prediction")
TARGET_FPS = 15


@dataclass
class SequenceRecord:
    id: str
    source: str
    fps: float
    frames: dict                      # hand -> list[HandPose | None]
    intrinsics: CameraIntrinsics
    annotations: dict = None          # {"per_second": [...], "chunks": [...]}

    @property
    def n_frames(self) -> int:
        return len(self.frames["left"])

    def to_dict(self) -> dict:
        def enc(p):
            if p is None:
                return None
            return {"theta": p.theta.ravel().tolist(), "rrot": p.rrot.tolist(),
                    "tau": p.tau.tolist(), "beta": p.beta.tolist()}

        doc = {
            "id": self.id, "source": self.source, "fps": self.fps,
            "intrinsics": self.intrinsics.to_dict(),
            "frames": [
                {"t": i / self.fps,
                 "left": enc(self.frames["left"][i]),
                 "right": enc(self.frames["right"][i])}
                for i in range(self.n_frames)
            ],
        }
        if self.annotations is not None:
            doc["annotations"] = self.annotations
        return doc

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True).encode()


def _parse_hand(obj, side, where):
    if obj is None:
        return None
    for key, size in (("theta", 45), ("rrot", 3), ("tau", 3), ("beta", 10)):
        if key not in obj:
            raise IngestError(f"missing {where}.{key}", field=f"{where}.{key}")
        if len(obj[key]) != size:
            raise IngestError(
                f"{where}.{key} has {len(obj[key])} values, expected {size}",
                field=f"{where}.{key}",
            )
    try:
        return HandPose(np.array(obj["theta"], dtype=np.float64).reshape(15, 3),
                        np.array(obj["rrot"], dtype=np.float64),
                        np.array(obj["tau"], dtype=np.float64),
                        np.array(obj["beta"], dtype=np.float64), side)
    except Exception as e:
        raise IngestError(f"bad pose at {where}: {e}", field=where) from e


def _record_from_dict(doc, line_no) -> SequenceRecord:
    where = f"line {line_no}"
    for key in ("id", "source", "fps", "intrinsics", "frames"):
        if key not in doc:
            raise IngestError(f"missing field `{key}` at {where}", field=key)
    try:
        intr = CameraIntrinsics.from_dict(doc["intrinsics"])
    except Exception as e:
        raise IngestError(f"bad intrinsics at {where}: {e}", field="intrinsics") from e
    if doc["fps"] <= 0:
        raise IngestError(f"fps must be positive at {where}", field="fps")
    frames = {"left": [], "right": []}
    for i, fr in enumerate(doc["frames"]):
        for side in HANDS:
            if side not in fr:
                raise IngestError(f"missing frames[{i}].{side}", field=f"frames[{i}].{side}")
            frames[side].append(_parse_hand(fr[side], side, f"frames[{i}].{side}"))
    if len(frames["left"]) != len(frames["right"]):
        raise IngestError("hand arrays have unequal length", field="frames")
    return SequenceRecord(str(doc["id"]), str(doc["source"]), float(doc["fps"]),
                          frames, intr, doc.get("annotations"))


def _resample_nearest(rec: SequenceRecord, fps: float) -> SequenceRecord:
    if abs(rec.fps - fps) < 1e-9:
        return rec
    n_out = max(1, int(round(rec.n_frames * fps / rec.fps)))
    picks = np.minimum(np.round(np.arange(n_out) * rec.fps / fps).astype(int),
                       rec.n_frames - 1)
    frames = {h: [rec.frames[h][i] for i in picks] for h in HANDS}
    return SequenceRecord(rec.id, rec.source, fps, frames, rec.intrinsics,
                          rec.annotations)


def ingest(path) -> list:
    """Read and validate a JSON-lines record file; resample to 15 FPS."""
    records = []
    with open(path) as f:
        for line_no, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as e:
                raise IngestError(f"invalid JSON at line {line_no}: {e}") from e
            records.append(_resample_nearest(_record_from_dict(doc, line_no), TARGET_FPS))
    return records


# ---------------------------------------------------------------------------
# cleaning


@dataclass
class CleanReport:
    swaps: int = 0
    interpolated: int = 0
    splits: int = 0
    dropped: int = 0
    jump_energy_before: float = 0.0
    jump_energy_after: float = 0.0


@dataclass
class CleanResult:
    records: list
    report: CleanReport


def _wrist_energy(frames) -> float:
    total = 0.0
    for hand in HANDS:
        poses = frames[hand]
        for a, b in zip(poses, poses[1:]):
            if a is not None and b is not None:
                total += float(np.linalg.norm(b.tau - a.tau))
    return total


def _interp_pose(a: HandPose, b: HandPose, t: float) -> HandPose:
    ra = axis_angle_to_matrix(a.rrot)
    rb = axis_angle_to_matrix(b.rrot)
    rrot = matrix_to_axis_angle(slerp(ra, rb, t))
    theta = np.empty((15, 3))
    for j in range(15):
        theta[j] = matrix_to_axis_angle(
            slerp(axis_angle_to_matrix(a.theta[j]), axis_angle_to_matrix(b.theta[j]), t)
        )
    return HandPose(theta, rrot, (1 - t) * a.tau + t * b.tau, a.beta.copy(), a.side)


def clean_sequence(rec: SequenceRecord, jump_threshold: float = 0.15,
                   max_gap: int = 5) -> CleanResult:
    """Repair wrist discontinuities; swap mismatched hands; split long gaps.

    A frame is flagged when its wrist strays from the last trusted frame by
    more than jump_threshold per elapsed frame. Flagged runs of up to
    max_gap frames are filled by linear translation interpolation and
    rotation slerp between the surrounding trusted frames; longer runs
    split the record. When swapping the two hands at a discontinuity
    reduces both wrist jumps, the hands are swapped from there on.
    """
    if jump_threshold <= 0:
        raise InvalidInputError("jump threshold must be positive")
    report = CleanReport(jump_energy_before=_wrist_energy(rec.frames))
    frames = {h: list(rec.frames[h]) for h in HANDS}
    n = rec.n_frames

    # Left/right mismatch: swap the remainder when it shrinks both jumps.
    for t in range(1, n):
        la, lb = frames["left"][t - 1], frames["left"][t]
        ra, rb = frames["right"][t - 1], frames["right"][t]
        if None in (la, lb, ra, rb):
            continue
        jump_l = np.linalg.norm(lb.tau - la.tau)
        jump_r = np.linalg.norm(rb.tau - ra.tau)
        if max(jump_l, jump_r) <= jump_threshold:
            continue
        swap_l = np.linalg.norm(rb.tau - la.tau)
        swap_r = np.linalg.norm(lb.tau - ra.tau)
        if swap_l < jump_l and swap_r < jump_r:
            for u in range(t, n):
                l_p, r_p = frames["left"][u], frames["right"][u]
                frames["left"][u] = None if r_p is None else HandPose(
                    r_p.theta, r_p.rrot, r_p.tau, r_p.beta, "left")
                frames["right"][u] = None if l_p is None else HandPose(
                    l_p.theta, l_p.rrot, l_p.tau, l_p.beta, "right")
            report.swaps += 1

    # Flag frames that stray from the last trusted frame.
    bad = {h: np.zeros(n, dtype=bool) for h in HANDS}
    for hand in HANDS:
        poses = frames[hand]
        anchor = None
        for t in range(n):
            if poses[t] is None:
                continue
            if anchor is None:
                anchor = t
                continue
            step = np.linalg.norm(poses[t].tau - poses[anchor].tau)
            if step > jump_threshold * (t - anchor):
                bad[hand][t] = True
            else:
                anchor = t

    # Repair short gaps; collect split points for long ones.
    cuts = set()
    for hand in HANDS:
        poses = frames[hand]
        t = 0
        while t < n:
            if not bad[hand][t]:
                t += 1
                continue
            start = t
            while t < n and bad[hand][t]:
                t += 1
            end = t  # gap is [start, end)
            left_anchor = start - 1
            right_anchor = end if end < n else None
            gap = end - start
            if (gap <= max_gap and left_anchor >= 0 and right_anchor is not None
                    and poses[left_anchor] is not None and poses[right_anchor] is not None):
                a = poses[left_anchor]
                b = poses[right_anchor]
                for i, u in enumerate(range(start, end), start=1):
                    frac = i / (gap + 1)
                    poses[u] = _interp_pose(a, b, frac)
                    report.interpolated += 1
            else:
                cuts.add(start)
                cuts.add(end)

    # Split at cut points.
    bounds = sorted({0, n} | {c for c in cuts if 0 < c < n})
    pieces = []
    for lo, hi in zip(bounds, bounds[1:]):
        seg_bad = any(bad[h][lo:hi].any() and not all(
            frames[h][i] is not None for i in range(lo, hi)
        ) for h in HANDS)
        # Drop segments that are entirely flagged-and-unrepaired.
        still_bad = all(
            frames[h][i] is None or bad[h][i]
            for h in HANDS for i in range(lo, hi)
        ) if hi > lo else True
        if still_bad and len(bounds) > 2:
            report.dropped += hi - lo
            continue
        sub = {h: frames[h][lo:hi] for h in HANDS}
        suffix = "" if len(bounds) == 2 else f"#{len(pieces)}"
        pieces.append(SequenceRecord(rec.id + suffix, rec.source, rec.fps, sub,
                                     rec.intrinsics, rec.annotations))
    report.splits = max(0, len(pieces) - 1)
    report.jump_energy_after = sum(_wrist_energy(p.frames) for p in pieces)
    return CleanResult(pieces, report)


# ---------------------------------------------------------------------------
# chunking and windowing


@dataclass
class Chunk:
    index: int
    start_frame: int
    end_frame: int              # exclusive
    sub_second: bool
    ann_frame_indices: list     # 2 FPS sampling, metadata only


@dataclass
class Window:
    record_id: str
    chunk_index: int
    start_frame: int
    n_frames: int
    annotation: str = None

    @property
    def start_second(self) -> float:
        return self.start_frame / TARGET_FPS


def chunk_and_window(rec: SequenceRecord, chunk_seconds: float = 10.0,
                     window_seconds: float = 1.0, stride_seconds: float = 0.5,
                     ann_fps: float = 2.0):
    """Tile the record into chunks and overlapping one-second windows."""
    fps = rec.fps
    n = rec.n_frames
    chunk_len = int(round(chunk_seconds * fps))
    win_len = int(round(window_seconds * fps))
    chunks = []
    windows = []
    per_second = (rec.annotations or {}).get("per_second")
    for ci, lo in enumerate(range(0, n, chunk_len)):
        hi = min(n, lo + chunk_len)
        ann_step = fps / ann_fps
        ann_idx = [lo + int(round(k * ann_step)) for k in
                   range(int(np.ceil((hi - lo) / ann_step)))]
        ann_idx = [i for i in ann_idx if i < hi]
        chunks.append(Chunk(ci, lo, hi, sub_second=(hi - lo) < fps,
                            ann_frame_indices=ann_idx))
        j = 0
        while True:
            start = lo + int(round(j * stride_seconds * fps))
            if start + win_len > hi:
                break
            ann = None
            if per_second:
                sec = min(int(start // fps), len(per_second) - 1)
                ann = per_second[sec]
            windows.append(Window(rec.id, ci, start, win_len, ann))
            j += 1
    return chunks, windows


# ---------------------------------------------------------------------------
# instruction templates


@dataclass
class TemplateSet:
    by_task: dict   # task -> list of template strings

    def __post_init__(self):
        for task in TASKS:
            if task not in self.by_task or not self.by_task[task]:
                raise InvalidInputError(f"template set missing task {task!r}")
            for i, tpl in enumerate(self.by_task[task]):
                if "{duration}" not in tpl:
                    raise InvalidInputError(
                        f"{task} template {i} lacks a duration placeholder"
                    )

    @staticmethod
    def load(path) -> "TemplateSet":
        with open(path) as f:
            return TemplateSet(json.load(f))

    @staticmethod
    def default() -> "TemplateSet":
        ref = resources.files("hmt").joinpath("assets/templates_default.json")
        with resources.as_file(ref) as path:
            return TemplateSet.load(path)


@dataclass
class InstructionSample:
    task: str
    prompt: str
    target: object            # token id list (generation/prediction) or text
    duration: int             # seconds
    context: list = None      # token ids for prediction
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "task": self.task, "prompt": self.prompt,
            "target": self.target if isinstance(self.target, str)
            else [int(i) for i in self.target],
            "duration": self.duration,
            "context": None if self.context is None else [int(i) for i in self.context],
            "provenance": self.provenance,
        }


def _window_poses(rec: SequenceRecord, start: int, n: int) -> dict:
    out = {}
    for hand in HANDS:
        poses = rec.frames[hand][start : start + n]
        if all(p is not None for p in poses) and poses:
            out[hand] = poses
    return out


def _window_tokens(rec, start, n_frames, ref_idx, tok, vocab, skel):
    """Re-express the window in the reference frame and serialize its blocks."""
    poses = _window_poses(rec, start, n_frames)
    if not poses:
        return None
    ref_hand = "right" if rec.frames["right"][ref_idx] is not None else "left"
    ref_pose = rec.frames[ref_hand][ref_idx]
    ref = FramePose.of_pose(ref_pose) if ref_pose is not None else FramePose.identity()
    rel = {h: reexpress_in_frame(ps, ref) for h, ps in poses.items()}
    tokens = tokenize_motion(rel, tok, skel)
    return serialize_blocks(tokens, vocab)


def instantiate_templates(rec: SequenceRecord, windows, templates: TemplateSet,
                          tok, vocab: Vocabulary, rng, skel=None,
                          horizon_seconds: float = 10.0):
    """Build generation/translation/prediction samples from annotated windows.

    Windows without annotation text are skipped (counted). Each sample's
    provenance records the window span, sampled reference frame, and
    template index, which is enough to regenerate it bit-for-bit.
    """
    skel = skel if skel is not None else default_skeleton()
    samples = []
    skipped = 0
    win_by_start = {w.start_frame: w for w in windows}
    for w in windows:
        if w.annotation is None:
            skipped += 1
            continue
        ref_idx = sample_reference_frame(w.start_second, horizon_seconds, rec.fps,
                                         rec.n_frames, rng)
        stream = _window_tokens(rec, w.start_frame, w.n_frames, ref_idx, tok,
                                vocab, skel)
        if stream is None:
            skipped += 1
            continue
        base_prov = {
            "record_id": rec.id, "start_frame": w.start_frame,
            "n_frames": w.n_frames, "ref_frame": ref_idx, "augments": [],
        }
        dur = int(round(w.n_frames / rec.fps))

        t_gen = int(rng.integers(0, len(templates.by_task["generation"])))
        prompt = templates.by_task["generation"][t_gen].format(
            instruction=w.annotation, duration=dur)
        samples.append(InstructionSample(
            "generation", prompt, stream.ids.tolist(), dur,
            provenance={**base_prov, "task": "generation", "template": t_gen}))

        t_tr = int(rng.integers(0, len(templates.by_task["translation"])))
        prompt = templates.by_task["translation"][t_tr].format(
            motion=stream_to_text(stream, vocab, readable=True), duration=dur)
        samples.append(InstructionSample(
            "translation", prompt, w.annotation, dur,
            provenance={**base_prov, "task": "translation", "template": t_tr}))

        # Prediction: a whole-second window continues into the rest of its
        # chunk (whole seconds only).
        fps_i = int(rec.fps)
        if w.start_frame % fps_i == 0:
            chunk_len = int(round(10.0 * rec.fps))
            chunk_end = min(rec.n_frames, (w.chunk_index + 1) * chunk_len)
            tgt_start = w.start_frame + w.n_frames
            tgt_frames = ((chunk_end - tgt_start) // fps_i) * fps_i
            if tgt_frames >= fps_i:
                t_pr = int(rng.integers(0, len(templates.by_task["prediction"])))
                target_stream = _window_tokens(rec, tgt_start, tgt_frames,
                                               ref_idx, tok, vocab, skel)
                if target_stream is not None:
                    nxt = win_by_start.get(tgt_start)
                    tgt_dur = tgt_frames // fps_i
                    prompt = templates.by_task["prediction"][t_pr].format(
                        context=stream_to_text(stream, vocab, readable=True),
                        instruction=(nxt.annotation if nxt else None) or w.annotation,
                        duration=tgt_dur)
                    samples.append(InstructionSample(
                        "prediction", prompt, target_stream.ids.tolist(), tgt_dur,
                        context=stream.ids.tolist(),
                        provenance={**base_prov, "task": "prediction",
                                    "template": t_pr,
                                    "target_start": tgt_start,
                                    "target_frames": tgt_frames}))
    return samples, skipped


def replay_sample(rec: SequenceRecord, provenance: dict, templates: TemplateSet,
                  tok, vocab: Vocabulary, skel=None) -> InstructionSample:
    """Regenerate a sample from its provenance; must match the original bitwise."""
    skel = skel if skel is not None else default_skeleton()
    task = provenance["task"]
    start = provenance["start_frame"]
    n = provenance["n_frames"]
    ref_idx = provenance["ref_frame"]
    tpl = templates.by_task[task][provenance["template"]]
    stream = _window_tokens(rec, start, n, ref_idx, tok, vocab, skel)
    dur = int(round(n / rec.fps))
    _, windows = chunk_and_window(rec)
    ann = next((w.annotation for w in windows if w.start_frame == start), None)
    if task == "generation":
        prompt = tpl.format(instruction=ann, duration=dur)
        return InstructionSample(task, prompt, stream.ids.tolist(), dur,
                                 provenance=provenance)
    if task == "translation":
        prompt = tpl.format(motion=stream_to_text(stream, vocab, readable=True),
                            duration=dur)
        return InstructionSample(task, prompt, ann, dur, provenance=provenance)
    tgt = _window_tokens(rec, provenance["target_start"],
                         provenance["target_frames"], ref_idx, tok, vocab, skel)
    tgt_dur = int(round(provenance["target_frames"] / rec.fps))
    tgt_ann = next((w.annotation for w in windows
                    if w.start_frame == provenance["target_start"]), None)
    prompt = tpl.format(context=stream_to_text(stream, vocab, readable=True),
                        instruction=tgt_ann or ann, duration=tgt_dur)
    return InstructionSample(task, prompt, tgt.ids.tolist(), tgt_dur,
                             context=stream.ids.tolist(), provenance=provenance)


# ---------------------------------------------------------------------------
# corpus balancing


@dataclass
class BalanceEntry:
    sample_id: str
    source: str
    record_id: str
    augments: list               # AugmentRecord dicts
    record: SequenceRecord = None

    def manifest_dict(self) -> dict:
        return {"sample_id": self.sample_id, "source": self.source,
                "record_id": self.record_id, "augments": self.augments}


def _augment_record(rec: SequenceRecord, kind: str, value: float) -> SequenceRecord:
    frames = {}
    for hand in HANDS:
        poses = [p for p in rec.frames[hand] if p is not None]
        if len(poses) != rec.n_frames:
            frames[hand] = list(rec.frames[hand])
            continue
        if kind == "depth_scale":
            new, _, _ = depth_scale_augment(poses, None, rec.intrinsics, value,
                                            lambda_range=(value, value))
        else:
            new, _, _ = inplane_rotate_augment(poses, None, rec.intrinsics, value)
        frames[hand] = new
    return SequenceRecord(rec.id, rec.source, rec.fps, frames, rec.intrinsics,
                          rec.annotations)


def balance_corpus(records_by_source: dict, targets: dict, rng,
                   lambda_range=(0.7, 1.4)) -> tuple:
    """Up-sample under-represented sources with pose-level augmentations.

    Returns (entries, manifest_lines). Sources already at or above target
    contribute originals only (down-sampled deterministically when over);
    short sources are topped up with augmented copies of randomly chosen
    records, each carrying its augmentation parameters in the manifest.
    """
    entries = []
    for source in sorted(targets):
        target = targets[source]
        records = records_by_source.get(source, [])
        if not records and target > 0:
            raise BalanceError(f"source {source!r} is empty but target is {target}")
        originals = list(records)
        if len(originals) > target:
            keep = rng.choice(len(originals), size=target, replace=False)
            originals = [originals[i] for i in sorted(keep)]
        for rec in originals:
            entries.append(BalanceEntry(f"{source}/{rec.id}/orig", source, rec.id,
                                        [], rec))
        need = target - len(originals)
        for k in range(need):
            rec = records[int(rng.integers(0, len(records)))]
            if rng.random() < 0.5:
                lam = float(rng.uniform(*lambda_range))
                aug = AugmentRecord("depth_scale", lambda_s=lam,
                                    provenance=f"{source}/{rec.id}")
                new_rec = _augment_record(rec, "depth_scale", lam)
            else:
                phi = float(rng.uniform(-np.pi, np.pi))
                aug = AugmentRecord("inplane_rotation", phi=phi,
                                    provenance=f"{source}/{rec.id}")
                new_rec = _augment_record(rec, "inplane_rotation", phi)
            entries.append(BalanceEntry(f"{source}/{rec.id}/aug{k}", source, rec.id,
                                        [aug.to_dict()], new_rec))
    manifest = [json.dumps(e.manifest_dict(), sort_keys=True) for e in entries]
    return entries, manifest


def replay_balance_entry(entry_dict: dict, records_by_source: dict) -> SequenceRecord:
    """Rebuild a balanced record from its manifest line."""
    source = entry_dict["source"]
    rec = next(r for r in records_by_source[source] if r.id == entry_dict["record_id"])
    for aug in entry_dict["augments"]:
        if aug["kind"] == "depth_scale":
            rec = _augment_record(rec, "depth_scale", aug["lambda_s"])
        else:
            rec = _augment_record(rec, "inplane_rotation", aug["phi"])
    return rec
