"""Command-line entry point exposing the toolkit end to end.

Subcommands: synth, ingest, clean, window, templates, train-tokenizer,
tokenize, detokenize, align, augment, balance, validate-stream, evaluate.

Every command writes a machine-readable JSON report (report_version 1) when
--report is given; training progress goes to stderr. All randomness flows
from one --seed through named streams. Exit codes: 0 ok, 2 usage, 3 data,
4 numeric divergence. HMT_SEED / HMT_JOBS env vars provide defaults.
"""

import argparse
import json
import os
import sys
from multiprocessing import Pool

import numpy as np

from . import alignment as al
from . import codec
from . import metrics as mx
from . import pipeline as pl
from . import synth
from . import tokenizer as tk
from .errors import HmtError, UsageError
from .mano import FeatureVariant, _fk_batch, default_skeleton, encode_feature
from .rng import stream_rng

REPORT_VERSION = 1


def _env_int(name):
    val = os.environ.get(name)
    return int(val) if val is not None else None


def _require_seed(args):
    seed = args.seed if args.seed is not None else _env_int("HMT_SEED")
    if seed is None:
        raise UsageError("this command is stochastic; pass --seed (or set HMT_SEED)")
    return seed


def _write_report(args, payload):
    payload = {"report_version": REPORT_VERSION, "command": args.command, **payload}
    if getattr(args, "report", None):
        with open(args.report, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    return payload


def _log(msg):
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# data helpers


def _record_windows(records, variant, skel):
    """All whole-second single-hand feature windows of a record list."""
    windows = []
    for rec in records:
        for hand in pl.HANDS:
            poses = rec.frames[hand]
            if any(p is None for p in poses):
                continue
            fps = int(rec.fps)
            for start in range(0, (len(poses) // fps) * fps, fps):
                windows.append(encode_feature(poses[start:start + fps], variant, skel))
    return windows


def _tokenize_record(rec, tok, skel, reexpress):
    fps = int(rec.fps)
    hands = {}
    betas = {}
    for hand in pl.HANDS:
        poses = rec.frames[hand]
        if any(p is None for p in poses) or len(poses) < fps:
            continue
        whole = poses[: (len(poses) // fps) * fps]
        if reexpress == "first":
            whole = al.reexpress_in_frame(whole, al.FramePose.of_pose(whole[0]))
        hands[hand] = whole
        betas[hand] = poses[0].beta.tolist()
    if not hands:
        return None
    tokens = tk.tokenize_motion(hands, tok, skel)
    return tokens, betas


# ---------------------------------------------------------------------------
# command handlers


def cmd_synth(args):
    seed = _require_seed(args)
    rng = stream_rng(seed, "synth")
    with open(args.out, "w") as f:
        for i in range(args.records):
            doc = synth.synthetic_record_dict(
                rng, f"{args.source}-{i:05d}", args.seconds, 15, args.source)
            f.write(json.dumps(doc, sort_keys=True) + "\n")
    return _write_report(args, {"records": args.records, "seconds": args.seconds})


def cmd_ingest(args):
    records = pl.ingest(args.input)
    if args.out:
        with open(args.out, "w") as f:
            for rec in records:
                f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return _write_report(args, {
        "records": len(records),
        "frames": sum(r.n_frames for r in records),
    })


def cmd_clean(args):
    records = pl.ingest(args.input)
    cleaned = []
    totals = {"swaps": 0, "interpolated": 0, "splits": 0, "dropped": 0}
    for rec in records:
        result = pl.clean_sequence(rec, args.jump_threshold, args.max_gap)
        cleaned.extend(result.records)
        for key in totals:
            totals[key] += getattr(result.report, key)
    with open(args.out, "w") as f:
        for rec in cleaned:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return _write_report(args, {"records_in": len(records),
                                "records_out": len(cleaned), **totals})


def cmd_window(args):
    records = pl.ingest(args.input)
    n_chunks = 0
    rows = []
    for rec in records:
        chunks, windows = pl.chunk_and_window(rec)
        n_chunks += len(chunks)
        for w in windows:
            rows.append({"record_id": w.record_id, "chunk": w.chunk_index,
                         "start_frame": w.start_frame, "n_frames": w.n_frames,
                         "annotation": w.annotation})
    if args.out:
        with open(args.out, "w") as f:
            for row in rows:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    return _write_report(args, {"records": len(records), "chunks": n_chunks,
                                "windows": len(rows)})


def cmd_templates(args):
    seed = _require_seed(args)
    records = pl.ingest(args.input)
    tok = tk.load_tokenizer(args.model)
    vocab = (codec.Vocabulary.load(args.vocab) if args.vocab
             else codec.Vocabulary.default(tok.config.motion_vocab_size))
    templates = (pl.TemplateSet.load(args.templates) if args.templates
                 else pl.TemplateSet.default())
    skel = default_skeleton()
    rng = stream_rng(seed, "templates")
    all_samples = []
    skipped = 0
    for rec in records:
        _, windows = pl.chunk_and_window(rec)
        samples, miss = pl.instantiate_templates(rec, windows, templates, tok,
                                                 vocab, rng, skel)
        all_samples.extend(samples)
        skipped += miss
    with open(args.out, "w") as f:
        for s in all_samples:
            f.write(json.dumps(s.to_dict(), sort_keys=True) + "\n")
    by_task = {t: sum(1 for s in all_samples if s.task == t) for t in pl.TASKS}
    return _write_report(args, {"samples": len(all_samples), "skipped": skipped,
                                "by_task": by_task})


def cmd_train_tokenizer(args):
    seed = _require_seed(args)
    skel = default_skeleton()
    variant = FeatureVariant[args.variant]
    if args.synthetic:
        rng = stream_rng(seed, "train-corpus")
        windows = synth.synthetic_windows(rng, args.synthetic, variant, skel)
    else:
        if not args.input:
            raise UsageError("train-tokenizer needs --in records or --synthetic N")
        windows = _record_windows(pl.ingest(args.input), variant, skel)
    if not windows:
        raise UsageError("no whole-second windows available for training")
    cfg = tk.QuantizerConfig(
        alpha=args.alpha, n_groups=args.groups, n_layers=args.layers,
        k_wrist=args.k_wrist, k_finger=args.k_finger, code_dim=args.dim,
        fps=15, variant=variant, ema_decay=args.ema_decay,
    )
    tok, history = tk.train_tokenizer(
        windows, cfg, epochs=args.epochs, seed=seed, lam1=args.lambda1,
        lam2=args.lambda2, lr=args.lr, batch_size=args.batch_size,
        log=lambda e, r: _log(f"epoch {e}: total={r.total:.6f} recon={r.recon:.6f}"),
    )
    tk.save_tokenizer(tok, args.out)
    if args.vocab_out:
        codec.Vocabulary.default(cfg.motion_vocab_size).save(args.vocab_out)
    return _write_report(args, {
        "windows": len(windows), "epochs": args.epochs,
        "final_loss": history[-1].total if history else None,
        "tokens_per_hand_second": cfg.tokens_per_hand_second,
        "model": str(args.out),
    })


def cmd_tokenize(args):
    tok = tk.load_tokenizer(args.model)
    vocab = (codec.Vocabulary.load(args.vocab) if args.vocab
             else codec.Vocabulary.default(tok.config.motion_vocab_size))
    skel = default_skeleton()
    records = pl.ingest(args.input)
    n_blocks = 0
    n_tokens = 0
    with open(args.out, "w") as f:
        for rec in records:
            result = _tokenize_record(rec, tok, skel, args.reexpress)
            if result is None:
                continue
            tokens, betas = result
            stream = codec.serialize_blocks(tokens, vocab)
            n_blocks += tokens.n_blocks
            n_tokens += int(stream.ids.size)
            f.write(json.dumps({
                "id": rec.id,
                "hands": sorted(tokens.hands.keys()),
                "betas": betas,
                "ids": stream.ids.tolist(),
            }, sort_keys=True) + "\n")
    return _write_report(args, {"records": len(records), "blocks": n_blocks,
                                "stream_tokens": n_tokens,
                                "tokens_per_hand_second": tok.config.tokens_per_hand_second})


def cmd_detokenize(args):
    tok = tk.load_tokenizer(args.model)
    vocab = (codec.Vocabulary.load(args.vocab) if args.vocab
             else codec.Vocabulary.default(tok.config.motion_vocab_size))
    skel = default_skeleton()
    cfg = tok.config
    intr = al.CameraIntrinsics(500.0, 500.0, 320.0, 240.0, 640, 480)
    out_records = []
    with open(args.input) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            doc = json.loads(line)
            parsed = codec.parse_stream(np.array(doc["ids"]), vocab,
                                        cfg.tokens_per_hand_second)
            if not parsed.valid:
                raise HmtError(
                    f"stream for record {doc['id']} invalid at {parsed.position}: "
                    f"{parsed.reason}"
                )
            blocks = [seg for seg in parsed.segments if seg.kind == "motion"]
            hands_present = doc["hands"]
            per_hand = {h: [] for h in hands_present}
            for i, seg in enumerate(blocks):
                hand = hands_present[i % len(hands_present)]
                ids = np.array(doc["ids"][seg.start + 1 : seg.end - 1])
                per_hand[hand].append(ids - vocab.motion_range[0])
            tokens = tk.MotionTokens(per_hand, cfg.tokens_per_hand_second)
            betas = {h: np.array(doc["betas"][h]) for h in hands_present}
            poses = tk.detokenize_motion(tokens, tok, betas, skel)
            n = max(len(v) for v in poses.values())
            frames = {
                h: poses.get(h, [None] * n) + [None] * (n - len(poses.get(h, [])))
                for h in pl.HANDS
            }
            out_records.append(pl.SequenceRecord(doc["id"], "detok", cfg.fps,
                                                 frames, intr))
    with open(args.out, "w") as f:
        for rec in out_records:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    return _write_report(args, {"records": len(out_records)})


def cmd_align(args):
    src = al.CameraIntrinsics.load(args.intrinsics)
    if args.normalize_fov:
        dst = al.normalize_fov(src)
    elif args.target:
        dst = al.CameraIntrinsics.load(args.target)
    else:
        raise UsageError("align needs --target intrinsics or --normalize-fov")
    amap = al.weak_perspective_map(src, dst)
    if args.image and args.out:
        img = al.Image.load(args.image)
        al.remap_image(img, amap, dst).save(args.out)
    if args.intrinsics_out:
        dst.save(args.intrinsics_out)
    return _write_report(args, {"sx": amap.sx, "sy": amap.sy,
                                "dx": amap.dx, "dy": amap.dy,
                                "target": dst.to_dict()})


def cmd_augment(args):
    records = pl.ingest(args.input)
    recs_out = []
    manifest = []
    if args.value is not None:
        values = [args.value] * len(records)
    else:
        seed = _require_seed(args)
        rng = stream_rng(seed, "augment")
        if args.kind == "depth":
            values = [float(rng.uniform(args.lambda_min, args.lambda_max))
                      for _ in records]
        else:
            values = [float(rng.uniform(-np.pi, np.pi)) for _ in records]
    for rec, value in zip(records, values):
        kind = "depth_scale" if args.kind == "depth" else "inplane_rotation"
        recs_out.append(pl._augment_record(rec, kind, value))
        manifest.append(al.AugmentRecord(
            kind, lambda_s=value if kind == "depth_scale" else None,
            phi=value if kind == "inplane_rotation" else None,
            provenance=rec.id))
    with open(args.out, "w") as f:
        for rec in recs_out:
            f.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")
    if args.manifest:
        al.append_manifest(args.manifest, manifest)
    return _write_report(args, {"records": len(recs_out), "kind": args.kind})


def cmd_balance(args):
    seed = _require_seed(args)
    records = pl.ingest(args.input)
    by_source = {}
    for rec in records:
        by_source.setdefault(rec.source, []).append(rec)
    targets = {}
    for part in args.targets.split(","):
        name, _, count = part.partition("=")
        if not count:
            raise UsageError(f"bad --targets entry {part!r}; use source=count")
        targets[name.strip()] = int(count)
    rng = stream_rng(seed, "balance")
    entries, manifest = pl.balance_corpus(by_source, targets, rng,
                                          lambda_range=(args.lambda_min, args.lambda_max))
    with open(args.out, "w") as f:
        f.write("\n".join(manifest) + ("\n" if manifest else ""))
    if args.records_out:
        with open(args.records_out, "w") as f:
            for e in entries:
                f.write(json.dumps(e.record.to_dict(), sort_keys=True) + "\n")
    per_source = {s: sum(1 for e in entries if e.source == s) for s in targets}
    return _write_report(args, {"entries": len(entries), "per_source": per_source,
                                "augmented": sum(1 for e in entries if e.augments)})


def cmd_validate_stream(args):
    vocab = codec.Vocabulary.load(args.vocab)
    streams = []
    with open(args.input) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                streams.append(np.array(json.loads(line)["ids"], dtype=np.int64))
            else:
                streams.append(codec.text_to_stream(line, vocab).ids)
    rate = mx.valid_rate(streams, vocab, args.block_size)
    return _write_report(args, {"streams": len(streams), "valid_rate": rate})


def _record_joints(rec, skel):
    """Per-hand FK joints for frames where the hand is present."""
    out = {}
    for hand in pl.HANDS:
        poses = [p for p in rec.frames[hand] if p is not None]
        if not poses:
            continue
        out[hand] = _fk_batch(
            np.stack([p.theta for p in poses]), np.stack([p.rrot for p in poses]),
            np.stack([p.tau for p in poses]), np.stack([p.beta for p in poses]), skel)
    return out


def _pair_metrics(pair):
    pred_rec, gt_rec = pair
    skel = default_skeleton()
    pj = _record_joints(pred_rec, skel)
    gj = _record_joints(gt_rec, skel)
    rows = []
    for hand in sorted(set(pj) & set(gj)):
        a, b = pj[hand], gj[hand]
        t = min(len(a), len(b))
        rows.append((mx.mpjpe(a[:t], b[:t]), mx.mwte(a[:t], b[:t]),
                     mx.pa_mpjpe(a[:t], b[:t])))
    return rows


def _record_embedding(rec, skel):
    """Mean-pooled parameter features; stand-in embedding for distribution metrics."""
    feats = []
    for hand in pl.HANDS:
        poses = [p for p in rec.frames[hand] if p is not None]
        if poses:
            fs = encode_feature(poses, FeatureVariant.D51, skel)
            feats.append(fs.data.mean(axis=0))
    if not feats:
        return np.zeros(51)
    return np.mean(feats, axis=0)


def cmd_evaluate(args):
    pred = pl.ingest(args.pred)
    gt = pl.ingest(args.gt)
    if len(pred) != len(gt):
        raise HmtError(f"prediction count {len(pred)} != ground-truth count {len(gt)}")
    pairs = list(zip(pred, gt))
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)
    if jobs > 1 and len(pairs) > 1:
        with Pool(min(jobs, len(pairs))) as pool:
            per_pair = pool.map(_pair_metrics, pairs)
    else:
        per_pair = [_pair_metrics(p) for p in pairs]
    rows = [row for rows_ in per_pair for row in rows_]
    if not rows:
        raise HmtError("no overlapping hands between prediction and ground truth")
    arr = np.array(rows)
    skel = default_skeleton()
    emb_pred = np.stack([_record_embedding(r, skel) for r in pred])
    emb_gt = np.stack([_record_embedding(r, skel) for r in gt])
    fid = (mx.frechet_distance(emb_pred, emb_gt)
           if len(pred) >= 2 else None)
    r_at_k = (mx.retrieval_topk(emb_pred, emb_gt, np.arange(len(pred)),
                                k=min(args.k, len(gt)))
              if len(pred) >= 1 else None)
    rate = None
    if args.streams and args.vocab:
        vocab = codec.Vocabulary.load(args.vocab)
        with open(args.streams) as f:
            streams = [np.array(json.loads(l)["ids"]) if l.startswith("{")
                       else codec.text_to_stream(l, vocab).ids
                       for l in (x.strip() for x in f) if l]
        rate = mx.valid_rate(streams, vocab, args.block_size)
    return _write_report(args, {
        "pairs": len(pairs),
        "mpjpe": float(arr[:, 0].mean()),
        "mwte": float(arr[:, 1].mean()),
        "pa_mpjpe": float(arr[:, 2].mean()),
        "fid": fid,
        "r_at_k": r_at_k,
        "valid_rate": rate,
    })


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = argparse.ArgumentParser(
        prog="hmt",
        description="Hand-motion tokenization, alignment, and evaluation toolkit",
    )
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=False):
        sp.add_argument("--report", help="write a JSON report here")
        if seed:
            sp.add_argument("--seed", type=int,
                            default=_env_int("HMT_SEED"),
                            help="master seed (or HMT_SEED)")

    sp = sub.add_parser("synth", help="generate a synthetic record corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--records", type=int, default=10)
    sp.add_argument("--seconds", type=float, default=2.0)
    sp.add_argument("--source", default="synth")
    common(sp, seed=True)
    sp.set_defaults(handler=cmd_synth)

    sp = sub.add_parser("ingest", help="validate and resample a record file")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(handler=cmd_ingest)

    sp = sub.add_parser("clean", help="repair discontinuities and hand swaps")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--jump-threshold", type=float, default=0.15)
    sp.add_argument("--max-gap", type=int, default=5)
    common(sp)
    sp.set_defaults(handler=cmd_clean)

    sp = sub.add_parser("window", help="chunk records and emit windows")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out")
    common(sp)
    sp.set_defaults(handler=cmd_window)

    sp = sub.add_parser("templates", help="instantiate instruction samples")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--model", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--templates")
    common(sp, seed=True)
    sp.set_defaults(handler=cmd_templates)

    sp = sub.add_parser("train-tokenizer", help="train a motion tokenizer")
    sp.add_argument("--in", dest="input")
    sp.add_argument("--synthetic", type=int,
                    help="train on N procedurally generated windows")
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab-out")
    sp.add_argument("--alpha", type=int, default=4)
    sp.add_argument("--groups", type=int, default=2)
    sp.add_argument("--layers", type=int, default=8)
    sp.add_argument("--k-wrist", type=int, default=1536)
    sp.add_argument("--k-finger", type=int, default=1536)
    sp.add_argument("--dim", type=int, default=128)
    sp.add_argument("--variant", default="D162",
                    choices=[v.name for v in FeatureVariant])
    sp.add_argument("--epochs", type=int, default=16)
    sp.add_argument("--lr", type=float, default=1e-4)
    sp.add_argument("--batch-size", type=int, default=64)
    sp.add_argument("--lambda1", type=float, default=0.02)
    sp.add_argument("--lambda2", type=float, default=1.0)
    sp.add_argument("--ema-decay", type=float, default=0.97)
    common(sp, seed=True)
    sp.set_defaults(handler=cmd_train_tokenizer)

    sp = sub.add_parser("tokenize", help="records -> token streams")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab")
    sp.add_argument("--reexpress", choices=["first", "none"], default="first")
    common(sp)
    sp.set_defaults(handler=cmd_tokenize)

    sp = sub.add_parser("detokenize", help="token streams -> records")
    sp.add_argument("--model", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab")
    common(sp)
    sp.set_defaults(handler=cmd_detokenize)

    sp = sub.add_parser("align", help="weak-perspective remap / FoV normalization")
    sp.add_argument("--intrinsics", required=True)
    sp.add_argument("--target")
    sp.add_argument("--normalize-fov", action="store_true")
    sp.add_argument("--image")
    sp.add_argument("--out")
    sp.add_argument("--intrinsics-out")
    common(sp)
    sp.set_defaults(handler=cmd_align)

    sp = sub.add_parser("augment", help="depth/rotation augmentation of records")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--kind", choices=["depth", "rotation"], required=True)
    sp.add_argument("--value", type=float, help="fixed parameter; omit for random")
    sp.add_argument("--lambda-min", type=float, default=0.7)
    sp.add_argument("--lambda-max", type=float, default=1.4)
    sp.add_argument("--manifest")
    common(sp, seed=True)
    sp.set_defaults(handler=cmd_augment)

    sp = sub.add_parser("balance", help="balance per-source corpus counts")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--targets", required=True, help="src1=100,src2=50")
    sp.add_argument("--out", required=True, help="manifest JSONL")
    sp.add_argument("--records-out")
    sp.add_argument("--lambda-min", type=float, default=0.7)
    sp.add_argument("--lambda-max", type=float, default=1.4)
    common(sp, seed=True)
    sp.set_defaults(handler=cmd_balance)

    sp = sub.add_parser("validate-stream", help="free-format stream validation")
    sp.add_argument("--vocab", required=True)
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--block-size", type=int, default=128)
    common(sp)
    sp.set_defaults(handler=cmd_validate_stream)

    sp = sub.add_parser("evaluate", help="pose-error and distribution metrics")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--gt", required=True)
    sp.add_argument("--streams")
    sp.add_argument("--vocab")
    sp.add_argument("--block-size", type=int, default=128)
    sp.add_argument("--k", type=int, default=3)
    sp.add_argument("--jobs", type=int, default=_env_int("HMT_JOBS"))
    common(sp)
    sp.set_defaults(handler=cmd_evaluate)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        payload = args.handler(args)
        if not getattr(args, "report", None):
            # Reports belong in files; the summary is a log line.
            _log(json.dumps(payload, sort_keys=True))
        return 0
    except HmtError as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
