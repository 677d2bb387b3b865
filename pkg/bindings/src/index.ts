/**
 * Array-based bindings to the hand-motion tokenization toolkit.
 *
 * The toolkit's numerics run in its own process; this package exchanges
 * arrays with it through the documented file formats (JSON-lines records,
 * token stream files, JSON reports) and the command-line interface. Every
 * bound call is a pure delegate: outputs are bit-identical to what the CLI
 * produces for the same inputs, and no call mutates toolkit state.
 *
 * A pose row is 51 numbers: wrist rotation (axis-angle, 3), wrist
 * translation (meters, 3), then 15 joint rotations (axis-angle, 45).
 * Handles are not shareable across worker threads; concurrent use of
 * distinct handles is safe.
 */

import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync, writeFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";

export const POSE_WIDTH = 51;

/** Error from the toolkit process, carrying its exit code. */
export class HmtError extends Error {
  constructor(message: string, public readonly exitCode: number) {
    super(message);
    this.name = "HmtError";
  }
}

export type Hand = "left" | "right";
export type PoseRows = number[][]; // T x 51
export type HandPoses = Partial<Record<Hand, PoseRows>>;
export type HandBetas = Partial<Record<Hand, number[]>>;

export interface MetricsReport {
  mpjpe: number;
  mwte: number;
  pa_mpjpe: number;
  fid: number | null;
  r_at_k: number | null;
  valid_rate: number | null;
}

export interface TokenizerOptions {
  /** Interpreter used to launch the toolkit (default: python3 or $HMT_PYTHON). */
  python?: string;
  /** Window reference-frame handling, mirroring the CLI flag. */
  reexpress?: "first" | "none";
}

const HANDS: Hand[] = ["left", "right"];

function checkRows(rows: PoseRows, hand: string): void {
  for (const row of rows) {
    if (row.length !== POSE_WIDTH) {
      throw new HmtError(
        `${hand} pose row has ${row.length} values, expected ${POSE_WIDTH}`,
        3,
      );
    }
  }
}

function frameOf(row: number[], beta: number[]) {
  return {
    rrot: row.slice(0, 3),
    tau: row.slice(3, 6),
    theta: row.slice(6, 51),
    beta,
  };
}

function rowOf(frame: { rrot: number[]; tau: number[]; theta: number[] }): number[] {
  return [...frame.rrot, ...frame.tau, ...frame.theta];
}

function recordDoc(id: string, poses: HandPoses, betas: HandBetas) {
  const frames: Record<string, unknown>[] = [];
  const lengths = HANDS.filter((h) => poses[h]).map((h) => poses[h]!.length);
  const n = Math.max(0, ...lengths);
  for (const h of HANDS) {
    if (poses[h] && poses[h]!.length !== n) {
      throw new HmtError("hands must cover the same number of frames", 3);
    }
  }
  for (let i = 0; i < n; i++) {
    const frame: Record<string, unknown> = { t: i / 15 };
    for (const h of HANDS) {
      const rows = poses[h];
      frame[h] = rows ? frameOf(rows[i], betas[h] ?? new Array(10).fill(0)) : null;
    }
    frames.push(frame);
  }
  return {
    id,
    source: "bindings",
    fps: 15,
    intrinsics: { fx: 500.0, fy: 500.0, cx: 320.0, cy: 240.0, width: 640, height: 480 },
    frames,
  };
}

function parseRecordLine(line: string): { poses: HandPoses; betas: HandBetas } {
  const doc = JSON.parse(line);
  const poses: HandPoses = {};
  const betas: HandBetas = {};
  for (const h of HANDS) {
    const rows: number[][] = [];
    let beta: number[] | undefined;
    for (const frame of doc.frames) {
      const p = frame[h];
      if (p == null) continue;
      rows.push(rowOf(p));
      beta = beta ?? p.beta;
    }
    if (rows.length > 0) {
      poses[h] = rows;
      betas[h] = beta;
    }
  }
  return { poses, betas };
}

/** Workspace-scoped runner for the toolkit CLI. */
class Runner {
  readonly dir: string;
  private readonly python: string;
  private seq = 0;

  constructor(python?: string) {
    this.python = python ?? process.env.HMT_PYTHON ?? "python3";
    this.dir = mkdtempSync(join(tmpdir(), "hmt-bind-"));
  }

  path(name: string): string {
    return join(this.dir, `${this.seq++}-${name}`);
  }

  run(args: string[]): void {
    try {
      execFileSync(this.python, ["-m", "hmt", ...args], {
        stdio: ["ignore", "pipe", "pipe"],
      });
    } catch (err) {
      const e = err as { status?: number; stderr?: Buffer };
      const detail = e.stderr ? e.stderr.toString().trim() : String(err);
      throw new HmtError(detail || "toolkit invocation failed", e.status ?? 3);
    }
  }

  dispose(): void {
    rmSync(this.dir, { recursive: true, force: true });
  }
}

/** Handle over a loaded tokenizer model file. */
export class BoundTokenizer {
  private runner: Runner | null;
  private readonly reexpress: "first" | "none";

  constructor(readonly modelPath: string, opts: TokenizerOptions = {}) {
    this.runner = new Runner(opts.python);
    this.reexpress = opts.reexpress ?? "first";
  }

  private use(): Runner {
    if (this.runner === null) {
      throw new HmtError("tokenizer handle is closed", 3);
    }
    return this.runner;
  }

  /**
   * Pose rows per hand -> motion token stream ids (including the block
   * delimiters), exactly as the CLI emits them.
   */
  tokenize(poses: HandPoses, betas: HandBetas = {}): number[] {
    const runner = this.use();
    for (const h of HANDS) {
      if (poses[h]) checkRows(poses[h]!, h);
    }
    if (!HANDS.some((h) => poses[h] && poses[h]!.length > 0)) {
      return [];
    }
    const records = runner.path("records.jsonl");
    const tokens = runner.path("tokens.jsonl");
    writeFileSync(records, JSON.stringify(recordDoc("bind", poses, betas)) + "\n");
    runner.run([
      "tokenize", "--model", this.modelPath, "--in", records, "--out", tokens,
      "--reexpress", this.reexpress,
    ]);
    const line = readFileSync(tokens, "utf8").trim();
    if (!line) return [];
    return JSON.parse(line).ids as number[];
  }

  /** Token stream ids -> pose rows per hand (plus the shape vectors). */
  detokenize(ids: number[], hands: Hand[], betas: HandBetas = {}):
      { poses: HandPoses; betas: HandBetas } {
    const runner = this.use();
    const tokens = runner.path("tokens.jsonl");
    const decoded = runner.path("decoded.jsonl");
    const fullBetas: Record<string, number[]> = {};
    for (const h of hands) {
      fullBetas[h] = betas[h] ?? new Array(10).fill(0);
    }
    writeFileSync(tokens, JSON.stringify({ id: "bind", hands, betas: fullBetas, ids }) + "\n");
    runner.run([
      "detokenize", "--model", this.modelPath, "--in", tokens, "--out", decoded,
    ]);
    return parseRecordLine(readFileSync(decoded, "utf8").trim());
  }

  close(): void {
    if (this.runner !== null) {
      this.runner.dispose();
      this.runner = null;
    }
  }
}

function runAugment(kind: "depth" | "rotation", poses: HandPoses, betas: HandBetas,
                    value: number, python?: string): HandPoses {
  const runner = new Runner(python);
  try {
    for (const h of HANDS) {
      if (poses[h]) checkRows(poses[h]!, h);
    }
    const records = runner.path("records.jsonl");
    const out = runner.path("augmented.jsonl");
    writeFileSync(records, JSON.stringify(recordDoc("bind", poses, betas)) + "\n");
    runner.run([
      "augment", "--in", records, "--out", out, "--kind", kind,
      "--value", String(value),
    ]);
    return parseRecordLine(readFileSync(out, "utf8").trim()).poses;
  } finally {
    runner.dispose();
  }
}

/** Scale wrist depths by lambda (image handling happens toolkit-side). */
export function augmentDepth(poses: HandPoses, lambda: number,
                             betas: HandBetas = {}, python?: string): HandPoses {
  return runAugment("depth", poses, betas, lambda, python);
}

/** Rotate poses about the camera's optical axis by phi radians. */
export function augmentRotation(poses: HandPoses, phi: number,
                                betas: HandBetas = {}, python?: string): HandPoses {
  return runAugment("rotation", poses, betas, phi, python);
}

export interface MetricsBetas {
  pred?: HandBetas;
  gt?: HandBetas;
}

/** Distance and distribution metrics between two pose-row sets. */
export function metrics(pred: HandPoses, gt: HandPoses,
                        betas: MetricsBetas = {}, python?: string): MetricsReport {
  const runner = new Runner(python);
  try {
    for (const h of HANDS) {
      if (pred[h]) checkRows(pred[h]!, `pred ${h}`);
      if (gt[h]) checkRows(gt[h]!, `gt ${h}`);
    }
    for (const h of HANDS) {
      if ((pred[h]?.length ?? 0) !== (gt[h]?.length ?? 0)) {
        throw new HmtError(`pred/gt shape mismatch for ${h} hand`, 3);
      }
    }
    const predPath = runner.path("pred.jsonl");
    const gtPath = runner.path("gt.jsonl");
    const report = runner.path("report.json");
    writeFileSync(predPath, JSON.stringify(recordDoc("p", pred, betas.pred ?? {})) + "\n");
    writeFileSync(gtPath, JSON.stringify(recordDoc("g", gt, betas.gt ?? {})) + "\n");
    runner.run([
      "evaluate", "--pred", predPath, "--gt", gtPath, "--jobs", "1",
      "--report", report,
    ]);
    const doc = JSON.parse(readFileSync(report, "utf8"));
    return {
      mpjpe: doc.mpjpe, mwte: doc.mwte, pa_mpjpe: doc.pa_mpjpe,
      fid: doc.fid, r_at_k: doc.r_at_k, valid_rate: doc.valid_rate,
    };
  } finally {
    runner.dispose();
  }
}
