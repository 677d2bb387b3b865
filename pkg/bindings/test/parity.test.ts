/**
 * Golden parity: every bound operation must reproduce, bit for bit, what
 * the toolkit CLI wrote for the same inputs.
 */

import { execFileSync } from "node:child_process";
import { mkdtempSync, readFileSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import {
  BoundTokenizer,
  HandBetas,
  HandPoses,
  HmtError,
  augmentDepth,
  augmentRotation,
  metrics,
} from "../src/index";

const PYTHON = process.env.HMT_PYTHON ?? "python3";

function cli(args: string[]): void {
  execFileSync(PYTHON, ["-m", "hmt", ...args], { stdio: ["ignore", "pipe", "pipe"] });
}

function rowOf(frame: { rrot: number[]; tau: number[]; theta: number[] }): number[] {
  return [...frame.rrot, ...frame.tau, ...frame.theta];
}

function parseRecord(line: string): { poses: HandPoses; betas: HandBetas } {
  const doc = JSON.parse(line);
  const poses: HandPoses = {};
  const betas: HandBetas = {};
  for (const hand of ["left", "right"] as const) {
    const rows: number[][] = [];
    let beta: number[] | undefined;
    for (const frame of doc.frames) {
      const p = frame[hand];
      if (p == null) continue;
      rows.push(rowOf(p));
      beta = beta ?? p.beta;
    }
    if (rows.length) {
      poses[hand] = rows;
      betas[hand] = beta;
    }
  }
  return { poses, betas };
}

let dir: string;
let model: string;
let recordLines: string[];
let goldenTokens: { id: string; hands: string[]; ids: number[] }[];

beforeAll(() => {
  dir = mkdtempSync(join(tmpdir(), "hmt-golden-"));
  const records = join(dir, "records.jsonl");
  model = join(dir, "model.hgrq");
  cli(["synth", "--out", records, "--records", "3", "--seconds", "2", "--seed", "17"]);
  cli([
    "train-tokenizer", "--synthetic", "32", "--out", model,
    "--vocab-out", join(dir, "vocab.json"),
    "--k-wrist", "64", "--k-finger", "64", "--dim", "32",
    "--epochs", "2", "--seed", "4",
  ]);
  const tokens = join(dir, "golden-tokens.jsonl");
  cli(["tokenize", "--model", model, "--in", records, "--out", tokens]);
  recordLines = readFileSync(records, "utf8").trim().split("\n");
  goldenTokens = readFileSync(tokens, "utf8").trim().split("\n").map((l) => JSON.parse(l));
}, 120_000);

afterAll(() => {
  rmSync(dir, { recursive: true, force: true });
});

describe("tokenize", () => {
  it("matches CLI golden ids bit for bit on every corpus record", () => {
    const tok = new BoundTokenizer(model);
    try {
      recordLines.forEach((line, i) => {
        const { poses, betas } = parseRecord(line);
        const ids = tok.tokenize(poses, betas);
        expect(ids).toEqual(goldenTokens[i].ids);
      });
    } finally {
      tok.close();
    }
  }, 120_000);

  it("returns an empty id array for empty input", () => {
    const tok = new BoundTokenizer(model);
    try {
      expect(tok.tokenize({})).toEqual([]);
    } finally {
      tok.close();
    }
  });

  it("rejects rows of the wrong width, naming the expected 51", () => {
    const tok = new BoundTokenizer(model);
    try {
      const bad = [new Array(50).fill(0)];
      expect(() => tok.tokenize({ right: bad })).toThrowError(/51/);
    } finally {
      tok.close();
    }
  });

  it("fails after close", () => {
    const tok = new BoundTokenizer(model);
    tok.close();
    expect(() => tok.tokenize({})).toThrowError(HmtError);
    expect(() => tok.tokenize({})).toThrowError(/closed/);
  });
});

describe("detokenize", () => {
  it("matches the CLI decoding of the golden token file", () => {
    const tokens = join(dir, "golden-tokens.jsonl");
    const decoded = join(dir, "golden-decoded.jsonl");
    cli(["detokenize", "--model", model, "--in", tokens, "--out", decoded]);
    const goldenDecoded = readFileSync(decoded, "utf8").trim().split("\n");

    const tok = new BoundTokenizer(model);
    try {
      goldenTokens.forEach((g, i) => {
        const betas: HandBetas = {};
        for (const [hand, beta] of Object.entries(
          JSON.parse(readFileSync(tokens, "utf8").trim().split("\n")[i]).betas,
        )) {
          betas[hand as "left" | "right"] = beta as number[];
        }
        const ours = tok.detokenize(g.ids, g.hands as ("left" | "right")[], betas);
        const golden = parseRecord(goldenDecoded[i]);
        expect(ours.poses).toEqual(golden.poses);
      });
    } finally {
      tok.close();
    }
  }, 120_000);

  it("surfaces the toolkit's error code for malformed streams", () => {
    const vocab = JSON.parse(readFileSync(join(dir, "vocab.json"), "utf8"));
    const motOpen = vocab.specials.MOT_OPEN as number;
    const motClose = vocab.specials.MOT_CLOSE as number;
    const motionLo = vocab.motion_range[0] as number;
    const tok = new BoundTokenizer(model);
    try {
      let caught: HmtError | null = null;
      try {
        tok.detokenize([motOpen, motionLo, motClose], ["right"]); // short block
      } catch (e) {
        caught = e as HmtError;
      }
      expect(caught).not.toBeNull();
      expect(caught!.exitCode).toBe(3);
    } finally {
      tok.close();
    }
  }, 60_000);
});

describe("metrics", () => {
  it("equals the CLI evaluate report on a golden pair", () => {
    const predPath = join(dir, "pred.jsonl");
    const gtPath = join(dir, "gt.jsonl");
    const report = join(dir, "eval.json");
    const fs = require("node:fs");
    fs.writeFileSync(predPath, recordLines[0] + "\n");
    fs.writeFileSync(gtPath, recordLines[1] + "\n");
    cli(["evaluate", "--pred", predPath, "--gt", gtPath, "--jobs", "1",
         "--report", report]);
    const golden = JSON.parse(readFileSync(report, "utf8"));

    const pred = parseRecord(recordLines[0]);
    const gt = parseRecord(recordLines[1]);
    const ours = metrics(pred.poses, gt.poses, { pred: pred.betas, gt: gt.betas });
    expect(ours.mpjpe).toBe(golden.mpjpe);
    expect(ours.mwte).toBe(golden.mwte);
    expect(ours.pa_mpjpe).toBe(golden.pa_mpjpe);
  }, 60_000);

  it("all distances vanish on identical inputs", () => {
    const { poses, betas } = parseRecord(recordLines[0]);
    const ours = metrics(poses, poses, { pred: betas, gt: betas });
    expect(ours.mpjpe).toBe(0);
    expect(ours.mwte).toBe(0);
    expect(ours.pa_mpjpe).toBeLessThan(1e-8);
  }, 60_000);

  it("rejects mismatched frame counts", () => {
    const { poses, betas } = parseRecord(recordLines[0]);
    const truncated = { right: poses.right!.slice(0, 5) };
    expect(() => metrics(poses, truncated, { pred: betas })).toThrowError(/mismatch/);
  });
});

describe("augmentations", () => {
  it("depth scaling matches the CLI output bit for bit", () => {
    const single = join(dir, "single.jsonl");
    const goldenOut = join(dir, "aug-depth.jsonl");
    require("node:fs").writeFileSync(single, recordLines[0] + "\n");
    cli(["augment", "--in", single, "--out", goldenOut, "--kind", "depth",
         "--value", "1.2"]);
    const golden = parseRecord(readFileSync(goldenOut, "utf8").trim());

    const { poses, betas } = parseRecord(recordLines[0]);
    const ours = augmentDepth(poses, 1.2, betas);
    expect(ours).toEqual(golden.poses);
  }, 60_000);

  it("in-plane rotation matches the CLI output bit for bit", () => {
    const single = join(dir, "single2.jsonl");
    const goldenOut = join(dir, "aug-rot.jsonl");
    require("node:fs").writeFileSync(single, recordLines[0] + "\n");
    cli(["augment", "--in", single, "--out", goldenOut, "--kind", "rotation",
         "--value", "0.7"]);
    const golden = parseRecord(readFileSync(goldenOut, "utf8").trim());

    const { poses, betas } = parseRecord(recordLines[0]);
    const ours = augmentRotation(poses, 0.7, betas);
    expect(ours).toEqual(golden.poses);
  }, 60_000);
});
