#!/usr/bin/env node
/**
 * feature-bridge: export frozen speech representations for WAV files
 * into W2FT feature files plus an updated manifest.
 *
 * Optional pre-extraction re-programming shells out to the parser's own
 * `perturb` subcommand so there is exactly one implementation of the
 * waveform perturbation chain.
 */

import { execFileSync } from "node:child_process";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";

import { decodeWav, WavError } from "./wav.js";
import { extract, frameCount, resolveCheckpoint, ExtractorError } from "./extractor.js";
import { encodeFeatures, FeatureFileError } from "./featfile.js";

interface Args {
  checkpoint: string;
  layer: number;
  outDir: string;
  wavs: string[];
  manifest?: string;
  perturb: boolean;
  seed: number;
  perturbCli: string[];
}

function usage(): never {
  console.error(
    "usage: feature-bridge --out-dir DIR [--checkpoint ID] [--layer N] " +
    "[--perturb] [--seed N] [--manifest in.jsonl] [--perturb-cli CMD] wav [wav ...]");
  process.exit(1);
}

function parseArgs(argv: string[]): Args {
  const args: Args = {
    checkpoint: "hubert-base-960h",
    layer: 9,
    outDir: "",
    wavs: [],
    perturb: false,
    seed: 0,
    perturbCli: ["speechsql"],
  };
  for (let i = 0; i < argv.length; i++) {
    const a = argv[i];
    const next = () => {
      if (i + 1 >= argv.length) usage();
      return argv[++i];
    };
    if (a === "--checkpoint") args.checkpoint = next();
    else if (a === "--layer") args.layer = Number(next());
    else if (a === "--out-dir") args.outDir = next();
    else if (a === "--manifest") args.manifest = next();
    else if (a === "--perturb") args.perturb = true;
    else if (a === "--seed") args.seed = Number(next());
    else if (a === "--perturb-cli") args.perturbCli = next().split(" ");
    else if (a.startsWith("--")) usage();
    else args.wavs.push(a);
  }
  if (!args.outDir || (args.wavs.length === 0 && !args.manifest)) usage();
  return args;
}

interface ManifestRow {
  [key: string]: unknown;
  id: string;
  features?: string;
  wav?: string;
}

function readManifest(p: string): ManifestRow[] {
  return fs.readFileSync(p, "utf-8")
    .split("\n")
    .filter((l) => l.trim())
    .map((l) => JSON.parse(l) as ManifestRow);
}

export function runPerturb(cli: string[], wavPath: string, seed: number, tmpDir: string): string {
  const out = path.join(tmpDir, path.basename(wavPath, ".wav") + ".reprogrammed.wav");
  execFileSync(cli[0], [...cli.slice(1), "perturb", "--input", wavPath,
    "--out", out, "--seed", String(seed)], { stdio: "pipe" });
  return out;
}

export function bridgeFile(
  wavPath: string, outDir: string, checkpointId: string, layer: number,
  perturb: boolean, seed: number, perturbCli: string[],
): { featurePath: string; frames: number; dim: number } {
  const spec = resolveCheckpoint(checkpointId);
  let sourceWav = wavPath;
  let tmpDir: string | null = null;
  try {
    if (perturb) {
      tmpDir = fs.mkdtempSync(path.join(os.tmpdir(), "bridge-"));
      sourceWav = runPerturb(perturbCli, wavPath, seed, tmpDir);
    }
    const wav = decodeWav(fs.readFileSync(sourceWav));
    if (wav.sampleRate !== 16000) {
      throw new WavError(`${wavPath}: want 16 kHz, got ${wav.sampleRate}`);
    }
    const frames = extract(wav.samples, spec, layer);
    const tag = `${spec.id}:L${layer}${perturb ? ":reprogrammed" : ""}`;
    const buf = encodeFeatures(frames, spec.dim, tag);
    const featurePath = path.join(
      outDir, path.basename(wavPath).replace(/\.wav$/i, "") + ".w2ft");
    fs.writeFileSync(featurePath, buf);
    return { featurePath, frames: frames.length, dim: spec.dim };
  } finally {
    if (tmpDir) fs.rmSync(tmpDir, { recursive: true, force: true });
  }
}

export function main(argv: string[]): number {
  let args: Args;
  try {
    args = parseArgs(argv);
  } catch {
    return 1;
  }
  fs.mkdirSync(args.outDir, { recursive: true });
  const rows: ManifestRow[] = args.manifest ? readManifest(args.manifest) : [];
  const wavs = args.wavs.length
    ? args.wavs
    : rows.map((r) => String(r.wav ?? ""));
  let failures = 0;
  const emitted: Record<string, string> = {};
  for (const wavPath of wavs) {
    try {
      const res = bridgeFile(wavPath, args.outDir, args.checkpoint, args.layer,
        args.perturb, args.seed, args.perturbCli);
      emitted[wavPath] = path.basename(res.featurePath);
      console.log(`${wavPath} -> ${res.featurePath} (${res.frames} x ${res.dim})`);
    } catch (err) {
      failures++;
      const msg = err instanceof Error ? err.message : String(err);
      console.error(`error: ${wavPath}: ${msg}`);
    }
  }
  if (args.manifest) {
    const updated = rows.map((r) => {
      const wav = String(r.wav ?? "");
      if (emitted[wav]) {
        return { ...r, features: path.join("features", emitted[wav]) };
      }
      return r;
    });
    const outManifest = path.join(args.outDir, "manifest.jsonl");
    fs.writeFileSync(outManifest, updated.map((r) => JSON.stringify(r)).join("\n") + "\n");
    console.log(`updated manifest: ${outManifest}`);
  }
  return failures ? 2 : 0;
}

if (process.argv[1] && process.argv[1].endsWith("cli.js")) {
  process.exit(main(process.argv.slice(2)));
}
