/**
 * Deterministic frozen-representation extractor.
 *
 * Stands in for a pretrained SSL encoder: a conv-like framing front end
 * (400-sample window, 320-sample stride, matching the 20 ms frame rate
 * of the base speech models) feeding log band energies through a stack
 * of fixed, seeded tanh layers. The checkpoint id seeds every weight,
 * so the same id always yields bit-identical features; the layer index
 * picks which depth to emit.
 */

export interface CheckpointSpec {
  id: string;
  dim: number;
  layers: number;
  window: number;
  stride: number;
  bands: number;
}

export class ExtractorError extends Error {}

const REGISTRY: Record<string, Omit<CheckpointSpec, "id">> = {
  "hubert-base-960h": { dim: 768, layers: 12, window: 400, stride: 320, bands: 64 },
  "hubert-base": { dim: 768, layers: 12, window: 400, stride: 320, bands: 64 },
  "tiny-test": { dim: 32, layers: 4, window: 400, stride: 320, bands: 16 },
};

export function resolveCheckpoint(id: string): CheckpointSpec {
  const spec = REGISTRY[id];
  if (!spec) {
    throw new ExtractorError(
      `unknown checkpoint ${JSON.stringify(id)}; known: ${Object.keys(REGISTRY).join(", ")}`);
  }
  return { id, ...spec };
}

export function frameCount(samples: number, spec: CheckpointSpec): number {
  if (samples < spec.window) return 0;
  return Math.floor((samples - spec.window) / spec.stride) + 1;
}

/** splitmix64-ish integer hash -> uniform in [0, 1). */
function hashFloat(seed: number, i: number): number {
  let x = (BigInt(seed) * 0x9e3779b97f4a7c15n + BigInt(i) * 0xbf58476d1ce4e5b9n) & 0xffffffffffffffffn;
  x ^= x >> 30n;
  x = (x * 0xbf58476d1ce4e5b9n) & 0xffffffffffffffffn;
  x ^= x >> 27n;
  x = (x * 0x94d049bb133111ebn) & 0xffffffffffffffffn;
  x ^= x >> 31n;
  return Number(x & 0xfffffffn) / 0x10000000;
}

function stringSeed(text: string): number {
  let h = 2166136261;
  for (let i = 0; i < text.length; i++) {
    h = Math.imul(h ^ text.charCodeAt(i), 16777619) >>> 0;
  }
  return h;
}

function seededMatrix(seed: number, rows: number, cols: number): Float32Array {
  const w = new Float32Array(rows * cols);
  const scale = Math.sqrt(2.0 / (rows + cols)) * 1.7;
  for (let i = 0; i < w.length; i++) {
    w[i] = (hashFloat(seed, i) * 2 - 1) * scale;
  }
  return w;
}

/** In-place iterative radix-2 FFT over interleaved re/im arrays. */
function fft(re: Float64Array, im: Float64Array): void {
  const n = re.length;
  for (let i = 1, j = 0; i < n; i++) {
    let bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) {
      [re[i], re[j]] = [re[j], re[i]];
      [im[i], im[j]] = [im[j], im[i]];
    }
  }
  for (let len = 2; len <= n; len <<= 1) {
    const ang = (-2 * Math.PI) / len;
    const wr = Math.cos(ang);
    const wi = Math.sin(ang);
    for (let i = 0; i < n; i += len) {
      let cr = 1;
      let ci = 0;
      for (let k = 0; k < len / 2; k++) {
        const ur = re[i + k];
        const ui = im[i + k];
        const vr = re[i + k + len / 2] * cr - im[i + k + len / 2] * ci;
        const vi = re[i + k + len / 2] * ci + im[i + k + len / 2] * cr;
        re[i + k] = ur + vr;
        im[i + k] = ui + vi;
        re[i + k + len / 2] = ur - vr;
        im[i + k + len / 2] = ui - vi;
        const ncr = cr * wr - ci * wi;
        ci = cr * wi + ci * wr;
        cr = ncr;
      }
    }
  }
}

function bandEnergies(frame: Float32Array, bands: number): Float64Array {
  const nfft = 512;
  const re = new Float64Array(nfft);
  const im = new Float64Array(nfft);
  for (let i = 0; i < frame.length && i < nfft; i++) {
    const hann = 0.5 - 0.5 * Math.cos((2 * Math.PI * i) / (frame.length - 1));
    re[i] = frame[i] * hann;
  }
  fft(re, im);
  const half = nfft / 2;
  const out = new Float64Array(bands);
  const per = half / bands;
  for (let b = 0; b < bands; b++) {
    let acc = 0;
    const lo = Math.floor(b * per);
    const hi = Math.floor((b + 1) * per);
    for (let k = lo; k < hi; k++) {
      acc += re[k] * re[k] + im[k] * im[k];
    }
    out[b] = Math.log(acc + 1e-10);
  }
  return out;
}

export function extract(samples: Float32Array, spec: CheckpointSpec, layer: number): Float32Array[] {
  if (layer < 0 || layer > spec.layers) {
    throw new ExtractorError(
      `layer ${layer} out of range for ${spec.id} (depth ${spec.layers})`);
  }
  if (samples.length === 0) {
    throw new ExtractorError("zero-length audio");
  }
  const frames = frameCount(samples.length, spec);
  if (frames === 0) {
    throw new ExtractorError(
      `audio shorter than one analysis window (${spec.window} samples)`);
  }
  const base = stringSeed(spec.id);
  const weights: Float32Array[] = [];
  for (let l = 1; l <= layer; l++) {
    const rows = l === 1 ? spec.bands : spec.dim;
    weights.push(seededMatrix(base + l * 7919, rows, spec.dim));
  }
  const out: Float32Array[] = [];
  for (let f = 0; f < frames; f++) {
    const start = f * spec.stride;
    const frame = samples.subarray(start, start + spec.window);
    let h = Float64Array.from(bandEnergies(frame, spec.bands));
    if (layer === 0) {
      // layer 0: raw band energies zero-padded to the model width
      const padded = new Float32Array(spec.dim);
      padded.set(Float32Array.from(h.subarray(0, Math.min(h.length, spec.dim))));
      out.push(padded);
      continue;
    }
    for (let l = 0; l < layer; l++) {
      const w = weights[l];
      const rows = l === 0 ? spec.bands : spec.dim;
      const next = new Float64Array(spec.dim);
      for (let r = 0; r < rows; r++) {
        const hv = h[r];
        if (hv === 0) continue;
        const off = r * spec.dim;
        for (let c2 = 0; c2 < spec.dim; c2++) {
          next[c2] += hv * w[off + c2];
        }
      }
      for (let c2 = 0; c2 < spec.dim; c2++) {
        next[c2] = Math.tanh(next[c2]);
      }
      h = next;
    }
    out.push(Float32Array.from(h));
  }
  return out;
}
