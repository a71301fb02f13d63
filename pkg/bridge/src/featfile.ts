/**
 * W2FT feature-file container, byte-compatible with the parser side.
 *
 * Layout (little-endian):
 *   magic "W2FT" | version u32 | frame count u64 | feature dim u32 |
 *   source tag length u32 | source tag UTF-8 | float32 payload
 */

export const MAGIC = "W2FT";
export const VERSION = 1;

export class FeatureFileError extends Error {}

export function encodeFeatures(frames: Float32Array[], dim: number, sourceTag: string): Buffer {
  for (const f of frames) {
    if (f.length !== dim) {
      throw new FeatureFileError(`frame width ${f.length} != dim ${dim}`);
    }
  }
  const tag = Buffer.from(sourceTag, "utf-8");
  const head = Buffer.alloc(4 + 4 + 8 + 4 + 4);
  head.write(MAGIC, 0, "ascii");
  head.writeUInt32LE(VERSION, 4);
  head.writeBigUInt64LE(BigInt(frames.length), 8);
  head.writeUInt32LE(dim, 16);
  head.writeUInt32LE(tag.length, 20);
  const payload = Buffer.alloc(frames.length * dim * 4);
  for (let i = 0; i < frames.length; i++) {
    for (let j = 0; j < dim; j++) {
      payload.writeFloatLE(frames[i][j], (i * dim + j) * 4);
    }
  }
  return Buffer.concat([head, tag, payload]);
}

export interface FeatureHeader {
  frames: number;
  dim: number;
  sourceTag: string;
}

export function decodeHeader(buf: Buffer): FeatureHeader {
  if (buf.length < 24) throw new FeatureFileError("truncated header");
  if (buf.toString("ascii", 0, 4) !== MAGIC) {
    throw new FeatureFileError(`bad magic ${JSON.stringify(buf.toString("ascii", 0, 4))}`);
  }
  const version = buf.readUInt32LE(4);
  if (version !== VERSION) throw new FeatureFileError(`unsupported version ${version}`);
  const frames = Number(buf.readBigUInt64LE(8));
  const dim = buf.readUInt32LE(16);
  const tagLen = buf.readUInt32LE(20);
  const sourceTag = buf.toString("utf-8", 24, 24 + tagLen);
  const want = 24 + tagLen + frames * dim * 4;
  if (buf.length !== want) {
    throw new FeatureFileError(`payload size mismatch: expected ${want} bytes, got ${buf.length}`);
  }
  return { frames, dim, sourceTag };
}
