export { decodeWav, encodeWav, WavError } from "./wav.js";
export { extract, frameCount, resolveCheckpoint, ExtractorError } from "./extractor.js";
export { encodeFeatures, decodeHeader, FeatureFileError, MAGIC, VERSION } from "./featfile.js";
export { bridgeFile, main } from "./cli.js";
