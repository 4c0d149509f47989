/**
 * Proxy trainer: a softmax classifier fine-tuned from a fixed base
 * checkpoint (zero weights) on each requested subset of training points.
 *
 * Every query restarts from the base checkpoint so that evaluations are
 * independent and reproducible: the same subset always yields the same
 * loss. A label-proportional validation split is carved out of the
 * dataset up front; requested ids that fall in the validation split are
 * dropped from fine-tuning so the eval set never leaks into training.
 */

import { readFileSync } from "node:fs";
import { z } from "zod";
import type { TrainerConfig } from "./config.js";

const datasetSchema = z
  .object({
    features: z.array(z.array(z.number()).min(1)).min(1),
    labels: z.array(z.number().int().nonnegative()).min(1),
  })
  .strict();

export interface Dataset {
  features: number[][];
  labels: number[];
  nClasses: number;
}

const EMBEDDING_MAGIC = "SUBSELEM";

/**
 * Binary embedding file: 8-byte magic, little-endian uint32 header
 * length, UTF-8 JSON header {n, dim, dtype:"f32"}, then row-major
 * little-endian float32 data.
 */
function parseEmbeddings(buf: Buffer): number[][] {
  const headerStart = EMBEDDING_MAGIC.length + 4;
  const headerLen = buf.readUInt32LE(EMBEDDING_MAGIC.length);
  const header = JSON.parse(
    buf.subarray(headerStart, headerStart + headerLen).toString("utf8"),
  ) as { n: number; dim: number; dtype: string };
  if (header.dtype !== "f32") {
    throw new Error(`unsupported embedding dtype ${JSON.stringify(header.dtype)}`);
  }
  if (!Number.isInteger(header.n) || header.n < 1 || !Number.isInteger(header.dim) || header.dim < 1) {
    throw new Error(`bad embedding shape ${header.n}x${header.dim}`);
  }
  const dataStart = headerStart + headerLen;
  if (buf.length < dataStart + header.n * header.dim * 4) {
    throw new Error("embedding file truncated");
  }
  const view = new DataView(buf.buffer, buf.byteOffset + dataStart);
  return Array.from({ length: header.n }, (_, i) =>
    Array.from({ length: header.dim }, (_, d) => view.getFloat32((i * header.dim + d) * 4, true)),
  );
}

function readLabels(path: string): number[] {
  let text: string;
  try {
    text = readFileSync(path, "utf8");
  } catch (err) {
    throw new Error(`cannot read labels ${path}: ${(err as Error).message}`);
  }
  const fields = text.trim().split(/\s+/).filter((f) => f !== "");
  if (fields.length === 0) {
    throw new Error(`labels file ${path} is empty`);
  }
  return fields.map((f) => {
    const label = Number(f);
    if (!Number.isInteger(label) || label < 0) {
      throw new Error(`bad label ${JSON.stringify(f)} in ${path}`);
    }
    return label;
  });
}

/**
 * A dataset is either a JSON document {features, labels} or a binary
 * embedding matrix (recognized by its magic bytes) paired with a labels
 * file of one integer per line.
 */
export function loadDataset(path: string, labelsPath?: string): Dataset {
  let buf: Buffer;
  try {
    buf = readFileSync(path);
  } catch (err) {
    throw new Error(`cannot read dataset ${path}: ${(err as Error).message}`);
  }
  let features: number[][];
  let labels: number[];
  if (buf.subarray(0, EMBEDDING_MAGIC.length).toString("latin1") === EMBEDDING_MAGIC) {
    if (labelsPath === undefined) {
      throw new Error("binary embedding datasets require a labelsPath");
    }
    features = parseEmbeddings(buf);
    labels = readLabels(labelsPath);
  } else {
    let raw: unknown;
    try {
      raw = JSON.parse(buf.toString("utf8"));
    } catch (err) {
      throw new Error(`cannot read dataset ${path}: ${(err as Error).message}`);
    }
    const parsed = datasetSchema.parse(raw);
    features = parsed.features;
    labels = parsed.labels;
  }
  const dim = features[0]!.length;
  if (features.some((row) => row.length !== dim)) {
    throw new Error("all feature rows must share one width");
  }
  if (labels.length !== features.length) {
    throw new Error(`got ${labels.length} labels for ${features.length} feature rows`);
  }
  const nClasses = Math.max(...labels) + 1;
  return { features, labels, nClasses };
}

/** Deterministic 32-bit PRNG (mulberry32). */
export function mulberry32(seed: number): () => number {
  let state = seed >>> 0;
  return () => {
    state = (state + 0x6d2b79f5) >>> 0;
    let t = state;
    t = Math.imul(t ^ (t >>> 15), t | 1);
    t ^= t + Math.imul(t ^ (t >>> 7), t | 61);
    return ((t ^ (t >>> 14)) >>> 0) / 4294967296;
  };
}

/** FNV-1a hash of a string, for deriving per-query seeds. */
export function fnv1a(text: string): number {
  let hash = 0x811c9dc5;
  for (let i = 0; i < text.length; i++) {
    hash ^= text.charCodeAt(i);
    hash = Math.imul(hash, 0x01000193) >>> 0;
  }
  return hash >>> 0;
}

function shuffled(ids: number[], rand: () => number): number[] {
  const out = [...ids];
  for (let i = out.length - 1; i > 0; i--) {
    const j = Math.floor(rand() * (i + 1));
    [out[i], out[j]] = [out[j]!, out[i]!];
  }
  return out;
}

interface Model {
  /** nClasses x dim weight matrix. */
  weights: number[][];
  bias: number[];
}

function zeroModel(nClasses: number, dim: number): Model {
  return {
    weights: Array.from({ length: nClasses }, () => new Array<number>(dim).fill(0)),
    bias: new Array<number>(nClasses).fill(0),
  };
}

function softmax(logits: number[]): number[] {
  const top = Math.max(...logits);
  const exps = logits.map((v) => Math.exp(v - top));
  const total = exps.reduce((a, b) => a + b, 0);
  return exps.map((v) => v / total);
}

function probsOf(model: Model, x: number[]): number[] {
  const logits = model.weights.map((row, c) => {
    let z = model.bias[c]!;
    for (let d = 0; d < x.length; d++) {
      z += row[d]! * x[d]!;
    }
    return z;
  });
  return softmax(logits);
}

export class ProxyTrainer {
  readonly valIds: number[];
  private readonly valSet: Set<number>;
  private referencePointLosses: number[] | null = null;

  constructor(
    private readonly dataset: Dataset,
    private readonly config: TrainerConfig,
    private readonly seed: number,
  ) {
    this.valIds = this.drawValidation();
    this.valSet = new Set(this.valIds);
  }

  /**
   * Hold out ~valFraction of each label's points (at least one when the
   * label has two or more), drawn with the adapter seed so the split is
   * fixed for the lifetime of the dataset.
   */
  private drawValidation(): number[] {
    const byLabel = new Map<number, number[]>();
    this.dataset.labels.forEach((label, id) => {
      const bucket = byLabel.get(label) ?? [];
      bucket.push(id);
      byLabel.set(label, bucket);
    });
    const held: number[] = [];
    for (const label of [...byLabel.keys()].sort((a, b) => a - b)) {
      const ids = byLabel.get(label)!;
      if (ids.length < 2) {
        continue;
      }
      const take = Math.max(1, Math.floor(this.config.valFraction * ids.length));
      const rand = mulberry32(fnv1a(`val:${this.seed}:${label}`));
      held.push(...shuffled(ids, rand).slice(0, take));
    }
    return held.sort((a, b) => a - b);
  }

  /** Requested ids minus the validation holdout. */
  effectiveTrainIds(trainIds: number[]): number[] {
    return trainIds.filter((id) => {
      if (id < 0 || id >= this.dataset.labels.length) {
        throw new Error(`train id ${id} outside dataset of ${this.dataset.labels.length}`);
      }
      return !this.valSet.has(id);
    });
  }

  /**
   * Mini-batch cross-entropy fine-tuning from the zero-weight base
   * checkpoint. Gradients are averaged across gradAccumSteps micro
   * batches before each weight update.
   */
  private fineTune(trainIds: number[]): Model {
    const dim = this.dataset.features[0]!.length;
    const model = zeroModel(this.dataset.nClasses, dim);
    if (trainIds.length === 0) {
      return model;
    }
    const rand = mulberry32(fnv1a(`tune:${this.seed}:${trainIds.join(",")}`));
    const { batchSize, gradAccumSteps, learningRate, epochs } = this.config;
    for (let epoch = 0; epoch < epochs; epoch++) {
      const order = shuffled(trainIds, rand);
      for (let start = 0; start < order.length; start += batchSize * gradAccumSteps) {
        const macro = order.slice(start, start + batchSize * gradAccumSteps);
        const gradW = model.weights.map((row) => new Array<number>(row.length).fill(0));
        const gradB = new Array<number>(this.dataset.nClasses).fill(0);
        for (const id of macro) {
          const x = this.dataset.features[id]!;
          const probs = probsOf(model, x);
          probs[this.dataset.labels[id]!]! -= 1;
          for (let c = 0; c < probs.length; c++) {
            const err = probs[c]! / macro.length;
            gradB[c] = gradB[c]! + err;
            const row = gradW[c]!;
            for (let d = 0; d < x.length; d++) {
              row[d] = row[d]! + err * x[d]!;
            }
          }
        }
        for (let c = 0; c < gradB.length; c++) {
          model.bias[c] = model.bias[c]! - learningRate * gradB[c]!;
          const row = model.weights[c]!;
          const grad = gradW[c]!;
          for (let d = 0; d < row.length; d++) {
            row[d] = row[d]! - learningRate * grad[d]!;
          }
        }
      }
    }
    return model;
  }

  private meanLoss(model: Model, ids: number[]): number {
    let total = 0;
    for (const id of ids) {
      const probs = probsOf(model, this.dataset.features[id]!);
      total += -Math.log(probs[this.dataset.labels[id]!]!);
    }
    return total / ids.length;
  }

  private meanAcc(model: Model, ids: number[]): number {
    let hits = 0;
    for (const id of ids) {
      const probs = probsOf(model, this.dataset.features[id]!);
      let best = 0;
      for (let c = 1; c < probs.length; c++) {
        if (probs[c]! > probs[best]!) {
          best = c;
        }
      }
      if (best === this.dataset.labels[id]!) {
        hits += 1;
      }
    }
    return hits / ids.length;
  }

  private evalIds(split: string, effective: number[]): number[] {
    if (split === "train") {
      return effective;
    }
    return this.valIds;
  }

  evalLoss(split: string, trainIds: number[]): number {
    const effective = this.effectiveTrainIds(trainIds);
    const model = this.fineTune(effective);
    const ids = this.evalIds(split, effective);
    // The base checkpoint scores -ln(1/C) on every point, so an empty
    // eval set still has a well-defined loss.
    if (ids.length === 0) {
      return Math.log(this.dataset.nClasses);
    }
    return this.meanLoss(model, ids);
  }

  evalAcc(split: string, trainIds: number[]): number {
    const effective = this.effectiveTrainIds(trainIds);
    const model = this.fineTune(effective);
    const ids = this.evalIds(split, effective);
    if (ids.length === 0) {
      return 1 / this.dataset.nClasses;
    }
    return this.meanAcc(model, ids);
  }

  /**
   * Per-point losses under a reference model fine-tuned once on the full
   * non-validation pool; computed lazily and cached.
   */
  pointLosses(): number[] {
    if (this.referencePointLosses === null) {
      const pool = this.dataset.labels
        .map((_, id) => id)
        .filter((id) => !this.valSet.has(id));
      const model = this.fineTune(pool);
      this.referencePointLosses = this.dataset.labels.map((label, id) => {
        const probs = probsOf(model, this.dataset.features[id]!);
        return -Math.log(probs[label]!);
      });
    }
    return this.referencePointLosses;
  }
}
