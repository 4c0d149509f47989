/**
 * Synthetic reward landscape for stub mode: subset value is summed
 * cluster quality minus pairwise redundancy, and the reported loss is an
 * exponential map of that value whose empty-set baseline e^2.5 / 2 makes
 * the consumer's score transform vanish on the empty subset.
 */

export interface LandscapeSpec {
  /** Per-cluster quality q_i. */
  quality: number[];
  /** Symmetric pairwise redundancy w_ij; zero matrix when omitted. */
  redundancy?: number[][];
  /** Redundancy penalty weight. */
  lam: number;
  /** Curvature of the value-to-loss map. */
  curvature: number;
  /** Cluster id of each dataset point. */
  assignment: number[];
}

export const BASE_LOSS = Math.exp(2.5) / 2;

export class SyntheticLandscape {
  private readonly quality: number[];
  private readonly redundancy: number[][];
  private readonly lam: number;
  private readonly curvature: number;
  private readonly assignment: number[];

  constructor(spec: LandscapeSpec) {
    const k = spec.quality.length;
    const redundancy =
      spec.redundancy ??
      Array.from({ length: k }, () => new Array<number>(k).fill(0));
    if (redundancy.length !== k || redundancy.some((row) => row.length !== k)) {
      throw new Error(`redundancy must be ${k}x${k}`);
    }
    for (let i = 0; i < k; i++) {
      const row = redundancy[i]!;
      if (row[i] !== 0) {
        throw new Error("redundancy diagonal must be zero");
      }
      for (let j = 0; j < k; j++) {
        if (row[j] !== redundancy[j]![i]) {
          throw new Error("redundancy must be symmetric");
        }
      }
    }
    for (const cluster of spec.assignment) {
      if (!Number.isInteger(cluster) || cluster < 0 || cluster >= k) {
        throw new Error(`assignment entry ${cluster} outside 0..${k - 1}`);
      }
    }
    this.quality = spec.quality;
    this.redundancy = redundancy;
    this.lam = spec.lam;
    this.curvature = spec.curvature;
    this.assignment = spec.assignment;
  }

  get nPoints(): number {
    return this.assignment.length;
  }

  /** Ascending cluster ids covered by the given point ids. */
  clustersOf(pointIds: number[]): number[] {
    const seen = new Set<number>();
    for (const id of pointIds) {
      const cluster = this.assignment[id];
      if (cluster === undefined) {
        throw new Error(`point id ${id} outside dataset of ${this.nPoints}`);
      }
      seen.add(cluster);
    }
    return [...seen].sort((a, b) => a - b);
  }

  /** V(S) = sum of qualities minus lam * summed pairwise redundancy. */
  value(clusters: number[]): number {
    let total = 0;
    for (const c of clusters) {
      total += this.quality[c]!;
    }
    for (let i = 0; i < clusters.length; i++) {
      for (let j = i + 1; j < clusters.length; j++) {
        total -= this.lam * this.redundancy[clusters[i]!]![clusters[j]!]!;
      }
    }
    return total;
  }

  lossOf(pointIds: number[]): number {
    return 0.5 * Math.exp(2.5 - this.curvature * this.value(this.clustersOf(pointIds)));
  }

  accOf(pointIds: number[]): number {
    const acc = 0.5 + 0.1 * this.value(this.clustersOf(pointIds));
    return Math.min(1, Math.max(0, acc));
  }

  pointLosses(): number[] {
    return this.assignment.map((_, id) => this.lossOf([id]));
  }
}
