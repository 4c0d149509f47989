/**
 * The two evaluation backends behind the wire protocol: a closed-form
 * synthetic landscape for fast deterministic trials, and the proxy
 * trainer that fine-tunes a real (if tiny) model per query.
 */

import type { AdapterConfig } from "./config.js";
import { SyntheticLandscape } from "./landscape.js";
import { loadDataset, ProxyTrainer } from "./trainer.js";

export interface Oracle {
  capabilities(): string[];
  evalLoss(split: "val" | "train", trainIds: number[]): number;
  evalAcc(split: "val" | "train", trainIds: number[]): number;
  pointLosses(): number[];
}

class StubOracle implements Oracle {
  constructor(private readonly landscape: SyntheticLandscape) {}

  capabilities(): string[] {
    return ["eval_loss", "eval_acc", "point_losses"];
  }

  evalLoss(_split: "val" | "train", trainIds: number[]): number {
    return this.landscape.lossOf(trainIds);
  }

  evalAcc(_split: "val" | "train", trainIds: number[]): number {
    return this.landscape.accOf(trainIds);
  }

  pointLosses(): number[] {
    return this.landscape.pointLosses();
  }
}

class TrainerOracle implements Oracle {
  constructor(private readonly trainer: ProxyTrainer) {}

  capabilities(): string[] {
    return ["eval_loss", "eval_acc", "point_losses"];
  }

  evalLoss(split: "val" | "train", trainIds: number[]): number {
    return this.trainer.evalLoss(split, trainIds);
  }

  evalAcc(split: "val" | "train", trainIds: number[]): number {
    return this.trainer.evalAcc(split, trainIds);
  }

  pointLosses(): number[] {
    return this.trainer.pointLosses();
  }
}

export function makeOracle(config: AdapterConfig): Oracle {
  if (config.mode === "stub") {
    return new StubOracle(new SyntheticLandscape(config.stub!));
  }
  const trainer = config.trainer!;
  const dataset = loadDataset(trainer.datasetPath, trainer.labelsPath);
  return new TrainerOracle(new ProxyTrainer(dataset, trainer, config.seed));
}
