/**
 * Adapter configuration: a JSON file selects either the closed-form stub
 * landscape or the proxy-model trainer, plus training hyperparameters.
 */

import { readFileSync } from "node:fs";
import { dirname, resolve } from "node:path";
import { z } from "zod";

const stubSchema = z
  .object({
    quality: z.array(z.number()).min(1),
    redundancy: z.array(z.array(z.number())).optional(),
    lam: z.number().default(0.5),
    curvature: z.number().default(0.5),
    assignment: z.array(z.number().int().nonnegative()).min(1),
  })
  .strict();

const trainerSchema = z
  .object({
    datasetPath: z.string(),
    /** Labels file for binary embedding datasets, one integer per line. */
    labelsPath: z.string().optional(),
    /** Fraction of each label held out for validation. */
    valFraction: z.number().gt(0).lt(1).default(0.2),
    epochs: z.number().int().positive().default(2),
    batchSize: z.number().int().positive().default(16),
    gradAccumSteps: z.number().int().positive().default(4),
    learningRate: z.number().positive().default(1e-5),
  })
  .strict();

const configSchema = z
  .object({
    mode: z.enum(["stub", "trainer"]),
    seed: z.number().int().nonnegative().default(0),
    stub: stubSchema.optional(),
    trainer: trainerSchema.optional(),
  })
  .strict()
  .superRefine((cfg, ctx) => {
    if (cfg.mode === "stub" && cfg.stub === undefined) {
      ctx.addIssue({ code: z.ZodIssueCode.custom, message: "stub mode requires a stub section" });
    }
    if (cfg.mode === "trainer" && cfg.trainer === undefined) {
      ctx.addIssue({ code: z.ZodIssueCode.custom, message: "trainer mode requires a trainer section" });
    }
    if (cfg.stub !== undefined) {
      const k = cfg.stub.quality.length;
      for (const cluster of cfg.stub.assignment) {
        if (cluster >= k) {
          ctx.addIssue({
            code: z.ZodIssueCode.custom,
            message: `assignment refers to cluster ${cluster} but only ${k} qualities given`,
          });
        }
      }
    }
  });

export type StubConfig = z.infer<typeof stubSchema>;
export type TrainerConfig = z.infer<typeof trainerSchema>;
export type AdapterConfig = z.infer<typeof configSchema>;

export function parseConfig(raw: unknown): AdapterConfig {
  return configSchema.parse(raw);
}

/**
 * Load a config file; relative trainer dataset and labels paths are
 * resolved against the config file's directory.
 */
export function loadConfig(path: string): AdapterConfig {
  let raw: unknown;
  try {
    raw = JSON.parse(readFileSync(path, "utf8"));
  } catch (err) {
    throw new Error(`cannot read config ${path}: ${(err as Error).message}`);
  }
  const cfg = parseConfig(raw);
  if (cfg.trainer !== undefined) {
    cfg.trainer.datasetPath = resolve(dirname(path), cfg.trainer.datasetPath);
    if (cfg.trainer.labelsPath !== undefined) {
      cfg.trainer.labelsPath = resolve(dirname(path), cfg.trainer.labelsPath);
    }
  }
  return cfg;
}
