/**
 * Wire protocol, version 1: newline-delimited UTF-8 JSON over stdio.
 * Requests carry an "op" and an "id"; every response echoes the id.
 * Failures are reported in-band as {"id": ..., "error": "..."} so the
 * consumer can attribute them to the request that caused them.
 */

import { z } from "zod";

export const PROTOCOL_VERSION = 1;

export const requestSchema = z.object({
  op: z.string(),
  id: z.union([z.number().int(), z.string()]),
  split: z.enum(["val", "train"]).optional(),
  train_ids: z.array(z.number().int().nonnegative()).optional(),
});

export type Request = z.infer<typeof requestSchema>;
export type RequestId = Request["id"] | null;

export function helloResponse(id: RequestId, capabilities: string[]): string {
  return JSON.stringify({ id, protocol: PROTOCOL_VERSION, capabilities });
}

export function lossResponse(id: RequestId, loss: number): string {
  return JSON.stringify({ id, loss });
}

export function accResponse(id: RequestId, acc: number): string {
  return JSON.stringify({ id, acc });
}

export function lossesResponse(id: RequestId, losses: number[]): string {
  return JSON.stringify({ id, losses });
}

export function shutdownResponse(id: RequestId): string {
  return JSON.stringify({ id, ok: true });
}

export function errorResponse(id: RequestId, message: string): string {
  return JSON.stringify({ id, error: message });
}

/** Sorted, deduplicated copy of a train_ids list. */
export function cleanIds(ids: number[]): number[] {
  return [...new Set(ids)].sort((a, b) => a - b);
}
