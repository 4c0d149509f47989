/**
 * Request loop: one JSON request per line in, one JSON response per line
 * out, strictly in order. Bad input never kills the process — a line
 * that cannot be parsed or served yields an in-band error response and
 * the loop continues. Only a "shutdown" request ends the process, with
 * exit code 0.
 */

import { createInterface } from "node:readline";
import type { Readable, Writable } from "node:stream";
import { ZodError } from "zod";
import type { Oracle } from "./oracle.js";
import {
  accResponse,
  cleanIds,
  errorResponse,
  helloResponse,
  lossesResponse,
  lossResponse,
  type Request,
  requestSchema,
  shutdownResponse,
} from "./protocol.js";

export interface Outcome {
  response: string;
  shutdown: boolean;
}

function evalArgs(req: Request): { split: "val" | "train"; ids: number[] } {
  if (req.split === undefined) {
    throw new Error(`${req.op} requires a split`);
  }
  if (req.train_ids === undefined) {
    throw new Error(`${req.op} requires train_ids`);
  }
  return { split: req.split, ids: cleanIds(req.train_ids) };
}

function issueSummary(err: unknown): string {
  if (err instanceof ZodError) {
    return err.issues
      .map((issue) => `${issue.path.join(".") || "<root>"}: ${issue.message}`)
      .join("; ");
  }
  return (err as Error).message;
}

export function handleLine(line: string, oracle: Oracle): Outcome {
  let raw: unknown;
  try {
    raw = JSON.parse(line);
  } catch {
    return { response: errorResponse(null, "bad request: line is not valid JSON"), shutdown: false };
  }
  let req: Request;
  try {
    req = requestSchema.parse(raw);
  } catch (err) {
    const given = (raw as { id?: unknown }).id;
    const id = typeof given === "number" || typeof given === "string" ? given : null;
    return { response: errorResponse(id, `bad request: ${issueSummary(err)}`), shutdown: false };
  }
  try {
    switch (req.op) {
      case "hello":
        return { response: helloResponse(req.id, oracle.capabilities()), shutdown: false };
      case "eval_loss": {
        const { split, ids } = evalArgs(req);
        return { response: lossResponse(req.id, oracle.evalLoss(split, ids)), shutdown: false };
      }
      case "eval_acc": {
        const { split, ids } = evalArgs(req);
        return { response: accResponse(req.id, oracle.evalAcc(split, ids)), shutdown: false };
      }
      case "point_losses":
        return { response: lossesResponse(req.id, oracle.pointLosses()), shutdown: false };
      case "shutdown":
        return { response: shutdownResponse(req.id), shutdown: true };
      default:
        return { response: errorResponse(req.id, `unknown op ${JSON.stringify(req.op)}`), shutdown: false };
    }
  } catch (err) {
    return { response: errorResponse(req.id, (err as Error).message), shutdown: false };
  }
}

/** Serve until shutdown or end of input; resolves with the exit code. */
export function serve(oracle: Oracle, input: Readable, output: Writable): Promise<number> {
  return new Promise((resolvePromise) => {
    const lines = createInterface({ input, terminal: false });
    // readline may still emit lines it had buffered when close() is
    // called, so an explicit flag keeps anything after shutdown silent.
    let finished = false;
    lines.on("line", (line) => {
      if (finished || line.trim() === "") {
        return;
      }
      const { response, shutdown } = handleLine(line, oracle);
      output.write(response + "\n");
      if (shutdown) {
        finished = true;
        lines.close();
        resolvePromise(0);
      }
    });
    lines.on("close", () => resolvePromise(0));
  });
}
