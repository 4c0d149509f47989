/**
 * Replays the frozen golden transcript against a freshly spawned server
 * process and requires byte-identical responses. This pins the whole
 * observable wire behaviour: JSON shapes, number formatting, id echoing,
 * in-band errors, and the clean exit after shutdown.
 */

import { spawn } from "node:child_process";
import { readFileSync } from "node:fs";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

const adapterRoot = fileURLToPath(new URL("..", import.meta.url));
const mainPath = fileURLToPath(new URL("../dist/main.js", import.meta.url));
const configPath = fileURLToPath(new URL("../golden/stub-config.json", import.meta.url));
const transcriptPath = fileURLToPath(new URL("../golden/transcript.ndjson", import.meta.url));

interface RunResult {
  stdout: string;
  stderr: string;
  code: number | null;
}

function runServer(inputLines: string[]): Promise<RunResult> {
  return new Promise((resolve, reject) => {
    const child = spawn("node", [mainPath, configPath], { cwd: adapterRoot });
    let stdout = "";
    let stderr = "";
    child.stdout.on("data", (chunk) => (stdout += chunk));
    child.stderr.on("data", (chunk) => (stderr += chunk));
    child.on("error", reject);
    child.on("close", (code) => resolve({ stdout, stderr, code }));
    child.stdin.write(inputLines.map((line) => line + "\n").join(""));
    child.stdin.end();
  });
}

function loadTranscript(): { requests: string[]; responses: string[] } {
  const lines = readFileSync(transcriptPath, "utf8").split("\n").filter((l) => l !== "");
  expect(lines.length % 2).toBe(0);
  const requests: string[] = [];
  const responses: string[] = [];
  for (let i = 0; i < lines.length; i += 2) {
    requests.push(lines[i]!);
    responses.push(lines[i + 1]!);
  }
  return { requests, responses };
}

describe("golden transcript", () => {
  it("replays byte-identically and exits 0", async () => {
    const { requests, responses } = loadTranscript();
    const result = await runServer(requests);
    expect(result.code).toBe(0);
    const got = result.stdout.split("\n").filter((l) => l !== "");
    expect(got).toEqual(responses);
  });

  it("reports the empty-subset baseline loss exactly", () => {
    const { requests, responses } = loadTranscript();
    const idx = requests.findIndex((r) => r.includes('"train_ids": []') && r.includes("eval_loss"));
    expect(idx).toBeGreaterThanOrEqual(0);
    const resp = JSON.parse(responses[idx]!) as { loss: number };
    expect(Math.abs(resp.loss - Math.exp(2.5) / 2)).toBeLessThan(1e-12);
  });

  it("exits 0 when stdin closes without a shutdown request", async () => {
    const result = await runServer(['{"op": "hello", "id": 1}']);
    expect(result.code).toBe(0);
    expect(result.stdout).toContain('"protocol":1');
  });

  it("fails fast with exit 2 on an unreadable config", async () => {
    const result = await new Promise<RunResult>((resolve, reject) => {
      const child = spawn("node", [mainPath, "/nonexistent/config.json"]);
      let stdout = "";
      let stderr = "";
      child.stdout.on("data", (chunk) => (stdout += chunk));
      child.stderr.on("data", (chunk) => (stderr += chunk));
      child.on("error", reject);
      child.on("close", (code) => resolve({ stdout, stderr, code }));
      child.stdin.end();
    });
    expect(result.code).toBe(2);
    expect(result.stderr).toContain("cannot read config");
  });
});
