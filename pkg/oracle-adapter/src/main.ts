/**
 * Entry point: `node dist/main.js <config.json>` starts an oracle
 * process speaking protocol v1 on stdin/stdout.
 */

import { loadConfig } from "./config.js";
import { makeOracle } from "./oracle.js";
import { serve } from "./server.js";

async function main(): Promise<void> {
  const configPath = process.argv[2];
  if (configPath === undefined) {
    process.stderr.write("usage: main.js <config.json>\n");
    process.exit(2);
  }
  let oracle;
  try {
    oracle = makeOracle(loadConfig(configPath));
  } catch (err) {
    process.stderr.write(`oracle-adapter: ${(err as Error).message}\n`);
    process.exit(2);
  }
  const code = await serve(oracle, process.stdin, process.stdout);
  process.exit(code);
}

void main();
