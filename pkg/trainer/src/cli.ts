/**
 * trainer CLI:
 *   train  --pairs DIR [--config CFG.json] [--seed N] --out CKPT.json
 *   export --ckpt CKPT.json --patches DIR [--split all|train|val|test] --out FILE.emb1
 */

import { loadConfig } from "./config";
import { readPairDataset } from "./data";
import { exportEmbeddings, loadCheckpoint, saveCheckpoint, trainContrastive } from "./train";

function parseFlags(argv: string[]): Map<string, string> {
  const flags = new Map<string, string>();
  for (let i = 0; i < argv.length; i += 2) {
    if (!argv[i].startsWith("--") || i + 1 >= argv.length) {
      throw new UsageError(`bad argument ${argv[i]}`);
    }
    flags.set(argv[i].slice(2), argv[i + 1]);
  }
  return flags;
}

class UsageError extends Error {}

function need(flags: Map<string, string>, key: string): string {
  const v = flags.get(key);
  if (v === undefined) throw new UsageError(`missing required --${key}`);
  return v;
}

export function main(argv: string[]): number {
  try {
    const command = argv[0];
    const flags = parseFlags(argv.slice(1));
    if (command === "train") {
      const cfg = loadConfig(flags.get("config"));
      if (flags.has("seed")) cfg.seed = Number(flags.get("seed"));
      const ds = readPairDataset(need(flags, "pairs"));
      const result = trainContrastive(ds, cfg);
      saveCheckpoint(result, need(flags, "out"));
      const last = result.trace[result.trace.length - 1];
      console.log(
        `trained ${cfg.epochs} epochs on ${ds.records.length} pairs; ` +
          `loss ${result.trace[0].toFixed(4)} -> ${last.toFixed(4)}`,
      );
      return 0;
    }
    if (command === "export") {
      const encoder = loadCheckpoint(need(flags, "ckpt"));
      const n = exportEmbeddings(
        encoder,
        need(flags, "patches"),
        need(flags, "out"),
        flags.get("split") ?? "all",
      );
      console.log(`exported ${n} embeddings (d=${encoder.embedWidth()})`);
      return 0;
    }
    throw new UsageError(`unknown command ${command ?? "(none)"}; use train or export`);
  } catch (err) {
    if (err instanceof UsageError) {
      console.error(`usage error: ${err.message}`);
      return 2;
    }
    console.error(`error: ${err instanceof Error ? err.message : err}`);
    return 1;
  }
}

if (require.main === module) {
  process.exit(main(process.argv.slice(2)));
}
