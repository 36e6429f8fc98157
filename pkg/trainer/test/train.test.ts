import assert from "node:assert/strict";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { test } from "node:test";

import { DEFAULT_CONFIG, TrainerConfig } from "../src/config";
import { PairDataset, PairRecord } from "../src/data";
import { ntxent } from "../src/loss";
import { Encoder } from "../src/encoder";
import { Rng } from "../src/rng";
import { loadCheckpoint, saveCheckpoint, trainContrastive } from "../src/train";

const CFG: TrainerConfig = {
  ...DEFAULT_CONFIG,
  embedDim: 16,
  projDim: 8,
  headHidden: 16,
  temperature: 0.2,
  batchSize: 32,
  epochs: 5,
  learningRate: 1e-3,
  seed: 4,
};

/** Smooth random patches; the two views differ by small voxel noise. */
function syntheticPairs(n: number, p: number, seed: number): PairDataset {
  const rng = new Rng(seed);
  const records: PairRecord[] = [];
  for (let r = 0; r < n; r++) {
    const corners = new Float64Array(8);
    for (let i = 0; i < 8; i++) corners[i] = rng.next();
    const base = new Float64Array(p * p * p);
    for (let z = 0; z < p; z++) {
      for (let y = 0; y < p; y++) {
        for (let x = 0; x < p; x++) {
          const fz = z / (p - 1);
          const fy = y / (p - 1);
          const fx = x / (p - 1);
          let acc = 0;
          for (let cz = 0; cz < 2; cz++) {
            for (let cy = 0; cy < 2; cy++) {
              for (let cx = 0; cx < 2; cx++) {
                const w =
                  (cz ? fz : 1 - fz) * (cy ? fy : 1 - fy) * (cx ? fx : 1 - fx);
                acc += w * corners[(cz * 2 + cy) * 2 + cx];
              }
            }
          }
          base[(z * p + y) * p + x] = acc;
        }
      }
    }
    const view = () => {
      const v = new Float64Array(base.length);
      for (let i = 0; i < v.length; i++) {
        v[i] = Math.min(1, Math.max(0, base[i] + 0.02 * rng.gauss()));
      }
      return v;
    };
    records.push({ patientId: `p${r % 10}`, patchIndex: r, viewA: view(), viewB: view() });
  }
  return { channels: 1, patchSize: p, records };
}

test("initial encoder loss sits at the uniform-similarity value", () => {
  const ds = syntheticPairs(64, 8, 1);
  const encoder = new Encoder(CFG, 1, 8);
  const views: Float64Array[] = [];
  for (let i = 0; i < 32; i++) views.push(ds.records[i].viewA);
  for (let i = 0; i < 32; i++) views.push(ds.records[i].viewB);
  const cache = encoder.forward(views);
  const { loss } = ntxent(cache.projections, 64, CFG.projDim, CFG.temperature);
  const expected = Math.log(63);
  assert.ok(
    Math.abs(loss - expected) <= 0.05 * expected,
    `init loss ${loss} not within 5% of ln(63)=${expected}`,
  );
});

test("five epochs on 500 synthetic pairs cut the loss by at least 20%", () => {
  const ds = syntheticPairs(500, 8, 2);
  const { trace } = trainContrastive(ds, CFG);
  assert.equal(trace.length, 5);
  assert.ok(
    trace[4] <= 0.8 * trace[0],
    `loss only moved ${trace[0]} -> ${trace[4]}`,
  );
});

test("training is deterministic per seed", () => {
  const ds = syntheticPairs(100, 8, 3);
  const cfg = { ...CFG, epochs: 2 };
  const a = trainContrastive(ds, cfg);
  const b = trainContrastive(ds, cfg);
  assert.deepEqual(a.trace, b.trace);
  const pa = a.encoder.params();
  const pb = b.encoder.params();
  for (let i = 0; i < pa.length; i++) assert.deepEqual(Array.from(pa[i]), Array.from(pb[i]));
});

test("checkpoint round trip reproduces embeddings", () => {
  const ds = syntheticPairs(64, 8, 5);
  const result = trainContrastive(ds, { ...CFG, epochs: 1 });
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "ckpt-"));
  const file = path.join(dir, "enc.ckpt.json");
  saveCheckpoint(result, file);
  const restored = loadCheckpoint(file);
  const views = [ds.records[0].viewA, ds.records[1].viewB];
  assert.deepEqual(
    Array.from(restored.embedViews(views)),
    Array.from(result.encoder.embedViews(views)),
  );
});

test("empty dataset and degenerate configs are rejected", () => {
  assert.throws(
    () => trainContrastive({ channels: 1, patchSize: 8, records: [] }, CFG),
    /empty/,
  );
  assert.throws(() => trainContrastive(syntheticPairs(8, 8, 6), { ...CFG, temperature: 0 }));
  assert.throws(() => trainContrastive(syntheticPairs(8, 8, 6), { ...CFG, batchSize: 1 }));
});
