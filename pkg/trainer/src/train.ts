/**
 * Contrastive training loop and embedding export. Deterministic per seed:
 * initialization and epoch shuffles derive from the configured seed, so two
 * runs on the same dataset produce identical loss traces and checkpoints.
 */

import * as fs from "node:fs";

import { TrainerConfig, validateConfig } from "./config";
import { PairDataset, listPatchStores } from "./data";
import { EmbRow, writeEmb1 } from "./emb1";
import { Encoder } from "./encoder";
import { ntxent } from "./loss";
import { Rng } from "./rng";

export interface TrainResult {
  encoder: Encoder;
  /** Mean contrastive loss per epoch. */
  trace: number[];
}

export function trainContrastive(ds: PairDataset, cfg: TrainerConfig): TrainResult {
  validateConfig(cfg);
  if (ds.records.length === 0) throw new Error("empty pair dataset");
  const encoder = new Encoder(cfg, ds.channels, ds.patchSize);
  const params = encoder.params();
  const grads = encoder.grads();
  const m = params.map((p) => new Float64Array(p.length));
  const v = params.map((p) => new Float64Array(p.length));
  const beta1 = 0.9;
  const beta2 = 0.999;
  const eps = 1e-8;
  let step = 0;

  const rng = new Rng(cfg.seed ^ 0x0dd5eed);
  const trace: number[] = [];
  const indices = ds.records.map((_, i) => i);

  for (let epoch = 0; epoch < cfg.epochs; epoch++) {
    rng.shuffle(indices);
    let epochLoss = 0;
    let counted = 0;
    for (let lo = 0; lo < indices.length; lo += cfg.batchSize) {
      const batch = indices.slice(lo, lo + cfg.batchSize);
      if (batch.length < 2) continue; // a lone pair has no negatives
      const views: Float64Array[] = [];
      for (const i of batch) views.push(ds.records[i].viewA);
      for (const i of batch) views.push(ds.records[i].viewB);
      const cache = encoder.forward(views);
      const { loss, dProj } = ntxent(cache.projections, views.length, cfg.projDim, cfg.temperature);
      if (!Number.isFinite(loss)) throw new Error(`non-finite loss at epoch ${epoch}`);
      encoder.zeroGrads();
      encoder.backward(cache, dProj);
      step += 1;
      const bc1 = 1 - Math.pow(beta1, step);
      const bc2 = 1 - Math.pow(beta2, step);
      for (let pi = 0; pi < params.length; pi++) {
        const p = params[pi];
        const g = grads[pi];
        const mi = m[pi];
        const vi = v[pi];
        for (let j = 0; j < p.length; j++) {
          mi[j] = beta1 * mi[j] + (1 - beta1) * g[j];
          vi[j] = beta2 * vi[j] + (1 - beta2) * g[j] * g[j];
          p[j] -= (cfg.learningRate * (mi[j] / bc1)) / (Math.sqrt(vi[j] / bc2) + eps);
        }
      }
      epochLoss += loss * batch.length;
      counted += batch.length;
    }
    if (counted === 0) throw new Error("batch size leaves no usable batches");
    trace.push(epochLoss / counted);
  }
  return { encoder, trace };
}

export interface Checkpoint {
  magic: "CKPT1";
  config: TrainerConfig;
  inChannels: number;
  patchSize: number;
  trace: number[];
  params: number[][];
}

export function saveCheckpoint(result: TrainResult, path: string): void {
  const ckpt: Checkpoint = {
    magic: "CKPT1",
    config: result.encoder.cfg,
    inChannels: result.encoder.inChannels,
    patchSize: result.encoder.patchSize,
    trace: result.trace,
    params: result.encoder.params().map((p) => Array.from(p)),
  };
  fs.writeFileSync(path, JSON.stringify(ckpt) + "\n");
}

export function loadCheckpoint(path: string): Encoder {
  const ckpt: Checkpoint = JSON.parse(fs.readFileSync(path, "utf-8"));
  if (ckpt.magic !== "CKPT1") throw new Error(`${path} is not a trainer checkpoint`);
  validateConfig(ckpt.config);
  const encoder = new Encoder(ckpt.config, ckpt.inChannels, ckpt.patchSize);
  const params = encoder.params();
  if (params.length !== ckpt.params.length) {
    throw new Error(`${path}: checkpoint parameter blocks do not match the architecture`);
  }
  for (let i = 0; i < params.length; i++) {
    if (params[i].length !== ckpt.params[i].length) {
      throw new Error(`${path}: parameter block ${i} has the wrong size`);
    }
    params[i].set(ckpt.params[i]);
  }
  return encoder;
}

/**
 * One EMB1 row per stored patch; normal flags are copied straight from the
 * extraction metadata.
 */
export function exportEmbeddings(
  encoder: Encoder,
  patchesDir: string,
  outPath: string,
  split: string = "all",
): number {
  const stores = listPatchStores(patchesDir, split);
  const d = encoder.embedWidth();
  const rows: EmbRow[] = [];
  for (const store of stores) {
    if (store.channels !== encoder.inChannels || store.patchSize !== encoder.patchSize) {
      throw new Error(
        `store ${store.patientId} is ${store.channels}ch p=${store.patchSize}, ` +
          `encoder expects ${encoder.inChannels}ch p=${encoder.patchSize}`,
      );
    }
    for (let lo = 0; lo < store.views.length; lo += 64) {
      const chunk = store.views.slice(lo, lo + 64);
      const emb = encoder.embedViews(chunk);
      for (let i = 0; i < chunk.length; i++) {
        rows.push({
          patientId: store.patientId,
          patchIndex: lo + i,
          normalFlag: store.normal[lo + i],
          values: Float32Array.from(emb.subarray(i * d, (i + 1) * d)),
        });
      }
    }
  }
  writeEmb1(rows, d, "external", outPath);
  return rows.length;
}
