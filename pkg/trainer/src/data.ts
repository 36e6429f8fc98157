/**
 * Readers for the two upstream on-disk formats the trainer consumes:
 * augmented view-pair datasets (pairs_index.json + f32le payload) and
 * per-patient patch stores (<id>.patches.json + i16le payload). Both keep
 * voxels in [c][z][y][x] order, which is also the layout the encoder eats,
 * so no transposition happens here.
 */

import * as fs from "node:fs";
import * as path from "node:path";

export interface PairRecord {
  patientId: string;
  patchIndex: number;
  viewA: Float64Array;
  viewB: Float64Array;
}

export interface PairDataset {
  channels: number;
  patchSize: number;
  records: PairRecord[];
}

export function readPairDataset(dir: string): PairDataset {
  const indexPath = fs.statSync(dir).isDirectory() ? path.join(dir, "pairs_index.json") : dir;
  const index = JSON.parse(fs.readFileSync(indexPath, "utf-8"));
  if (index.magic !== "PAIRS1") throw new Error(`${indexPath} is not a pair dataset index`);
  const c: number = index.channels;
  const p: number = index.patch_size;
  const viewLen = c * p * p * p;
  const raw = fs.readFileSync(path.join(path.dirname(indexPath), index.payload));
  const expected = index.n * 2 * viewLen * 4;
  if (raw.length !== expected) {
    throw new Error(`payload size mismatch: got ${raw.length} bytes, expected ${expected}`);
  }
  const flat = new Float32Array(raw.buffer, raw.byteOffset, index.n * 2 * viewLen);
  const records: PairRecord[] = index.records.map((rec: any, i: number) => ({
    patientId: String(rec.patient_id),
    patchIndex: Number(rec.patch_index),
    viewA: Float64Array.from(flat.subarray(i * 2 * viewLen, i * 2 * viewLen + viewLen)),
    viewB: Float64Array.from(flat.subarray(i * 2 * viewLen + viewLen, (i + 1) * 2 * viewLen)),
  }));
  return { channels: c, patchSize: p, records };
}

export interface PatchStore {
  patientId: string;
  subjectLabel: string;
  split: string;
  channels: number;
  patchSize: number;
  normal: boolean[];
  /** min-max normalized [0,1] views, one per patch, [c][z][y][x]. */
  views: Float64Array[];
}

export function normalizePatch(values: Int16Array): Float64Array {
  let lo = Infinity;
  let hi = -Infinity;
  for (const v of values) {
    if (v < lo) lo = v;
    if (v > hi) hi = v;
  }
  const out = new Float64Array(values.length);
  if (hi === lo) return out;
  const scale = 1.0 / (hi - lo);
  for (let i = 0; i < values.length; i++) out[i] = (values[i] - lo) * scale;
  return out;
}

export function readPatchStore(metaPath: string): PatchStore {
  const meta = JSON.parse(fs.readFileSync(metaPath, "utf-8"));
  if (meta.magic !== "PATCHES1") throw new Error(`${metaPath} is not a patch store`);
  const c: number = meta.channels;
  const p: number = meta.patch_size;
  const n: number = meta.n;
  const recLen = c * p * p * p;
  const raw = fs.readFileSync(path.join(path.dirname(metaPath), meta.payload));
  if (raw.length !== n * recLen * 2) {
    throw new Error(`payload size mismatch for ${metaPath}`);
  }
  const flat = new Int16Array(raw.buffer, raw.byteOffset, n * recLen);
  const views: Float64Array[] = [];
  for (let i = 0; i < n; i++) {
    views.push(normalizePatch(flat.subarray(i * recLen, (i + 1) * recLen) as Int16Array));
  }
  return {
    patientId: meta.patient_id,
    subjectLabel: meta.subject_label,
    split: meta.split,
    channels: c,
    patchSize: p,
    normal: meta.normal.map(Boolean),
    views,
  };
}

export function listPatchStores(dir: string, split: string): PatchStore[] {
  const files = fs
    .readdirSync(dir)
    .filter((f) => f.endsWith(".patches.json"))
    .sort();
  if (files.length === 0) throw new Error(`no patch stores under ${dir}`);
  const stores = files.map((f) => readPatchStore(path.join(dir, f)));
  const kept = split === "all" ? stores : stores.filter((s) => s.split === split);
  if (kept.length === 0) throw new Error(`no patients in split '${split}'`);
  return kept;
}
