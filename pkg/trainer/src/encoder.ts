/**
 * Small 3D convolutional encoder for cubic multi-channel patches, with a
 * projection head for the contrastive objective. Presets share one
 * architecture: a stride-2 entry convolution per stage, optional residual
 * units, global average pooling, a linear embedding layer, and a two-layer
 * head.
 */

import { TrainerConfig, presetStages } from "./config";
import {
  Conv3d,
  Linear,
  Vol,
  globalAvgPool,
  globalAvgPoolBackward,
  reluBackward,
  reluInPlace,
  vol,
} from "./nn";
import { Rng } from "./rng";

interface ResidualUnit {
  conv1: Conv3d;
  conv2: Conv3d;
}

interface StageCache {
  entryIn: Vol;
  entryOut: Vol; // post-relu
  unitCaches: { x: Vol; a1: Vol; y: Vol }[];
}

export interface ForwardCache {
  viewStages: StageCache[][]; // [view][stage]
  pooledIn: Vol[]; // final conv output per view (pre-pool)
  pooled: Float64Array; // B x lastWidth
  embeddings: Float64Array; // B x embedDim (pre-head)
  headHidden: Float64Array; // B x headHidden (post-relu)
  projections: Float64Array; // B x projDim
  rows: number;
}

export class Encoder {
  readonly cfg: TrainerConfig;
  readonly inChannels: number;
  readonly patchSize: number;
  readonly lastWidth: number;
  stages: { entry: Conv3d; units: ResidualUnit[] }[] = [];
  embed: Linear;
  headFc1: Linear;
  headFc2: Linear;

  constructor(cfg: TrainerConfig, inChannels: number, patchSize: number) {
    this.cfg = cfg;
    this.inChannels = inChannels;
    this.patchSize = patchSize;
    const rng = new Rng(cfg.seed ^ 0x5eed);
    const { widths, units } = presetStages(cfg.preset);
    let c = inChannels;
    for (let s = 0; s < widths.length; s++) {
      const entry = new Conv3d(c, widths[s], 2, rng);
      const stageUnits: ResidualUnit[] = [];
      for (let u = 0; u < units[s]; u++) {
        stageUnits.push({
          conv1: new Conv3d(widths[s], widths[s], 1, rng),
          conv2: new Conv3d(widths[s], widths[s], 1, rng),
        });
      }
      this.stages.push({ entry, units: stageUnits });
      c = widths[s];
    }
    this.lastWidth = c;
    this.embed = new Linear(c, cfg.embedDim, rng);
    this.headFc1 = new Linear(cfg.embedDim, cfg.headHidden, rng);
    this.headFc2 = new Linear(cfg.headHidden, cfg.projDim, rng);
  }

  convs(): Conv3d[] {
    const out: Conv3d[] = [];
    for (const stage of this.stages) {
      out.push(stage.entry);
      for (const u of stage.units) out.push(u.conv1, u.conv2);
    }
    return out;
  }

  params(): Float64Array[] {
    const out: Float64Array[] = [];
    for (const conv of this.convs()) out.push(conv.weight, conv.bias);
    for (const lin of [this.embed, this.headFc1, this.headFc2]) out.push(lin.weight, lin.bias);
    return out;
  }

  grads(): Float64Array[] {
    const out: Float64Array[] = [];
    for (const conv of this.convs()) out.push(conv.gradWeight, conv.gradBias);
    for (const lin of [this.embed, this.headFc1, this.headFc2]) {
      out.push(lin.gradWeight, lin.gradBias);
    }
    return out;
  }

  zeroGrads(): void {
    for (const g of this.grads()) g.fill(0);
  }

  private forwardStages(view: Float64Array): { stages: StageCache[]; out: Vol } {
    const p = this.patchSize;
    let x: Vol = { c: this.inChannels, d: p, h: p, w: p, data: Float64Array.from(view) };
    const caches: StageCache[] = [];
    for (const stage of this.stages) {
      const entryIn = x;
      const entryOut = reluInPlace(stage.entry.forward(x));
      const unitCaches: { x: Vol; a1: Vol; y: Vol }[] = [];
      let cur = entryOut;
      for (const unit of stage.units) {
        const a1 = reluInPlace(unit.conv1.forward(cur));
        const z = unit.conv2.forward(a1);
        for (let i = 0; i < z.data.length; i++) z.data[i] += cur.data[i];
        const y = reluInPlace(z);
        unitCaches.push({ x: cur, a1, y });
        cur = y;
      }
      caches.push({ entryIn, entryOut, unitCaches });
      x = cur;
    }
    return { stages: caches, out: x };
  }

  private backwardStages(cache: StageCache[], dout: Vol): void {
    let grad = dout;
    for (let s = this.stages.length - 1; s >= 0; s--) {
      const stage = this.stages[s];
      const sc = cache[s];
      for (let u = stage.units.length - 1; u >= 0; u--) {
        const unit = stage.units[u];
        const uc = sc.unitCaches[u];
        const dz = reluBackward(uc.y, grad);
        const da1 = unit.conv2.backward(uc.a1, dz);
        const da1Pre = reluBackward(uc.a1, da1);
        const dxConv = unit.conv1.backward(uc.x, da1Pre);
        for (let i = 0; i < dxConv.data.length; i++) dxConv.data[i] += dz.data[i]; // skip path
        grad = dxConv;
      }
      const dEntry = reluBackward(sc.entryOut, grad);
      grad = stage.entry.backward(sc.entryIn, dEntry);
    }
  }

  /** Forward a batch of flat [c][z][y][x] views. */
  forward(views: Float64Array[]): ForwardCache {
    const rows = views.length;
    const pooled = new Float64Array(rows * this.lastWidth);
    const viewStages: StageCache[][] = [];
    const pooledIn: Vol[] = [];
    for (let r = 0; r < rows; r++) {
      const { stages, out } = this.forwardStages(views[r]);
      viewStages.push(stages);
      pooledIn.push(out);
      pooled.set(globalAvgPool(out), r * this.lastWidth);
    }
    const embeddings = this.embed.forward(pooled, rows);
    const h1 = this.headFc1.forward(embeddings, rows);
    for (let i = 0; i < h1.length; i++) if (h1[i] < 0) h1[i] = 0;
    const projections = this.headFc2.forward(h1, rows);
    return { viewStages, pooledIn, pooled, embeddings, headHidden: h1, projections, rows };
  }

  /** Backpropagate a gradient on the projections; accumulates into grads. */
  backward(cache: ForwardCache, dProj: Float64Array): void {
    const rows = cache.rows;
    const dH1 = this.headFc2.backward(cache.headHidden, rows, dProj);
    for (let i = 0; i < dH1.length; i++) if (cache.headHidden[i] <= 0) dH1[i] = 0;
    const dEmbed = this.headFc1.backward(cache.embeddings, rows, dH1);
    const dPooled = this.embed.backward(cache.pooled, rows, dEmbed);
    for (let r = 0; r < rows; r++) {
      const dVec = dPooled.subarray(r * this.lastWidth, (r + 1) * this.lastWidth);
      const dOut = globalAvgPoolBackward(cache.pooledIn[r], dVec);
      this.backwardStages(cache.viewStages[r], dOut);
    }
  }

  /** Embeddings for export; no caches kept. */
  embedViews(views: Float64Array[]): Float64Array {
    const cache = this.forward(views);
    return this.cfg.embedFrom === "post-head" ? cache.projections : cache.embeddings;
  }

  embedWidth(): number {
    return this.cfg.embedFrom === "post-head" ? this.cfg.projDim : this.cfg.embedDim;
  }
}

export function dummyVol(): Vol {
  return vol(1, 1, 1, 1);
}
