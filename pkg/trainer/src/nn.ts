/**
 * Minimal 3D conv building blocks with hand-written backward passes.
 * Volumes are flat Float64Arrays indexed [c][z][y][x]; there is no batch
 * axis at this level, callers loop over views.
 */

import { Rng } from "./rng";

export interface Vol {
  c: number;
  d: number;
  h: number;
  w: number;
  data: Float64Array;
}

export function vol(c: number, d: number, h: number, w: number): Vol {
  return { c, d, h, w, data: new Float64Array(c * d * h * w) };
}

function outSize(n: number, stride: number): number {
  // kernel 3, padding 1
  return Math.floor((n + 2 - 3) / stride) + 1;
}

/** 3x3x3 convolution with padding 1. */
export class Conv3d {
  readonly inC: number;
  readonly outC: number;
  readonly stride: number;
  weight: Float64Array; // [oc][ic][kz][ky][kx]
  bias: Float64Array;
  gradWeight: Float64Array;
  gradBias: Float64Array;

  constructor(inC: number, outC: number, stride: number, rng: Rng) {
    this.inC = inC;
    this.outC = outC;
    this.stride = stride;
    const fanIn = inC * 27;
    const scale = Math.sqrt(2.0 / fanIn); // He init for the ReLU stack
    this.weight = new Float64Array(outC * inC * 27);
    for (let i = 0; i < this.weight.length; i++) this.weight[i] = scale * rng.gauss();
    this.bias = new Float64Array(outC);
    this.gradWeight = new Float64Array(this.weight.length);
    this.gradBias = new Float64Array(outC);
  }

  outShape(x: Vol): { d: number; h: number; w: number } {
    return { d: outSize(x.d, this.stride), h: outSize(x.h, this.stride), w: outSize(x.w, this.stride) };
  }

  forward(x: Vol): Vol {
    if (x.c !== this.inC) throw new Error(`conv expects ${this.inC} channels, got ${x.c}`);
    const { d: od, h: oh, w: ow } = this.outShape(x);
    const out = vol(this.outC, od, oh, ow);
    const s = this.stride;
    for (let oc = 0; oc < this.outC; oc++) {
      const wBase = oc * this.inC * 27;
      for (let oz = 0; oz < od; oz++) {
        for (let oy = 0; oy < oh; oy++) {
          for (let ox = 0; ox < ow; ox++) {
            let acc = this.bias[oc];
            for (let ic = 0; ic < this.inC; ic++) {
              const cBase = ic * x.d * x.h * x.w;
              const kBase = wBase + ic * 27;
              for (let kz = 0; kz < 3; kz++) {
                const iz = oz * s + kz - 1;
                if (iz < 0 || iz >= x.d) continue;
                for (let ky = 0; ky < 3; ky++) {
                  const iy = oy * s + ky - 1;
                  if (iy < 0 || iy >= x.h) continue;
                  for (let kx = 0; kx < 3; kx++) {
                    const ix = ox * s + kx - 1;
                    if (ix < 0 || ix >= x.w) continue;
                    acc +=
                      this.weight[kBase + (kz * 3 + ky) * 3 + kx] *
                      x.data[cBase + (iz * x.h + iy) * x.w + ix];
                  }
                }
              }
            }
            out.data[((oc * od + oz) * oh + oy) * ow + ox] = acc;
          }
        }
      }
    }
    return out;
  }

  /** Accumulates weight/bias grads and returns the input gradient. */
  backward(x: Vol, dout: Vol): Vol {
    const { d: od, h: oh, w: ow } = this.outShape(x);
    const dx = vol(x.c, x.d, x.h, x.w);
    const s = this.stride;
    for (let oc = 0; oc < this.outC; oc++) {
      const wBase = oc * this.inC * 27;
      for (let oz = 0; oz < od; oz++) {
        for (let oy = 0; oy < oh; oy++) {
          for (let ox = 0; ox < ow; ox++) {
            const g = dout.data[((oc * od + oz) * oh + oy) * ow + ox];
            if (g === 0) continue;
            this.gradBias[oc] += g;
            for (let ic = 0; ic < this.inC; ic++) {
              const cBase = ic * x.d * x.h * x.w;
              const kBase = wBase + ic * 27;
              for (let kz = 0; kz < 3; kz++) {
                const iz = oz * s + kz - 1;
                if (iz < 0 || iz >= x.d) continue;
                for (let ky = 0; ky < 3; ky++) {
                  const iy = oy * s + ky - 1;
                  if (iy < 0 || iy >= x.h) continue;
                  for (let kx = 0; kx < 3; kx++) {
                    const ix = ox * s + kx - 1;
                    if (ix < 0 || ix >= x.w) continue;
                    const xi = cBase + (iz * x.h + iy) * x.w + ix;
                    const wi = kBase + (kz * 3 + ky) * 3 + kx;
                    this.gradWeight[wi] += g * x.data[xi];
                    dx.data[xi] += g * this.weight[wi];
                  }
                }
              }
            }
          }
        }
      }
    }
    return dx;
  }
}

export function reluInPlace(x: Vol): Vol {
  for (let i = 0; i < x.data.length; i++) if (x.data[i] < 0) x.data[i] = 0;
  return x;
}

/** Gradient of ReLU given the post-activation values. */
export function reluBackward(activated: Vol, dout: Vol): Vol {
  const dx = vol(dout.c, dout.d, dout.h, dout.w);
  for (let i = 0; i < dout.data.length; i++) {
    dx.data[i] = activated.data[i] > 0 ? dout.data[i] : 0;
  }
  return dx;
}

export function globalAvgPool(x: Vol): Float64Array {
  const n = x.d * x.h * x.w;
  const out = new Float64Array(x.c);
  for (let c = 0; c < x.c; c++) {
    let acc = 0;
    const base = c * n;
    for (let i = 0; i < n; i++) acc += x.data[base + i];
    out[c] = acc / n;
  }
  return out;
}

export function globalAvgPoolBackward(x: Vol, dpooled: Float64Array): Vol {
  const n = x.d * x.h * x.w;
  const dx = vol(x.c, x.d, x.h, x.w);
  for (let c = 0; c < x.c; c++) {
    const g = dpooled[c] / n;
    const base = c * n;
    for (let i = 0; i < n; i++) dx.data[base + i] = g;
  }
  return dx;
}

/** Dense layer on row-major matrices (rows x inDim). */
export class Linear {
  readonly inDim: number;
  readonly outDim: number;
  weight: Float64Array; // [in][out]
  bias: Float64Array;
  gradWeight: Float64Array;
  gradBias: Float64Array;

  constructor(inDim: number, outDim: number, rng: Rng) {
    this.inDim = inDim;
    this.outDim = outDim;
    const scale = Math.sqrt(1.0 / inDim);
    this.weight = new Float64Array(inDim * outDim);
    for (let i = 0; i < this.weight.length; i++) this.weight[i] = scale * rng.gauss();
    this.bias = new Float64Array(outDim);
    this.gradWeight = new Float64Array(this.weight.length);
    this.gradBias = new Float64Array(outDim);
  }

  forward(x: Float64Array, rows: number): Float64Array {
    const out = new Float64Array(rows * this.outDim);
    for (let r = 0; r < rows; r++) {
      for (let j = 0; j < this.outDim; j++) {
        let acc = this.bias[j];
        for (let i = 0; i < this.inDim; i++) {
          acc += x[r * this.inDim + i] * this.weight[i * this.outDim + j];
        }
        out[r * this.outDim + j] = acc;
      }
    }
    return out;
  }

  backward(x: Float64Array, rows: number, dout: Float64Array): Float64Array {
    const dx = new Float64Array(rows * this.inDim);
    for (let r = 0; r < rows; r++) {
      for (let j = 0; j < this.outDim; j++) {
        const g = dout[r * this.outDim + j];
        this.gradBias[j] += g;
        for (let i = 0; i < this.inDim; i++) {
          this.gradWeight[i * this.outDim + j] += g * x[r * this.inDim + i];
          dx[r * this.inDim + i] += g * this.weight[i * this.outDim + j];
        }
      }
    }
    return dx;
  }
}
