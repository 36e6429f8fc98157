/**
 * Normalized-temperature cross-entropy over in-batch pairs: the two views of
 * a patch are positives, every other view in the batch is a negative. With
 * near-uniform similarities the expected loss is ln(2B - 1).
 */

export interface NtxentResult {
  loss: number;
  /** Gradient of the mean loss w.r.t. the (unnormalized) projections. */
  dProj: Float64Array;
}

/**
 * Projections are laid out pairs-first: rows 0..B-1 are view A, rows
 * B..2B-1 are view B, so the positive of row i is (i + B) mod 2B.
 */
export function ntxent(proj: Float64Array, rows: number, dim: number, tau: number): NtxentResult {
  if (rows % 2 !== 0 || rows < 4) throw new Error("ntxent needs an even batch of >= 2 pairs");
  const b = rows / 2;

  // row-normalize
  const norms = new Float64Array(rows);
  const zn = new Float64Array(rows * dim);
  for (let r = 0; r < rows; r++) {
    let sq = 0;
    for (let j = 0; j < dim; j++) sq += proj[r * dim + j] ** 2;
    const n = Math.sqrt(sq) || 1e-12;
    norms[r] = n;
    for (let j = 0; j < dim; j++) zn[r * dim + j] = proj[r * dim + j] / n;
  }

  // cosine similarity matrix
  const sim = new Float64Array(rows * rows);
  for (let i = 0; i < rows; i++) {
    for (let k = i + 1; k < rows; k++) {
      let acc = 0;
      for (let j = 0; j < dim; j++) acc += zn[i * dim + j] * zn[k * dim + j];
      sim[i * rows + k] = acc;
      sim[k * rows + i] = acc;
    }
  }

  // per-anchor cross-entropy and softmax gradient over the off-diagonal
  let loss = 0;
  const dSim = new Float64Array(rows * rows);
  for (let i = 0; i < rows; i++) {
    const pos = (i + b) % rows;
    let maxLogit = -Infinity;
    for (let k = 0; k < rows; k++) {
      if (k === i) continue;
      const l = sim[i * rows + k] / tau;
      if (l > maxLogit) maxLogit = l;
    }
    let denom = 0;
    for (let k = 0; k < rows; k++) {
      if (k === i) continue;
      denom += Math.exp(sim[i * rows + k] / tau - maxLogit);
    }
    const lse = maxLogit + Math.log(denom);
    loss += lse - sim[i * rows + pos] / tau;
    for (let k = 0; k < rows; k++) {
      if (k === i) continue;
      const p = Math.exp(sim[i * rows + k] / tau - lse);
      dSim[i * rows + k] += (p - (k === pos ? 1 : 0)) / (rows * tau);
    }
  }
  loss /= rows;

  // d(zn) = (G + G^T) zn since sim is symmetric in its two arguments
  const dZn = new Float64Array(rows * dim);
  for (let i = 0; i < rows; i++) {
    for (let k = 0; k < rows; k++) {
      const g = dSim[i * rows + k] + dSim[k * rows + i];
      if (g === 0) continue;
      for (let j = 0; j < dim; j++) dZn[i * dim + j] += g * zn[k * dim + j];
    }
  }

  // through the row normalization: dz = (dzn - zn (zn . dzn)) / ||z||
  const dProj = new Float64Array(rows * dim);
  for (let r = 0; r < rows; r++) {
    let dot = 0;
    for (let j = 0; j < dim; j++) dot += dZn[r * dim + j] * zn[r * dim + j];
    for (let j = 0; j < dim; j++) {
      dProj[r * dim + j] = (dZn[r * dim + j] - zn[r * dim + j] * dot) / norms[r];
    }
  }
  return { loss, dProj };
}
