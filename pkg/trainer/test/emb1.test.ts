import assert from "node:assert/strict";
import * as fs from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { test } from "node:test";

import { EmbRow, readEmb1, writeEmb1 } from "../src/emb1";

function tmpFile(name: string): string {
  const dir = fs.mkdtempSync(path.join(os.tmpdir(), "emb1-"));
  return path.join(dir, name);
}

function rows(): EmbRow[] {
  return [
    { patientId: "alpha", patchIndex: 0, normalFlag: true, values: Float32Array.from([1.5, -2.25]) },
    { patientId: "alpha", patchIndex: 1, normalFlag: false, values: Float32Array.from([0.125, 3]) },
    { patientId: "beta", patchIndex: 0, normalFlag: true, values: Float32Array.from([-7, 0.5]) },
  ];
}

test("round trip preserves every field", () => {
  const out = tmpFile("a.emb1");
  writeEmb1(rows(), 2, "external", out);
  const back = readEmb1(out);
  assert.equal(back.d, 2);
  assert.equal(back.provenance, "external");
  assert.equal(back.rows.length, 3);
  for (let i = 0; i < 3; i++) {
    assert.equal(back.rows[i].patientId, rows()[i].patientId);
    assert.equal(back.rows[i].patchIndex, rows()[i].patchIndex);
    assert.equal(back.rows[i].normalFlag, rows()[i].normalFlag);
    assert.deepEqual(Array.from(back.rows[i].values), Array.from(rows()[i].values));
  }
});

test("header line is valid JSON with the declared magic", () => {
  const out = tmpFile("b.emb1");
  writeEmb1(rows(), 2, "external", out);
  const firstLine = fs.readFileSync(out).subarray(0, fs.readFileSync(out).indexOf(0x0a));
  const header = JSON.parse(firstLine.toString("utf-8"));
  assert.equal(header.magic, "EMB1");
  assert.equal(header.d, 2);
  assert.equal(header.n, 3);
});

test("duplicate (patient, patch) refused", () => {
  const bad = rows();
  bad[1] = { ...bad[1], patchIndex: 0 };
  assert.throws(() => writeEmb1(bad, 2, "external", tmpFile("c.emb1")), /duplicate/);
});

test("dimension mismatch refused", () => {
  const bad = rows();
  bad[2] = { ...bad[2], values: Float32Array.from([1, 2, 3]) };
  assert.throws(() => writeEmb1(bad, 2, "external", tmpFile("d.emb1")), /d=3/);
});

test("non-finite values refused", () => {
  const bad = rows();
  bad[0] = { ...bad[0], values: Float32Array.from([NaN, 1]) };
  assert.throws(() => writeEmb1(bad, 2, "external", tmpFile("e.emb1")), /non-finite/);
});

test("truncated payload detected on read", () => {
  const out = tmpFile("f.emb1");
  writeEmb1(rows(), 2, "external", out);
  const blob = fs.readFileSync(out);
  fs.writeFileSync(out, blob.subarray(0, blob.length - 3));
  assert.throws(() => readEmb1(out), /payload size mismatch/);
});
