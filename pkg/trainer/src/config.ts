import * as fs from "node:fs";

export type EncoderPreset = "tiny" | "resnet18-style" | "resnet34-style";

export interface TrainerConfig {
  preset: EncoderPreset;
  embedDim: number;
  projDim: number;
  headHidden: number;
  /** Which activations go into the EMB1 file. */
  embedFrom: "pre-head" | "post-head";
  temperature: number;
  batchSize: number; // number of pairs per step (2x views)
  epochs: number;
  learningRate: number;
  seed: number;
}

export const DEFAULT_CONFIG: TrainerConfig = {
  preset: "tiny",
  embedDim: 128,
  projDim: 64,
  headHidden: 128,
  embedFrom: "pre-head",
  temperature: 0.07,
  batchSize: 32,
  epochs: 5,
  learningRate: 1e-3,
  seed: 0,
};

/**
 * Stage layout per preset: channel widths (stride-2 entry conv per stage)
 * and the number of residual units after each entry. The resnet presets
 * mirror the 18/34 stage multiplicities at toy width; depth parity is the
 * point, not full-scale capacity.
 */
export function presetStages(preset: EncoderPreset): { widths: number[]; units: number[] } {
  switch (preset) {
    case "tiny":
      return { widths: [8, 16, 32], units: [0, 0, 0] };
    case "resnet18-style":
      return { widths: [8, 16, 32, 64], units: [2, 2, 2, 2] };
    case "resnet34-style":
      return { widths: [8, 16, 32, 64], units: [3, 4, 6, 3] };
  }
}

export function loadConfig(path?: string): TrainerConfig {
  if (!path) return { ...DEFAULT_CONFIG };
  const doc = JSON.parse(fs.readFileSync(path, "utf-8"));
  const cfg: TrainerConfig = { ...DEFAULT_CONFIG, ...doc };
  validateConfig(cfg);
  return cfg;
}

export function validateConfig(cfg: TrainerConfig): void {
  if (cfg.temperature <= 0) throw new Error("temperature must be > 0");
  if (cfg.embedDim < 2) throw new Error("embedDim must be >= 2");
  if (cfg.batchSize < 2) throw new Error("batchSize must be >= 2");
  if (cfg.epochs < 1) throw new Error("epochs must be >= 1");
  if (cfg.learningRate <= 0) throw new Error("learningRate must be > 0");
  if (!["tiny", "resnet18-style", "resnet34-style"].includes(cfg.preset)) {
    throw new Error(`unknown preset ${cfg.preset}`);
  }
  if (!["pre-head", "post-head"].includes(cfg.embedFrom)) {
    throw new Error(`unknown embedFrom ${cfg.embedFrom}`);
  }
}
