// Wire types mirroring the service's documented JSON schemas.

export interface HyperparameterSpec {
  name: string;
  range: [number, number];
  discrete: boolean;
  values?: number[];
}

export interface PairInfo {
  id: string;
  moving: string;
  fixed: string;
  split: string;
}

export interface ServiceInfo {
  model: { descriptor: Record<string, unknown>; metric: string; steps_trained: number };
  hyperparameters: HyperparameterSpec[];
  pairs: PairInfo[];
  dataset: { n_labels: number; shape: number[]; train_labels: number[]; held_out_labels: number[] };
}

export interface RegisterRequest {
  pair_id: string;
  lambda: number;
  gamma?: number;
  window?: number;
  bins?: number;
}

export interface RegisterMetrics {
  dice_mean: number;
  dice_per_label: Record<string, number>;
  jacobian_sd: number;
}

export interface RegisterResponse {
  pair_id: string;
  point: Record<string, number>;
  warped_png: string;
  difference_png: string;
  moving_png: string;
  fixed_png: string;
  warped_labels_png: string;
  grid_polylines: number[][][];
  metrics: RegisterMetrics;
  latency_ms: number;
}

export interface TuneProgress {
  iteration: number;
  hp: Record<string, number>;
  val_loss: number;
}

export interface TuneDone {
  hp_star: Record<string, number>;
  converged: boolean;
  iterations: number;
  wall_time_s: number;
}

export type DisplayMode = "warped" | "difference" | "grid" | "labels";

export interface Snapshot {
  readonly point: Readonly<Record<string, number>>;
  readonly thumbnailPng: string;
  readonly metrics: Readonly<RegisterMetrics>;
}

export interface ViewState {
  pair: string;
  sliders: Record<string, number>; // raw units per active hyperparameter
  mode: DisplayMode;
  snapshots: readonly Snapshot[];
}
