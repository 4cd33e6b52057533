// ViewState management: URL round-tripping and immutable snapshot pinning.
// Sessions are shareable because pair, hyperparameters, and display mode
// all live in the query string.

import type { DisplayMode, HyperparameterSpec, Snapshot, ViewState } from "./types.js";

const MODES: DisplayMode[] = ["warped", "difference", "grid", "labels"];
const SLIDER_GRANULARITY = 0.001;

export function defaultState(specs: HyperparameterSpec[], firstPair: string): ViewState {
  const sliders: Record<string, number> = {};
  for (const spec of specs) {
    sliders[spec.name] = spec.discrete && spec.values
      ? spec.values[Math.floor(spec.values.length / 2)]
      : 0.5;
  }
  return { pair: firstPair, sliders, mode: "warped", snapshots: [] };
}

export function quantize(value: number, spec: HyperparameterSpec): number {
  if (spec.discrete && spec.values) {
    // snap to the closest raw set member
    return spec.values.reduce((best, v) =>
      Math.abs(v - value) < Math.abs(best - value) ? v : best, spec.values[0]);
  }
  const clamped = Math.min(spec.range[1], Math.max(spec.range[0], value));
  return Math.round(clamped / SLIDER_GRANULARITY) * SLIDER_GRANULARITY;
}

export function stateToQuery(state: ViewState): string {
  const params = new URLSearchParams();
  params.set("pair", state.pair);
  for (const [name, value] of Object.entries(state.sliders)) {
    params.set(name, String(value));
  }
  params.set("mode", state.mode);
  return params.toString();
}

export function stateFromQuery(
  query: string,
  specs: HyperparameterSpec[],
  fallbackPair: string,
): ViewState {
  const params = new URLSearchParams(query);
  const state = defaultState(specs, fallbackPair);
  const pair = params.get("pair");
  if (pair) state.pair = pair;
  for (const spec of specs) {
    const raw = params.get(spec.name);
    if (raw !== null && !Number.isNaN(Number(raw))) {
      state.sliders[spec.name] = quantize(Number(raw), spec);
    }
  }
  const mode = params.get("mode") as DisplayMode | null;
  if (mode && MODES.includes(mode)) state.mode = mode;
  return state;
}

export function withSlider(state: ViewState, name: string, value: number,
                           spec: HyperparameterSpec): ViewState {
  return { ...state, sliders: { ...state.sliders, [name]: quantize(value, spec) } };
}

export function withMode(state: ViewState, mode: DisplayMode): ViewState {
  return { ...state, mode };
}

export function withPair(state: ViewState, pair: string): ViewState {
  return { ...state, pair };
}

export function pinSnapshot(state: ViewState, snapshot: Snapshot): ViewState {
  // snapshots are frozen at pin time and survive further slider moves
  const frozen: Snapshot = Object.freeze({
    point: Object.freeze({ ...snapshot.point }),
    thumbnailPng: snapshot.thumbnailPng,
    metrics: Object.freeze({ ...snapshot.metrics }),
  });
  return { ...state, snapshots: [...state.snapshots, frozen] };
}
