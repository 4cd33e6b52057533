// Interactive tuning tool: sliders for the active hyperparameters with live
// warped-image, deformation-grid, and metric feedback.

import { ApiClient } from "./api.js";
import { RequestScheduler } from "./scheduler.js";
import {
  defaultState,
  pinSnapshot,
  stateFromQuery,
  stateToQuery,
  withMode,
  withPair,
  withSlider,
} from "./state.js";
import { drawImage, drawPolylines, formatMetrics, resultSource } from "./render.js";
import type {
  DisplayMode,
  HyperparameterSpec,
  RegisterRequest,
  RegisterResponse,
  ServiceInfo,
  ViewState,
} from "./types.js";

const SCALE = 4;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  parent?: HTMLElement,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  parent?.appendChild(node);
  return node;
}

class App {
  private state: ViewState;
  private lastResponse: RegisterResponse | null = null;
  private lastRequest: RegisterRequest | null = null;
  private scheduler: RequestScheduler<RegisterRequest, RegisterResponse>;
  private sliderInputs = new Map<string, HTMLInputElement>();
  private sliderLabels = new Map<string, HTMLElement>();

  constructor(
    private readonly api: ApiClient,
    private readonly info: ServiceInfo,
    private readonly root: HTMLElement,
  ) {
    this.state = stateFromQuery(
      window.location.search,
      info.hyperparameters,
      info.pairs[0]?.id ?? "",
    );
    this.scheduler = new RequestScheduler({
      send: (req) => this.api.register(req),
      onResult: (res) => this.applyResponse(res),
      onError: (err, req) => this.showError(err, req),
    });
    this.buildDom();
    this.syncControls();
    this.fetchCurrent(true);
  }

  private spec(name: string): HyperparameterSpec {
    return this.info.hyperparameters.find((h) => h.name === name)!;
  }

  private currentRequest(): RegisterRequest {
    const req: RegisterRequest = {
      pair_id: this.state.pair,
      lambda: this.state.sliders["lambda"] ?? 0.5,
    };
    for (const extra of ["gamma", "window", "bins"] as const) {
      if (extra in this.state.sliders) req[extra] = this.state.sliders[extra];
    }
    return req;
  }

  private setState(next: ViewState, immediate = false): void {
    this.state = next;
    history.replaceState(null, "", `?${stateToQuery(this.state)}`);
    this.syncControls();
    this.fetchCurrent(immediate);
  }

  private fetchCurrent(immediate: boolean): void {
    const req = this.currentRequest();
    this.lastRequest = req;
    if (immediate) this.scheduler.requestNow(req);
    else this.scheduler.request(req);
  }

  // ------------------------------------------------------------------ DOM

  private buildDom(): void {
    this.root.innerHTML = "";
    const bar = el("div", { class: "bar" }, this.root);

    const pairSel = el("select", { id: "pair" }, bar);
    for (const p of this.info.pairs) {
      const opt = el("option", { value: p.id }, pairSel);
      opt.textContent = `${p.id} (${p.moving} -> ${p.fixed})`;
    }
    pairSel.addEventListener("change", () =>
      this.setState(withPair(this.state, pairSel.value), true));

    const modeBox = el("span", { class: "modes" }, bar);
    for (const mode of ["warped", "difference", "grid", "labels"] as DisplayMode[]) {
      const label = el("label", {}, modeBox);
      const radio = el("input", { type: "radio", name: "mode", value: mode }, label);
      label.append(mode);
      radio.addEventListener("change", () => this.setState(withMode(this.state, mode)));
    }

    const tuneBtn = el("button", { id: "tune" }, bar);
    tuneBtn.textContent = "auto-tune";
    tuneBtn.addEventListener("click", () => this.runTune(tuneBtn));

    const pinBtn = el("button", { id: "pin" }, bar);
    pinBtn.textContent = "pin snapshot";
    pinBtn.addEventListener("click", () => this.pinCurrent());

    const sliders = el("div", { class: "sliders" }, this.root);
    for (const spec of this.info.hyperparameters) {
      const row = el("div", { class: "slider-row" }, sliders);
      const name = el("span", { class: "name" }, row);
      name.textContent = spec.name;
      const input = el("input", { type: "range" }, row);
      if (spec.discrete && spec.values) {
        input.min = "0";
        input.max = String(spec.values.length - 1);
        input.step = "1";
      } else {
        input.min = String(spec.range[0]);
        input.max = String(spec.range[1]);
        input.step = "0.001";
      }
      const value = el("span", { class: "value" }, row);
      input.addEventListener("input", () => {
        const raw = spec.discrete && spec.values
          ? spec.values[Number(input.value)]
          : Number(input.value);
        this.setState(withSlider(this.state, spec.name, raw, spec));
      });
      this.sliderInputs.set(spec.name, input);
      this.sliderLabels.set(spec.name, value);
    }

    const panels = el("div", { class: "panels" }, this.root);
    for (const id of ["moving", "fixed", "result"]) {
      const box = el("div", { class: "panel" }, panels);
      const title = el("div", { class: "title" }, box);
      title.textContent = id;
      el("canvas", { id: `canvas-${id}` }, box);
    }
    el("div", { id: "metrics", class: "metrics" }, this.root);
    el("div", { id: "error", class: "error hidden" }, this.root);
    el("div", { id: "snapshots", class: "snapshots" }, this.root);
  }

  private syncControls(): void {
    for (const spec of this.info.hyperparameters) {
      const input = this.sliderInputs.get(spec.name)!;
      const value = this.state.sliders[spec.name];
      input.value = spec.discrete && spec.values
        ? String(Math.max(0, spec.values.indexOf(value)))
        : String(value);
      this.sliderLabels.get(spec.name)!.textContent =
        spec.discrete ? String(value) : value.toFixed(3);
    }
    const pairSel = document.getElementById("pair") as HTMLSelectElement | null;
    if (pairSel) pairSel.value = this.state.pair;
    document.querySelectorAll<HTMLInputElement>("input[name=mode]").forEach((r) => {
      r.checked = r.value === this.state.mode;
    });
  }

  // ------------------------------------------------------------- painting

  private async applyResponse(res: RegisterResponse): Promise<void> {
    this.lastResponse = res;
    this.hideError();
    await drawImage(canvasOf("moving"), res.moving_png, SCALE);
    await drawImage(canvasOf("fixed"), res.fixed_png, SCALE);
    const result = canvasOf("result");
    await drawImage(result, resultSource(this.state.mode, res), SCALE);
    if (this.state.mode === "grid") {
      drawPolylines(result, res.grid_polylines, SCALE);
    }
    document.getElementById("metrics")!.textContent = formatMetrics(res);
  }

  private showError(err: unknown, req: RegisterRequest): void {
    const box = document.getElementById("error")!;
    box.classList.remove("hidden");
    box.innerHTML = "";
    box.append(`${err instanceof Error ? err.message : String(err)} `);
    const retry = el("button", {}, box as HTMLElement);
    retry.textContent = "retry";
    retry.addEventListener("click", () => {
      this.hideError();
      this.scheduler.requestNow(req);
    });
  }

  private hideError(): void {
    document.getElementById("error")!.classList.add("hidden");
  }

  private pinCurrent(): void {
    if (!this.lastResponse) return;
    this.state = pinSnapshot(this.state, {
      point: this.lastResponse.point,
      thumbnailPng: this.lastResponse.warped_png,
      metrics: this.lastResponse.metrics,
    });
    const strip = document.getElementById("snapshots")!;
    strip.innerHTML = "";
    for (const snap of this.state.snapshots) {
      const card = el("div", { class: "snapshot" }, strip as HTMLElement);
      const img = el("img", { src: `data:image/png;base64,${snap.thumbnailPng}` }, card);
      img.width = 64 * 2;
      const caption = el("div", {}, card);
      caption.textContent =
        `λ=${snap.point["lambda"]?.toFixed(3)} dice=${snap.metrics.dice_mean.toFixed(1)}`;
    }
  }

  private async runTune(btn: HTMLButtonElement): Promise<void> {
    btn.disabled = true;
    try {
      const done = await this.api.tune([this.state.pair], null, (p) => {
        // animate the slider along the optimizer trajectory
        const lam = p.hp["lambda"];
        if (lam !== undefined) {
          this.setState(withSlider(this.state, "lambda", lam, this.spec("lambda")));
        }
      });
      const lam = done.hp_star["lambda"];
      if (lam !== undefined) {
        this.setState(withSlider(this.state, "lambda", lam, this.spec("lambda")), true);
      }
    } catch (err) {
      this.showError(err, this.currentRequest());
    } finally {
      btn.disabled = false;
    }
  }
}

function canvasOf(id: string): HTMLCanvasElement {
  return document.getElementById(`canvas-${id}`) as HTMLCanvasElement;
}

async function boot(): Promise<void> {
  const params = new URLSearchParams(window.location.search);
  const api = new ApiClient(params.get("api") ?? "");
  const root = document.getElementById("app")!;
  try {
    const info = await api.info();
    new App(api, info, root);
  } catch (err) {
    root.textContent = `failed to reach the registration service: ${err}`;
  }
}

boot();
