// Typed client for the registration service; the UI's only data source.

import { readSSE } from "./sse.js";
import type {
  RegisterRequest,
  RegisterResponse,
  ServiceInfo,
  TuneDone,
  TuneProgress,
} from "./types.js";

export class ApiClient {
  constructor(private readonly base: string = "") {}

  async info(): Promise<ServiceInfo> {
    const resp = await fetch(`${this.base}/api/info`);
    if (!resp.ok) throw new Error(`info failed: ${resp.status}`);
    return (await resp.json()) as ServiceInfo;
  }

  async register(req: RegisterRequest): Promise<RegisterResponse> {
    const resp = await fetch(`${this.base}/api/register`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(req),
    });
    if (!resp.ok) {
      const body = await resp.json().catch(() => ({}));
      throw new Error(`register failed: ${resp.status} ${(body as any).error ?? ""}`);
    }
    return (await resp.json()) as RegisterResponse;
  }

  async tune(
    pairIds: string[],
    init: Record<string, number> | null,
    onProgress: (p: TuneProgress) => void,
  ): Promise<TuneDone> {
    const resp = await fetch(`${this.base}/api/tune`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ pair_ids: pairIds, init }),
    });
    if (resp.status === 409) throw new Error("a tune is already running");
    if (!resp.ok || !resp.body) throw new Error(`tune failed: ${resp.status}`);
    let done: TuneDone | null = null;
    await readSSE(resp.body, (event) => {
      if (event.event === "progress") onProgress(event.data as TuneProgress);
      else if (event.event === "done") done = event.data as TuneDone;
    });
    if (!done) throw new Error("tune stream ended without a result");
    return done;
  }
}
