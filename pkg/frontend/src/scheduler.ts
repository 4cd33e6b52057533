// Debounced, single-flight request scheduling for slider interaction.
//
// Policy: trailing-edge debounce (100 ms); at most one request in flight;
// while one is flying the newest desired value waits in a one-slot queue;
// a response is applied only if nothing newer has already been applied, so
// a superseded response can never overwrite a fresher frame.

export interface SchedulerOptions<Req, Res> {
  send: (req: Req) => Promise<Res>;
  onResult: (res: Res, req: Req) => void;
  onError?: (err: unknown, req: Req) => void;
  debounceMs?: number;
  timeoutMs?: number;
  setTimer?: (fn: () => void, ms: number) => unknown;
  clearTimer?: (handle: unknown) => void;
}

export class RequestScheduler<Req, Res> {
  private readonly opts: Required<Pick<SchedulerOptions<Req, Res>, "debounceMs" | "timeoutMs">> &
    SchedulerOptions<Req, Res>;
  private debounceHandle: unknown = null;
  private pending: Req | null = null;   // waiting for the debounce window
  private queued: Req | null = null;    // newest value arrived mid-flight
  private inFlight = false;
  private seqCounter = 0;
  private appliedSeq = 0;
  sentCount = 0;

  constructor(opts: SchedulerOptions<Req, Res>) {
    this.opts = {
      debounceMs: 100,
      timeoutMs: 5000,
      setTimer: (fn, ms) => setTimeout(fn, ms),
      clearTimer: (h) => clearTimeout(h as number),
      ...opts,
    };
  }

  /** Latest slider value; earlier unsent values are abandoned. */
  request(req: Req): void {
    this.pending = req;
    if (this.debounceHandle !== null) {
      this.opts.clearTimer!(this.debounceHandle);
    }
    this.debounceHandle = this.opts.setTimer!(() => {
      this.debounceHandle = null;
      this.flush();
    }, this.opts.debounceMs);
  }

  /** Bypass the debounce window (initial load, pair switch). */
  requestNow(req: Req): void {
    this.pending = req;
    this.flush();
  }

  private flush(): void {
    if (this.pending === null) return;
    if (this.inFlight) {
      this.queued = this.pending; // latest wins; older queued value dropped
      this.pending = null;
      return;
    }
    const req = this.pending;
    this.pending = null;
    this.dispatch(req);
  }

  private dispatch(req: Req): void {
    const seq = ++this.seqCounter;
    this.inFlight = true;
    this.sentCount += 1;
    let timedOut = false;
    const timeout = this.opts.setTimer!(() => {
      timedOut = true;
      this.inFlight = false;
      this.opts.onError?.(new Error(`request timed out after ${this.opts.timeoutMs} ms`), req);
      this.drainQueue();
    }, this.opts.timeoutMs);

    this.opts.send(req).then(
      (res) => {
        this.opts.clearTimer!(timeout);
        if (timedOut) return;
        this.inFlight = false;
        if (seq > this.appliedSeq) {
          this.appliedSeq = seq;
          this.opts.onResult(res, req);
        }
        this.drainQueue();
      },
      (err) => {
        this.opts.clearTimer!(timeout);
        if (timedOut) return;
        this.inFlight = false;
        this.opts.onError?.(err, req);
        this.drainQueue();
      },
    );
  }

  private drainQueue(): void {
    if (this.queued !== null && !this.inFlight) {
      const req = this.queued;
      this.queued = null;
      this.dispatch(req);
    }
  }
}
