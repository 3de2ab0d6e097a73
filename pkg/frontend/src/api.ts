export interface Status {
  mode: number;
  running: boolean;
  counts: Record<string, number>;
  total: number;
  dropped_frames: number;
  skip: number | null;
  threshold: number;
  fired: boolean;
  latest_large: boolean;
  connected_vehicles: number;
  upload_queue_depth: number;
}

export interface Counts {
  per_class: Record<string, number>;
  total: number;
}

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

function record(payload: unknown, what: string): Record<string, unknown> {
  if (typeof payload !== "object" || payload === null || Array.isArray(payload)) {
    throw new Error(`malformed ${what}: expected an object`);
  }
  return payload as Record<string, unknown>;
}

function num(obj: Record<string, unknown>, key: string, what: string): number {
  const value = obj[key];
  if (typeof value !== "number" || !Number.isFinite(value)) {
    throw new Error(`malformed ${what}: "${key}" is not a number`);
  }
  return value;
}

function bool(obj: Record<string, unknown>, key: string, what: string): boolean {
  const value = obj[key];
  if (typeof value !== "boolean") throw new Error(`malformed ${what}: "${key}" is not a boolean`);
  return value;
}

function countMap(value: unknown, what: string): Record<string, number> {
  const entries = record(value, what);
  const out: Record<string, number> = {};
  for (const [cls, n] of Object.entries(entries)) {
    if (typeof n !== "number") throw new Error(`malformed ${what}: count "${cls}" is not a number`);
    out[cls] = n;
  }
  return out;
}

export function parseStatus(payload: unknown): Status {
  const obj = record(payload, "/status payload");
  const skip = obj.skip;
  if (skip !== null && typeof skip !== "number") {
    throw new Error('malformed /status payload: "skip" is neither a number nor null');
  }
  return {
    mode: num(obj, "mode", "/status payload"),
    running: bool(obj, "running", "/status payload"),
    counts: countMap(obj.counts, "/status payload"),
    total: num(obj, "total", "/status payload"),
    dropped_frames: num(obj, "dropped_frames", "/status payload"),
    skip: skip as number | null,
    threshold: num(obj, "threshold", "/status payload"),
    fired: bool(obj, "fired", "/status payload"),
    latest_large: bool(obj, "latest_large", "/status payload"),
    connected_vehicles: num(obj, "connected_vehicles", "/status payload"),
    upload_queue_depth: num(obj, "upload_queue_depth", "/status payload"),
  };
}

export function parseCounts(payload: unknown): Counts {
  const obj = record(payload, "/counts payload");
  return {
    per_class: countMap(obj.per_class, "/counts payload"),
    total: num(obj, "total", "/counts payload"),
  };
}

/** Thin typed client for the RSU operator HTTP API. All mutations return the fresh status. */
export class RsuClient {
  constructor(readonly baseUrl: string = "") {}

  private async request(path: string, method: "GET" | "POST", body?: unknown): Promise<unknown> {
    const res = await fetch(`${this.baseUrl}${path}`, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload: unknown = await res.json().catch(() => ({}));
    if (!res.ok) {
      const detail =
        typeof payload === "object" && payload !== null && "error" in payload
          ? String((payload as { error: unknown }).error)
          : res.statusText;
      throw new ApiError(res.status, detail);
    }
    return payload;
  }

  async getStatus(): Promise<Status> {
    return parseStatus(await this.request("/status", "GET"));
  }

  async getCounts(): Promise<Counts> {
    return parseCounts(await this.request("/counts", "GET"));
  }

  async start(): Promise<Status> {
    return parseStatus(await this.request("/start", "POST", {}));
  }

  async stop(): Promise<Status> {
    return parseStatus(await this.request("/stop", "POST", {}));
  }

  async setMode(mode: 1 | 2): Promise<Status> {
    return parseStatus(await this.request("/mode", "POST", { mode }));
  }

  async setSkip(frames: number): Promise<Status> {
    return parseStatus(await this.request("/skip", "POST", { frames }));
  }

  async reset(): Promise<Status> {
    return parseStatus(await this.request("/reset", "POST", {}));
  }

  /** Cache-busted URL of the latest annotated frame. */
  frameUrl(version: number): string {
    return `${this.baseUrl}/frame/latest?v=${version}`;
  }

  eventsUrl(): string {
    return `${this.baseUrl}/events`;
  }
}
