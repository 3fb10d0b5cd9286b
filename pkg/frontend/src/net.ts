/** HTTP client for the stream server.
 *
 * Guarantees the protocol invariants the viewer relies on: a chunk is
 * requested at most once per session (concurrent callers share the same
 * promise), at most `maxInFlight` chunk fetches run concurrently, and every
 * request is appended to a network log that tests can assert on.
 */

import type { ServerMetrics, StreamManifest } from './types.js';

export type FetchLike = (url: string) => Promise<{
  ok: boolean;
  status: number;
  arrayBuffer(): Promise<ArrayBuffer>;
  json(): Promise<unknown>;
}>;

export class HttpError extends Error {
  constructor(public readonly status: number, public readonly body: unknown,
              url: string) {
    super(`HTTP ${status} for ${url}`);
  }
}

export class ChunkClient {
  readonly log: string[] = [];
  /** chunk index -> byte length, for every chunk fully downloaded */
  readonly fetched = new Map<number, number>();
  private pending = new Map<number, Promise<number>>();
  private inFlight = 0;
  private queue: Array<() => void> = [];

  constructor(private readonly baseUrl: string,
              private readonly fetchImpl: FetchLike,
              private readonly maxInFlight = 2) {}

  private async request(route: string) {
    this.log.push(route);
    const resp = await this.fetchImpl(this.baseUrl + route);
    if (!resp.ok) {
      let body: unknown = null;
      try {
        body = await resp.json();
      } catch {
        /* not json */
      }
      throw new HttpError(resp.status, body, route);
    }
    return resp;
  }

  async manifest(): Promise<StreamManifest> {
    const resp = await this.request('/manifest');
    return (await resp.json()) as StreamManifest;
  }

  async metrics(): Promise<ServerMetrics> {
    const resp = await this.request('/metrics');
    return (await resp.json()) as ServerMetrics;
  }

  /** Download chunk i (idempotent); resolves to its byte length. */
  chunk(i: number): Promise<number> {
    const have = this.fetched.get(i);
    if (have !== undefined) {
      return Promise.resolve(have);
    }
    const pending = this.pending.get(i);
    if (pending) {
      return pending;
    }
    const job = this.withSlot(async () => {
      const resp = await this.request(`/chunk/${i}`);
      const bytes = (await resp.arrayBuffer()).byteLength;
      this.fetched.set(i, bytes);
      this.pending.delete(i);
      return bytes;
    });
    this.pending.set(i, job);
    return job;
  }

  async render(query: string): Promise<Uint8Array> {
    const resp = await this.request(`/render?${query}`);
    return new Uint8Array(await resp.arrayBuffer());
  }

  private async withSlot<T>(work: () => Promise<T>): Promise<T> {
    if (this.inFlight >= this.maxInFlight) {
      await new Promise<void>((resolve) => this.queue.push(resolve));
    }
    this.inFlight += 1;
    try {
      return await work();
    } finally {
      this.inFlight -= 1;
      const next = this.queue.shift();
      if (next) next();
    }
  }
}
