/** The player: timeline scrubbing with progressive chunk fetching, orbit
 * camera, decomposition overlay and a live bitrate meter.
 *
 * Scrubbing to time t first downloads every missing chunk up to ceil(t)
 * (each exactly once, at most two in flight), then requests a render at the
 * fractional time.  Orbit drags debounce render requests to at most ten per
 * second, and a request identical to the previous one reuses the cached
 * frame without touching the network.  A 409 from the server names the next
 * chunk to fetch; the viewer fetches it and retries once.
 */

import { ChunkClient, FetchLike, HttpError } from './net.js';
import { BitrateMeter, OrbitCamera } from './state.js';
import type { StreamManifest } from './types.js';

export interface ViewerOptions {
  baseUrl: string;
  fetchImpl: FetchLike;
  width?: number;
  height?: number;
  renderMinIntervalMs?: number;
  maxInFlight?: number;
}

export const TIME_RESOLUTION = 0.05;

export class Viewer {
  readonly client: ChunkClient;
  readonly camera = new OrbitCamera();
  readonly meter = new BitrateMeter();
  manifest: StreamManifest | null = null;
  t = 0;
  overlay = false;
  loading = false;
  onFrame: ((png: Uint8Array, query: string) => void) | null = null;

  private readonly width: number;
  private readonly height: number;
  private readonly minInterval: number;
  private lastQuery: string | null = null;
  private lastFrame: Uint8Array | null = null;
  private lastRenderAt = 0;
  private debounceTimer: ReturnType<typeof setTimeout> | null = null;

  constructor(opts: ViewerOptions) {
    this.client = new ChunkClient(opts.baseUrl, opts.fetchImpl,
                                  opts.maxInFlight ?? 2);
    this.width = opts.width ?? 128;
    this.height = opts.height ?? 128;
    this.minInterval = opts.renderMinIntervalMs ?? 100;
  }

  async connect(): Promise<StreamManifest> {
    this.manifest = await this.client.manifest();
    return this.manifest;
  }

  get maxTime(): number {
    if (!this.manifest) throw new Error('viewer is not connected');
    return this.manifest.model.T - 1;
  }

  /** Highest frame with a contiguous chunk prefix downloaded. */
  fetchedThrough(): number {
    let t = 0;
    while (this.client.fetched.has(t + 1)) t += 1;
    return t;
  }

  /** Scrub the timeline; resolves with the rendered frame. */
  async scrub(to: number): Promise<Uint8Array> {
    if (!this.manifest) throw new Error('viewer is not connected');
    const clamped = Math.max(0, Math.min(this.maxTime, to));
    this.t = Math.round(clamped / TIME_RESOLUTION) * TIME_RESOLUTION;
    const needed = Math.ceil(this.t);
    const missing: number[] = [];
    for (let i = 1; i <= needed; i++) {
      if (!this.client.fetched.has(i)) missing.push(i);
    }
    if (missing.length > 0) {
      this.loading = true;
      try {
        const sizes = await Promise.all(missing.map((i) => this.client.chunk(i)));
        sizes.forEach((bytes) => this.meter.addChunk(bytes));
      } finally {
        this.loading = false;
      }
    }
    return this.requestRender();
  }

  /** Apply an orbit drag; zero deltas reuse the cached frame. */
  orbit(dAzimuthDeg: number, dElevationDeg: number): Promise<Uint8Array> {
    if (dAzimuthDeg === 0 && dElevationDeg === 0 && this.lastFrame) {
      return Promise.resolve(this.lastFrame);
    }
    this.camera.rotate(dAzimuthDeg, dElevationDeg);
    return this.debouncedRender();
  }

  async toggleOverlay(): Promise<Uint8Array> {
    this.overlay = !this.overlay;
    return this.requestRender();
  }

  get kbPerFrame(): number {
    return this.meter.kbPerFrame();
  }

  buildQuery(): string {
    const [px, py, pz, lx, ly, lz, ux, uy, uz] = this.camera.pose();
    const parts = [
      `t=${this.t.toFixed(2)}`,
      `px=${px.toFixed(6)}`, `py=${py.toFixed(6)}`, `pz=${pz.toFixed(6)}`,
      `lx=${lx.toFixed(6)}`, `ly=${ly.toFixed(6)}`, `lz=${lz.toFixed(6)}`,
      `ux=${ux.toFixed(6)}`, `uy=${uy.toFixed(6)}`, `uz=${uz.toFixed(6)}`,
      `w=${this.width}`, `h=${this.height}`,
      `overlay=${this.overlay ? 'decomposition' : 'none'}`,
    ];
    return parts.join('&');
  }

  /** Render the current state; identical queries never hit the network. */
  async requestRender(): Promise<Uint8Array> {
    const query = this.buildQuery();
    if (query === this.lastQuery && this.lastFrame) {
      return this.lastFrame;
    }
    let png: Uint8Array;
    try {
      png = await this.client.render(query);
    } catch (err) {
      if (err instanceof HttpError && err.status === 409) {
        const body = err.body as { required_chunk?: number } | null;
        const required = body?.required_chunk;
        if (required === undefined) throw err;
        const bytes = await this.client.chunk(required);
        this.meter.addChunk(bytes);
        png = await this.client.render(query); // retry once
      } else {
        throw err;
      }
    }
    this.lastQuery = query;
    this.lastFrame = png;
    this.lastRenderAt = Date.now();
    if (this.onFrame) this.onFrame(png, query);
    return png;
  }

  /** Trailing-edge debounce: at most one render per minInterval. */
  private debouncedRender(): Promise<Uint8Array> {
    const now = Date.now();
    if (this.minInterval <= 0 || now - this.lastRenderAt >= this.minInterval) {
      return this.requestRender();
    }
    if (this.debounceTimer) clearTimeout(this.debounceTimer);
    return new Promise((resolve, reject) => {
      this.debounceTimer = setTimeout(() => {
        this.debounceTimer = null;
        this.requestRender().then(resolve, reject);
      }, this.minInterval - (now - this.lastRenderAt));
    });
  }
}
