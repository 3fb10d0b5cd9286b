/** End-to-end streaming session against the real Python server.
 *
 * Builds a tiny trained toy stream, serves it, then drives the viewer
 * headlessly: scrub the full timeline, check every chunk is fetched exactly
 * once, compare the bitrate meter with the manifest's own accounting plus
 * the server metrics, and verify the frame shown at t=2.5 is byte-for-byte
 * the offline render of the same query.
 */

import { afterAll, beforeAll, describe, expect, it } from 'vitest';
import { execFileSync, spawn, ChildProcess } from 'node:child_process';
import { mkdtempSync, readFileSync, rmSync } from 'node:fs';
import { tmpdir } from 'node:os';
import { join } from 'node:path';

import { Viewer } from '../src/viewer.js';

const PY = process.env.PYTHON ?? 'python3';
const CLI = ['-m', 'streamfields.cli'];

let work: string;
let server: ChildProcess | null = null;
let baseUrl = '';
let offlinePng: Buffer;

function cli(...args: string[]) {
  execFileSync(PY, [...CLI, ...args], { stdio: 'pipe' });
}

beforeAll(async () => {
  work = mkdtempSync(join(tmpdir(), 'sf-viewer-'));
  const data = join(work, 'toy');
  const fit = join(work, 'fit');
  const stream = join(work, 'toy.nfps');
  cli('gen', 'toy2d', '--out', data, '--seed', '5', '--size', '40',
      '--frames', '6');
  cli('train', '--data', data, '--out', fit, '--seed', '5',
      '--set', 'steps=40', '--set', 'batch_size=128',
      '--set', 'grid_size=12', '--set', 'pos_levels=2',
      '--set', 'stat_time_levels=0');
  cli('pack', '--checkpoint', fit, '--out', stream);
  // the offline reference for the t=2.5 frame, same size as the viewer uses
  const renders = join(work, 'renders');
  cli('render', '--model', stream, '--out', renders, '--times', '2.5',
      '--width', '128', '--height', '128');
  offlinePng = readFileSync(join(renders, 'render_t0002.500.png'));

  server = spawn(PY, [...CLI, 'serve', '--stream', stream,
                      '--bind', '127.0.0.1:0']);
  baseUrl = await new Promise<string>((resolve, reject) => {
    const timer = setTimeout(() => reject(new Error('server never came up')),
                             20000);
    server!.stdout!.on('data', (buf: Buffer) => {
      const m = String(buf).match(/serving .* on (http:\/\/[\d.]+:\d+)/);
      if (m) {
        clearTimeout(timer);
        resolve(m[1]);
      }
    });
    server!.on('exit', (code) => reject(new Error(`server died: ${code}`)));
  });
}, 120000);

afterAll(() => {
  server?.kill('SIGTERM');
  if (work) rmSync(work, { recursive: true, force: true });
});

describe('streaming session', () => {
  it('scrubs the timeline, fetching each chunk exactly once', async () => {
    const viewer = new Viewer({ baseUrl, fetchImpl: (u) => fetch(u),
                                renderMinIntervalMs: 0 });
    const manifest = await viewer.connect();
    const T = manifest.model.T;
    expect(T).toBe(6);

    for (let t = 0; t <= T - 1; t++) {
      const png = await viewer.scrub(t);
      expect(png.slice(0, 4)).toEqual(
        new Uint8Array([0x89, 0x50, 0x4e, 0x47]));
    }
    const chunkRoutes = viewer.client.log.filter((r) => r.startsWith('/chunk/'));
    expect(new Set(chunkRoutes).size).toBe(chunkRoutes.length);
    expect(chunkRoutes.length).toBe(T - 1);

    // meter agrees with the manifest's own chunk accounting...
    const chunkBytes = manifest.chunks.slice(1)
      .reduce((acc, [, length]) => acc + length, 0);
    expect(viewer.meter.totalBytes()).toBe(chunkBytes);
    expect(viewer.meter.bytesPerFrame()).toBeCloseTo(chunkBytes / (T - 1), 6);

    // ...and with the server's metrics endpoint
    const metrics = await viewer.client.metrics();
    expect(metrics.bytes_served).toBe(chunkBytes);
    expect(viewer.meter.bytesPerFrame())
      .toBeCloseTo(metrics.bytes_served / (T - 1), 6);

    // frame at t=2.5 is byte-for-byte the offline render
    const shown = await viewer.scrub(2.5);
    expect(Buffer.from(shown).equals(offlinePng)).toBe(true);

    // the fractional frame differs from both neighbors
    const at2 = await viewer.scrub(2);
    const at3 = await viewer.scrub(3);
    expect(Buffer.from(shown).equals(Buffer.from(at2))).toBe(false);
    expect(Buffer.from(shown).equals(Buffer.from(at3))).toBe(false);
  }, 60000);

  it('replays a full orbit to the identical image', async () => {
    const viewer = new Viewer({ baseUrl, fetchImpl: (u) => fetch(u),
                                renderMinIntervalMs: 0 });
    await viewer.connect();
    const start = await viewer.scrub(0);
    let last: Uint8Array = start;
    for (let i = 0; i < 8; i++) {
      last = await viewer.orbit(45, 0);
    }
    expect(Buffer.from(last).equals(Buffer.from(start))).toBe(true);
  }, 60000);

  it('overlay toggling changes the frame and back', async () => {
    const viewer = new Viewer({ baseUrl, fetchImpl: (u) => fetch(u),
                                renderMinIntervalMs: 0 });
    await viewer.connect();
    const plain = await viewer.scrub(1);
    const overlaid = await viewer.toggleOverlay();
    expect(Buffer.from(overlaid).equals(Buffer.from(plain))).toBe(false);
    const back = await viewer.toggleOverlay();
    expect(Buffer.from(back).equals(Buffer.from(plain))).toBe(true);
  }, 60000);
});
