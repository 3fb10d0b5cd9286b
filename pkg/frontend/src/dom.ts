/** Browser bootstrap: wires the Viewer to a minimal DOM.
 *
 * Expects the elements created in index.html.  The server origin comes
 * from the `?server=` query parameter (default http://127.0.0.1:8799).
 */

import { Viewer } from './viewer.js';

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

export async function boot(): Promise<Viewer> {
  const params = new URLSearchParams(window.location.search);
  const base = params.get('server') ?? 'http://127.0.0.1:8799';
  const viewer = new Viewer({
    baseUrl: base,
    fetchImpl: (url) => fetch(url),
    width: 360,
    height: 360,
  });

  const img = el<HTMLImageElement>('frame');
  const slider = el<HTMLInputElement>('timeline');
  const timeLabel = el<HTMLSpanElement>('time-label');
  const meterLabel = el<HTMLSpanElement>('meter');
  const overlayBox = el<HTMLInputElement>('overlay');
  const status = el<HTMLSpanElement>('status');

  let objectUrl: string | null = null;
  viewer.onFrame = (png) => {
    const blob = new Blob([png.slice().buffer], { type: 'image/png' });
    if (objectUrl) URL.revokeObjectURL(objectUrl);
    objectUrl = URL.createObjectURL(blob);
    img.src = objectUrl;
    meterLabel.textContent = viewer.kbPerFrame.toFixed(1);
    status.textContent = viewer.loading ? 'loading' : 'ready';
  };

  const manifest = await viewer.connect();
  slider.min = '0';
  slider.max = String(manifest.model.T - 1);
  slider.step = '0.05';
  status.textContent = `connected (T=${manifest.model.T}, ` +
    `${manifest.model.backbone} backbone)`;

  slider.addEventListener('input', () => {
    const t = parseFloat(slider.value);
    timeLabel.textContent = t.toFixed(2);
    status.textContent = 'loading';
    viewer.scrub(t).then(() => {
      status.textContent = 'ready';
    }).catch((err) => {
      status.textContent = String(err);
    });
  });

  overlayBox.addEventListener("change", () => {
    viewer.toggleOverlay().catch((err) => {
      status.textContent = String(err);
    });
  });

  let dragging = false;
  let lastX = 0;
  let lastY = 0;
  img.addEventListener('pointerdown', (ev) => {
    dragging = true;
    lastX = ev.clientX;
    lastY = ev.clientY;
    img.setPointerCapture(ev.pointerId);
  });
  img.addEventListener('pointermove', (ev) => {
    if (!dragging) return;
    const dAz = (ev.clientX - lastX) * 0.4;
    const dEl = (ev.clientY - lastY) * 0.4;
    lastX = ev.clientX;
    lastY = ev.clientY;
    viewer.orbit(dAz, dEl).catch(() => { /* keep last frame */ });
  });
  img.addEventListener('pointerup', () => {
    dragging = false;
  });

  await viewer.scrub(0);
  return viewer;
}

boot().catch((err) => {
  const status = document.getElementById('status');
  if (status) status.textContent = `failed to connect: ${err}`;
});
