"""Pack a model and stream it to yourself over HTTP.

The stream is a base payload plus one chunk per frame; a client that pulls
chunks in order can render every frame it has paid the bytes for, and the
server refuses to render ahead of the downloaded prefix.  A decomposition
overlay and a bitrate meter come along for free.

Runs a quick 30-second fit, packs it, then talks to a local server.
"""

import json
import threading
import urllib.request

from streamfields import stream_io
from streamfields.scenes import default_toy_spec, gen_toy2d
from streamfields.server import serve
from streamfields.train import TrainConfig, fit

ds = gen_toy2d(default_toy_spec(width=48, height=48, T=8, seed=1))
cfg = TrainConfig(steps=400, batch_size=512, grid_size=32, seed=1,
                  stat_time_levels=0)
model = fit(ds, cfg).models[0]

stream_io.pack(model, "toy.nfps")
manifest = stream_io.read_manifest("toy.nfps")
print(f"packed toy.nfps: {manifest.total_bytes} bytes, "
      f"{stream_io.mean_bitrate(manifest):.0f} bytes/frame mean")
for t in range(1, manifest.T):
    print(f"  chunk {t}: {manifest.chunks[t].length} bytes "
          f"(predicted {stream_io.predicted_chunk_bytes(manifest, t)})")

httpd = serve("toy.nfps", bind="127.0.0.1:0")
threading.Thread(target=httpd.serve_forever, daemon=True).start()
host, port = httpd.server_address
base = f"http://{host}:{port}"
print(f"\nserving on {base}")


def get(route):
    try:
        with urllib.request.urlopen(base + route) as r:
            return r.status, r.read()
    except urllib.error.HTTPError as e:
        return e.code, e.read()


# frame 0 renders straight from the base payload
status, png = get("/render?t=0&w=48&h=48")
print(f"render t=0 before any chunk: HTTP {status}, {len(png)} PNG bytes")

# but frame 3 is refused until its chunks arrive
status, body = get("/render?t=3&w=48&h=48")
print(f"render t=3 too early: HTTP {status}, {body.decode()}")
for t in (1, 2, 3):
    get(f"/chunk/{t}")
status, png = get("/render?t=3&w=48&h=48")
print(f"after fetching chunks 1..3: HTTP {status}, {len(png)} PNG bytes")

# fractional times interpolate between loaded frames
status, png = get("/render?t=2.5&w=48&h=48&overlay=decomposition")
print(f"overlay render at t=2.5: HTTP {status}, {len(png)} PNG bytes")

metrics = json.loads(get("/metrics")[1])
print(f"\nmetrics: {metrics['bytes_served']} chunk bytes served, "
      f"{metrics['renders_served']} renders, "
      f"mean bitrate {metrics['mean_bitrate']:.0f} B/frame")
httpd.shutdown()
