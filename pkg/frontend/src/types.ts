/** Wire types of the streaming server. */

export interface ChunkRecord {
  offset: number;
  length: number;
  crc32: number;
}

export interface StreamManifest {
  magic: string;
  version: number;
  dtype: string;
  model: {
    mode: string;
    T: number;
    F: number;
    dims: number[];
    k_num: number;
    k_den: number;
    backbone: string;
    rank: number;
    [key: string]: unknown;
  };
  ablate: string;
  streamed_grids: string[];
  /** [offset, length, crc32] per frame; entry 0 is the base payload. */
  chunks: Array<[number, number, number]>;
  weights: Array<[string, number[], number, number]>;
}

export interface ServerMetrics {
  bytes_served: number;
  bytes_served_per_chunk: number[];
  header_bytes: number;
  mean_bitrate: number;
  renders_served: number;
  cache_hits: number;
  high_water: number;
}

export interface RenderQuery {
  t: number;
  pose: number[]; // px,py,pz, lx,ly,lz, ux,uy,uz
  width: number;
  height: number;
  overlay: boolean;
}
