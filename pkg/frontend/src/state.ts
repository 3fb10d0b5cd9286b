/** Pure viewer state: orbit camera and the bitrate meter. */

const DEG = Math.PI / 180;

export interface Pose9 extends Array<number> {} // px,py,pz, lx,ly,lz, ux,uy,uz

export class OrbitCamera {
  azimuthDeg: number;
  elevationDeg: number;
  radius: number;
  target: [number, number, number];

  constructor(opts?: Partial<{ azimuthDeg: number; elevationDeg: number;
                               radius: number;
                               target: [number, number, number] }>) {
    this.azimuthDeg = opts?.azimuthDeg ?? 0;
    this.elevationDeg = opts?.elevationDeg ?? 20;
    this.radius = opts?.radius ?? 2.4;
    this.target = opts?.target ?? [0.5, 0.5, 0.5];
    if (this.radius <= 0) {
      throw new Error(`camera radius must be positive, got ${this.radius}`);
    }
  }

  /** Apply a drag: degrees of azimuth/elevation change. */
  rotate(dAzimuthDeg: number, dElevationDeg: number): void {
    this.azimuthDeg = (this.azimuthDeg + dAzimuthDeg) % 360;
    this.elevationDeg = Math.max(-85, Math.min(85,
      this.elevationDeg + dElevationDeg));
  }

  zoom(factor: number): void {
    this.radius = Math.max(0.2, this.radius * factor);
  }

  position(): [number, number, number] {
    const az = this.azimuthDeg * DEG;
    const el = this.elevationDeg * DEG;
    const [tx, ty, tz] = this.target;
    return [
      tx + this.radius * Math.cos(el) * Math.cos(az),
      ty + this.radius * Math.sin(el),
      tz + this.radius * Math.cos(el) * Math.sin(az),
    ];
  }

  pose(): number[] {
    return [...this.position(), ...this.target, 0, 1, 0];
  }
}

/** KB/frame meter: chunk bytes only, divided by frames advanced. */
export class BitrateMeter {
  private bytes = 0;
  private frames = 0;

  addChunk(byteLength: number): void {
    this.bytes += byteLength;
    this.frames += 1;
  }

  /** Bytes per advanced frame; 0 before any chunk arrived. */
  bytesPerFrame(): number {
    return this.frames === 0 ? 0 : this.bytes / this.frames;
  }

  kbPerFrame(): number {
    return this.bytesPerFrame() / 1024;
  }

  totalBytes(): number {
    return this.bytes;
  }

  framesAdvanced(): number {
    return this.frames;
  }
}
