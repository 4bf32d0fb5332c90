import { GrayImage, decodeGray, encodeGray } from "./png.js";

export class MaskEmptyError extends Error {}

/**
 * Editable single-channel paint layer backing the mask canvas.
 *
 * Pixels are strictly 0 or 255 — the service's convention (255 = edit
 * region). Construction thresholds incoming data at 128, matching the
 * server's own decode rule, so a re-imported mask lands on the same grid.
 */
export class MaskLayer {
  readonly width: number;
  readonly height: number;
  readonly data: Uint8Array;

  constructor(width: number, height: number, data?: Uint8Array) {
    if (!Number.isInteger(width) || !Number.isInteger(height) || width <= 0 || height <= 0) {
      throw new Error(`bad mask dims ${width}x${height}`);
    }
    if (data !== undefined && data.length !== width * height) {
      throw new Error(`mask data length ${data.length} does not match ${width}x${height}`);
    }
    this.width = width;
    this.height = height;
    this.data = data ? Uint8Array.from(data, (v) => (v >= 128 ? 255 : 0)) : new Uint8Array(width * height);
  }

  clone(): MaskLayer {
    return new MaskLayer(this.width, this.height, this.data);
  }

  clear(): void {
    this.data.fill(0);
  }

  /** Paint the rectangle [x0, x1) x [y0, y1), clipped to the canvas. */
  paintRect(x0: number, y0: number, x1: number, y1: number, value: 0 | 255 = 255): void {
    if (x1 < x0) [x0, x1] = [x1, x0];
    if (y1 < y0) [y0, y1] = [y1, y0];
    const xa = Math.max(0, Math.floor(x0));
    const xb = Math.min(this.width, Math.ceil(x1));
    const ya = Math.max(0, Math.floor(y0));
    const yb = Math.min(this.height, Math.ceil(y1));
    for (let y = ya; y < yb; y++) {
      this.data.fill(value, y * this.width + xa, y * this.width + xb);
    }
  }

  /** Stamp a disc of the given radius (boundary inclusive) around (cx, cy). */
  paintBrush(cx: number, cy: number, radius: number, value: 0 | 255 = 255): void {
    const r = Math.max(0, radius);
    const r2 = r * r;
    const ya = Math.max(0, Math.floor(cy - r));
    const yb = Math.min(this.height - 1, Math.ceil(cy + r));
    for (let y = ya; y <= yb; y++) {
      const dy = y - cy;
      const span = Math.sqrt(Math.max(0, r2 - dy * dy));
      const xa = Math.max(0, Math.ceil(cx - span));
      const xb = Math.min(this.width - 1, Math.floor(cx + span));
      if (xb >= xa) this.data.fill(value, y * this.width + xa, y * this.width + xb + 1);
    }
  }

  /** Stamp the brush along a pointer segment so fast drags leave no gaps. */
  paintStroke(x0: number, y0: number, x1: number, y1: number, radius: number, value: 0 | 255 = 255): void {
    const dist = Math.hypot(x1 - x0, y1 - y0);
    const step = Math.max(1, radius / 2);
    const n = Math.max(1, Math.ceil(dist / step));
    for (let i = 0; i <= n; i++) {
      const t = i / n;
      this.paintBrush(x0 + (x1 - x0) * t, y0 + (y1 - y0) * t, radius, value);
    }
  }

  countSet(): number {
    let n = 0;
    for (let i = 0; i < this.data.length; i++) if (this.data[i] === 255) n++;
    return n;
  }

  isEmpty(): boolean {
    return !this.data.some((v) => v === 255);
  }

  equals(other: MaskLayer): boolean {
    if (other.width !== this.width || other.height !== this.height) return false;
    for (let i = 0; i < this.data.length; i++) {
      if (this.data[i] !== other.data[i]) return false;
    }
    return true;
  }

  /** Half-open bounding box of the painted region, or null when empty. */
  bounds(): { x0: number; y0: number; x1: number; y1: number } | null {
    let x0 = this.width;
    let y0 = this.height;
    let x1 = 0;
    let y1 = 0;
    for (let y = 0; y < this.height; y++) {
      for (let x = 0; x < this.width; x++) {
        if (this.data[y * this.width + x] !== 255) continue;
        if (x < x0) x0 = x;
        if (x >= x1) x1 = x + 1;
        if (y < y0) y0 = y;
        if (y >= y1) y1 = y + 1;
      }
    }
    return x1 > x0 ? { x0, y0, x1, y1 } : null;
  }

  toImage(): GrayImage {
    return { width: this.width, height: this.height, data: this.data };
  }
}

/** Encode the painted region for upload. Refuses an empty mask. */
export async function exportMask(layer: MaskLayer): Promise<Uint8Array> {
  if (layer.isEmpty()) {
    throw new MaskEmptyError("mask selects no pixels — paint a region first");
  }
  return encodeGray(layer.toImage());
}

/** Decode a mask PNG (ours or the server's) back into an editable layer. */
export async function importMask(png: Uint8Array): Promise<MaskLayer> {
  const img = await decodeGray(png);
  return new MaskLayer(img.width, img.height, img.data);
}
