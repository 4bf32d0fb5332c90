import { MaskLayer } from "./mask.js";

export type Tool = "brush" | "rect" | "erase";

/**
 * Wires pointer painting onto a stacked pair of canvases: the image below,
 * the translucent mask overlay above. Used twice — main canvas and style
 * reference — so the two stay behaviorally identical.
 */
export class CanvasPainter {
  tool: Tool = "brush";
  brushRadius = 6;
  onChange: (() => void) | null = null;

  private layer: MaskLayer;
  private drawing = false;
  private last: { x: number; y: number } | null = null;
  private anchor: { x: number; y: number } | null = null;

  constructor(
    private readonly imageCanvas: HTMLCanvasElement,
    private readonly overlay: HTMLCanvasElement,
    width: number,
    height: number,
  ) {
    this.layer = new MaskLayer(width, height);
    this.resize(width, height);
    overlay.addEventListener("pointerdown", (e) => this.down(e));
    overlay.addEventListener("pointermove", (e) => this.move(e));
    overlay.addEventListener("pointerup", (e) => this.up(e));
    overlay.addEventListener("pointerleave", (e) => this.up(e));
  }

  get mask(): MaskLayer {
    return this.layer;
  }

  setMask(layer: MaskLayer): void {
    this.layer = layer;
    this.resize(layer.width, layer.height);
    this.render();
  }

  private resize(width: number, height: number): void {
    for (const canvas of [this.imageCanvas, this.overlay]) {
      canvas.width = width;
      canvas.height = height;
    }
  }

  async showImage(bytes: Uint8Array): Promise<{ width: number; height: number }> {
    const copy = new Uint8Array(bytes.length);
    copy.set(bytes);
    const bitmap = await createImageBitmap(new Blob([copy.buffer]));
    this.layer = new MaskLayer(bitmap.width, bitmap.height);
    this.resize(bitmap.width, bitmap.height);
    this.imageCanvas.getContext("2d")!.drawImage(bitmap, 0, 0);
    this.render();
    return { width: bitmap.width, height: bitmap.height };
  }

  /** map a pointer event to mask pixel coordinates */
  private pixel(e: PointerEvent): { x: number; y: number } {
    const rect = this.overlay.getBoundingClientRect();
    return {
      x: ((e.clientX - rect.left) / rect.width) * this.layer.width,
      y: ((e.clientY - rect.top) / rect.height) * this.layer.height,
    };
  }

  private down(e: PointerEvent): void {
    e.preventDefault();
    this.overlay.setPointerCapture(e.pointerId);
    this.drawing = true;
    const p = this.pixel(e);
    if (this.tool === "rect") {
      this.anchor = p;
    } else {
      const value = this.tool === "erase" ? 0 : 255;
      this.layer.paintBrush(p.x, p.y, this.brushRadius, value);
      this.last = p;
      this.render();
    }
  }

  private move(e: PointerEvent): void {
    if (!this.drawing) return;
    const p = this.pixel(e);
    if (this.tool === "rect") {
      this.render(this.anchor ? { a: this.anchor, b: p } : undefined);
      return;
    }
    const value = this.tool === "erase" ? 0 : 255;
    if (this.last) this.layer.paintStroke(this.last.x, this.last.y, p.x, p.y, this.brushRadius, value);
    this.last = p;
    this.render();
  }

  private up(e: PointerEvent): void {
    if (!this.drawing) return;
    this.drawing = false;
    if (this.tool === "rect" && this.anchor) {
      const p = this.pixel(e);
      this.layer.paintRect(this.anchor.x, this.anchor.y, p.x, p.y);
      this.anchor = null;
    }
    this.last = null;
    this.render();
    this.onChange?.();
  }

  render(preview?: { a: { x: number; y: number }; b: { x: number; y: number } }): void {
    const ctx = this.overlay.getContext("2d")!;
    const { width, height, data } = this.layer;
    const img = ctx.createImageData(width, height);
    for (let i = 0; i < data.length; i++) {
      if (data[i] !== 255) continue;
      img.data[i * 4] = 255;
      img.data[i * 4 + 1] = 64;
      img.data[i * 4 + 2] = 64;
      img.data[i * 4 + 3] = 110;
    }
    ctx.clearRect(0, 0, width, height);
    ctx.putImageData(img, 0, 0);
    if (preview) {
      ctx.strokeStyle = "rgba(255, 96, 96, 0.9)";
      ctx.setLineDash([4, 3]);
      ctx.strokeRect(
        Math.min(preview.a.x, preview.b.x),
        Math.min(preview.a.y, preview.b.y),
        Math.abs(preview.b.x - preview.a.x),
        Math.abs(preview.b.y - preview.a.y),
      );
      ctx.setLineDash([]);
    }
  }
}
