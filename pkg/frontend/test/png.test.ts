import { describe, expect, it } from "vitest";
import { PngError, decodeGray, encodeGray } from "../src/png.js";

function pattern(n: number, salt = 1): Uint8Array {
  const out = new Uint8Array(n);
  let s = salt;
  for (let i = 0; i < n; i++) {
    s = (s * 1103515245 + 12345) & 0x7fffffff;
    out[i] = s & 0xff;
  }
  return out;
}

// --- independent chunk writer so decoder tests don't trust the encoder ---

const CRC_TABLE = new Uint32Array(256);
for (let n = 0; n < 256; n++) {
  let c = n;
  for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
  CRC_TABLE[n] = c >>> 0;
}

function refCrc(bytes: Uint8Array): number {
  let c = 0xffffffff;
  for (const b of bytes) c = CRC_TABLE[(c ^ b) & 0xff] ^ (c >>> 8);
  return (c ^ 0xffffffff) >>> 0;
}

function chunk(type: string, data: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + data.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, data.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(data, 8);
  view.setUint32(8 + data.length, refCrc(out.subarray(4, 8 + data.length)));
  return out;
}

function ihdr(width: number, height: number, colorType = 0): Uint8Array {
  const data = new Uint8Array(13);
  const view = new DataView(data.buffer);
  view.setUint32(0, width);
  view.setUint32(4, height);
  data[8] = 8;
  data[9] = colorType;
  return data;
}

async function zlibCompress(raw: Uint8Array): Promise<Uint8Array> {
  const cs = new CompressionStream("deflate");
  const writer = cs.writable.getWriter();
  const buf = new Uint8Array(raw.length);
  buf.set(raw);
  const done = writer.write(buf).then(() => writer.close());
  const reader = cs.readable.getReader();
  const parts: Uint8Array[] = [];
  for (;;) {
    const { done: end, value } = await reader.read();
    if (end) break;
    parts.push(value);
  }
  await done;
  const total = parts.reduce((n, p) => n + p.length, 0);
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

function assemble(parts: Uint8Array[]): Uint8Array {
  const sig = Uint8Array.of(0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a);
  const total = parts.reduce((n, p) => n + p.length, sig.length);
  const out = new Uint8Array(total);
  out.set(sig, 0);
  let off = sig.length;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

describe("gray8 png codec", () => {
  it("round trips random data across shapes", async () => {
    for (const [w, h] of [
      [1, 1],
      [7, 3],
      [33, 17],
      [64, 64],
    ]) {
      const data = pattern(w * h, w * 100 + h);
      const png = await encodeGray({ width: w, height: h, data });
      const back = await decodeGray(png);
      expect(back.width).toBe(w);
      expect(back.height).toBe(h);
      expect(back.data).toEqual(data);
    }
  });

  it("round trips binary masks exactly", async () => {
    const data = new Uint8Array(40 * 24);
    for (let i = 0; i < data.length; i++) data[i] = i % 7 === 0 ? 255 : 0;
    const back = await decodeGray(await encodeGray({ width: 40, height: 24, data }));
    expect(back.data).toEqual(data);
  });

  it("rejects mismatched data length", async () => {
    await expect(encodeGray({ width: 4, height: 4, data: new Uint8Array(15) })).rejects.toThrow(PngError);
  });

  it("rejects a bad signature", async () => {
    const png = await encodeGray({ width: 4, height: 4, data: new Uint8Array(16) });
    const bad = png.slice();
    bad[0] = 0x42;
    await expect(decodeGray(bad)).rejects.toThrow(/signature/);
  });

  it("rejects a corrupted chunk via CRC", async () => {
    const png = await encodeGray({ width: 8, height: 8, data: pattern(64) });
    const bad = png.slice();
    bad[8 + 25 + 12] ^= 0xff; // a byte inside IDAT (after the 25-byte IHDR chunk)
    await expect(decodeGray(bad)).rejects.toThrow(/CRC/);
  });

  it("rejects non-grayscale PNGs with a clear message", async () => {
    const rgb = assemble([chunk("IHDR", ihdr(2, 2, 2)), chunk("IDAT", new Uint8Array(4)), chunk("IEND", new Uint8Array(0))]);
    await expect(decodeGray(rgb)).rejects.toThrow(/color type 2.*grayscale/);
  });

  it("rejects truncated input", async () => {
    const png = await encodeGray({ width: 4, height: 4, data: new Uint8Array(16) });
    await expect(decodeGray(png.subarray(0, 20))).rejects.toThrow(PngError);
  });

  it("undoes all five scanline filters", async () => {
    // forward-filter a known image here, then the decoder must recover it
    const width = 9;
    const height = 10;
    const pixels = pattern(width * height, 77);
    const raw = new Uint8Array(height * (width + 1));
    const filters = [0, 1, 2, 3, 4, 4, 3, 2, 1, 0];
    const paeth = (a: number, b: number, c: number) => {
      const p = a + b - c;
      const pa = Math.abs(p - a);
      const pb = Math.abs(p - b);
      const pc = Math.abs(p - c);
      if (pa <= pb && pa <= pc) return a;
      return pb <= pc ? b : c;
    };
    for (let y = 0; y < height; y++) {
      const f = filters[y];
      raw[y * (width + 1)] = f;
      for (let x = 0; x < width; x++) {
        const cur = pixels[y * width + x];
        const left = x > 0 ? pixels[y * width + x - 1] : 0;
        const up = y > 0 ? pixels[(y - 1) * width + x] : 0;
        const upLeft = x > 0 && y > 0 ? pixels[(y - 1) * width + x - 1] : 0;
        let predicted = 0;
        if (f === 1) predicted = left;
        else if (f === 2) predicted = up;
        else if (f === 3) predicted = (left + up) >> 1;
        else if (f === 4) predicted = paeth(left, up, upLeft);
        raw[y * (width + 1) + 1 + x] = (cur - predicted) & 0xff;
      }
    }
    const png = assemble([chunk("IHDR", ihdr(width, height)), chunk("IDAT", await zlibCompress(raw)), chunk("IEND", new Uint8Array(0))]);
    const back = await decodeGray(png);
    expect(back.data).toEqual(pixels);
  });

  it("skips ancillary chunks", async () => {
    const width = 3;
    const height = 2;
    const pixels = Uint8Array.of(10, 20, 30, 40, 50, 60);
    const raw = Uint8Array.of(0, 10, 20, 30, 0, 40, 50, 60);
    const png = assemble([
      chunk("IHDR", ihdr(width, height)),
      chunk("tEXt", new TextEncoder().encode("Comment\0hello")),
      chunk("IDAT", await zlibCompress(raw)),
      chunk("IEND", new Uint8Array(0)),
    ]);
    const back = await decodeGray(png);
    expect(back.data).toEqual(pixels);
  });
});
