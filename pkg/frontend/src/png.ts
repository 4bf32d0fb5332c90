/**
 * Minimal 8-bit grayscale PNG codec.
 *
 * The studio only moves single-channel images across the wire — painted
 * masks going up, shrunk-mask previews and attention heatmaps coming down —
 * so we support exactly that profile: bit depth 8, color type 0, no
 * interlace. Compression rides on the platform CompressionStream /
 * DecompressionStream ("deflate" = zlib-wrapped, which is what IDAT wants);
 * both exist in every evergreen browser and in node >= 18, so the codec has
 * no dependencies and the same bytes flow in tests and in the browser.
 */

export interface GrayImage {
  width: number;
  height: number;
  /** row-major, one byte per pixel */
  data: Uint8Array;
}

export class PngError extends Error {}

const SIGNATURE = Uint8Array.of(0x89, 0x50, 0x4e, 0x47, 0x0d, 0x0a, 0x1a, 0x0a);

const CRC_TABLE = new Uint32Array(256);
for (let n = 0; n < 256; n++) {
  let c = n;
  for (let k = 0; k < 8; k++) c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
  CRC_TABLE[n] = c >>> 0;
}

function crc32(bytes: Uint8Array, start: number, end: number): number {
  let c = 0xffffffff;
  for (let i = start; i < end; i++) {
    c = CRC_TABLE[(c ^ bytes[i]) & 0xff] ^ (c >>> 8);
  }
  return (c ^ 0xffffffff) >>> 0;
}

function concatBytes(parts: Uint8Array[]): Uint8Array<ArrayBuffer> {
  let total = 0;
  for (const p of parts) total += p.length;
  const out = new Uint8Array(total);
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

/** Run bytes through a Compression/DecompressionStream and collect the output. */
async function pump(
  ts: { writable: WritableStream<BufferSource>; readable: ReadableStream<Uint8Array> },
  input: Uint8Array<ArrayBuffer>,
): Promise<Uint8Array<ArrayBuffer>> {
  const writer = ts.writable.getWriter();
  const pending = writer.write(input).then(() => writer.close());
  pending.catch(() => undefined); // reader surfaces the real error
  const reader = ts.readable.getReader();
  const chunks: Uint8Array[] = [];
  for (;;) {
    const { done, value } = await reader.read();
    if (done) break;
    chunks.push(value);
  }
  await pending;
  return concatBytes(chunks);
}

async function deflate(raw: Uint8Array<ArrayBuffer>): Promise<Uint8Array<ArrayBuffer>> {
  return pump(new CompressionStream("deflate"), raw);
}

async function inflate(compressed: Uint8Array<ArrayBuffer>): Promise<Uint8Array<ArrayBuffer>> {
  try {
    return await pump(new DecompressionStream("deflate"), compressed);
  } catch (err) {
    throw new PngError(`corrupt zlib stream in IDAT: ${(err as Error).message}`);
  }
}

function writeChunk(type: string, data: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + data.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, data.length);
  for (let i = 0; i < 4; i++) out[4 + i] = type.charCodeAt(i);
  out.set(data, 8);
  view.setUint32(8 + data.length, crc32(out, 4, 8 + data.length));
  return out;
}

export async function encodeGray(img: GrayImage): Promise<Uint8Array<ArrayBuffer>> {
  const { width, height, data } = img;
  if (width <= 0 || height <= 0 || data.length !== width * height) {
    throw new PngError(`data length ${data.length} does not match ${width}x${height}`);
  }
  const ihdr = new Uint8Array(13);
  const hv = new DataView(ihdr.buffer);
  hv.setUint32(0, width);
  hv.setUint32(4, height);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // color type: grayscale
  // compression 0, filter 0, interlace 0 already zeroed

  // filter byte 0 (None) per scanline
  const raw = new Uint8Array(height * (width + 1));
  for (let y = 0; y < height; y++) {
    raw.set(data.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  const idat = await deflate(raw);
  return concatBytes([SIGNATURE, writeChunk("IHDR", ihdr), writeChunk("IDAT", idat), writeChunk("IEND", new Uint8Array(0))]);
}

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

export async function decodeGray(bytes: Uint8Array): Promise<GrayImage> {
  if (bytes.length < 8 + 25) throw new PngError("truncated PNG");
  for (let i = 0; i < 8; i++) {
    if (bytes[i] !== SIGNATURE[i]) throw new PngError("bad PNG signature");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);

  let width = 0;
  let height = 0;
  let sawHeader = false;
  const idats: Uint8Array[] = [];
  let off = 8;
  while (off + 12 <= bytes.length) {
    const len = view.getUint32(off);
    const type = String.fromCharCode(bytes[off + 4], bytes[off + 5], bytes[off + 6], bytes[off + 7]);
    if (off + 12 + len > bytes.length) throw new PngError(`truncated ${type} chunk`);
    const stored = view.getUint32(off + 8 + len);
    if (crc32(bytes, off + 4, off + 8 + len) !== stored) {
      throw new PngError(`bad CRC in ${type} chunk`);
    }
    const data = bytes.subarray(off + 8, off + 8 + len);
    if (type === "IHDR") {
      width = view.getUint32(off + 8);
      height = view.getUint32(off + 12);
      const bitDepth = data[8];
      const colorType = data[9];
      if (bitDepth !== 8 || colorType !== 0) {
        throw new PngError(`unsupported PNG profile (bit depth ${bitDepth}, color type ${colorType}); expected 8-bit grayscale`);
      }
      if (data[10] !== 0 || data[11] !== 0) throw new PngError("unsupported compression/filter method");
      if (data[12] !== 0) throw new PngError("interlaced PNGs are not supported");
      sawHeader = true;
    } else if (type === "IDAT") {
      idats.push(data);
    } else if (type === "IEND") {
      break;
    }
    // ancillary chunks (tEXt, pHYs, ...) skipped
    off += 12 + len;
  }
  if (!sawHeader) throw new PngError("missing IHDR");
  if (idats.length === 0) throw new PngError("missing IDAT");
  if (width <= 0 || height <= 0) throw new PngError(`bad dimensions ${width}x${height}`);

  const raw = await inflate(concatBytes(idats));
  const stride = width + 1;
  if (raw.length !== height * stride) {
    throw new PngError(`decompressed size ${raw.length}, expected ${height * stride}`);
  }

  // undo per-scanline filtering; bpp = 1 for gray8
  const data = new Uint8Array(width * height);
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride];
    const row = raw.subarray(y * stride + 1, (y + 1) * stride);
    const out = y * width;
    const prev = out - width;
    switch (filter) {
      case 0:
        data.set(row, out);
        break;
      case 1: // Sub
        for (let x = 0; x < width; x++) {
          data[out + x] = (row[x] + (x > 0 ? data[out + x - 1] : 0)) & 0xff;
        }
        break;
      case 2: // Up
        for (let x = 0; x < width; x++) {
          data[out + x] = (row[x] + (y > 0 ? data[prev + x] : 0)) & 0xff;
        }
        break;
      case 3: // Average
        for (let x = 0; x < width; x++) {
          const left = x > 0 ? data[out + x - 1] : 0;
          const up = y > 0 ? data[prev + x] : 0;
          data[out + x] = (row[x] + ((left + up) >> 1)) & 0xff;
        }
        break;
      case 4: // Paeth
        for (let x = 0; x < width; x++) {
          const left = x > 0 ? data[out + x - 1] : 0;
          const up = y > 0 ? data[prev + x] : 0;
          const upLeft = x > 0 && y > 0 ? data[prev + x - 1] : 0;
          data[out + x] = (row[x] + paeth(left, up, upLeft)) & 0xff;
        }
        break;
      default:
        throw new PngError(`unknown scanline filter ${filter}`);
    }
  }
  return { width, height, data };
}
