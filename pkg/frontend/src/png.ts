/**
 * Minimal PNG codec for 8-bit grayscale label masks.
 *
 * The service exchanges semantic masks as single-channel PNGs whose pixel
 * value is the class id, so the only shapes this codec must speak are
 * bit depth 8 / color type 0 / no interlace. Decode handles all five
 * scanline filters; encode writes unfiltered rows. Compression rides on
 * the platform CompressionStream / DecompressionStream ("deflate" = zlib),
 * available in browsers and node alike.
 */

const PNG_SIGNATURE = [137, 80, 78, 71, 13, 10, 26, 10];

export interface LabelImage {
  width: number;
  height: number;
  labels: Uint8Array; // row-major, one class id per pixel
}

// -- crc32 (shared with the latent-table reader) ------------------------------

const CRC_TABLE = (() => {
  const table = new Uint32Array(256);
  for (let n = 0; n < 256; n++) {
    let c = n;
    for (let k = 0; k < 8; k++) {
      c = c & 1 ? 0xedb88320 ^ (c >>> 1) : c >>> 1;
    }
    table[n] = c >>> 0;
  }
  return table;
})();

export function crc32(data: Uint8Array, seed = 0): number {
  let c = ~seed >>> 0;
  for (let i = 0; i < data.length; i++) {
    c = CRC_TABLE[(c ^ data[i]!) & 0xff]! ^ (c >>> 8);
  }
  return ~c >>> 0;
}

// -- base64 (masks travel inside JSON payloads) -------------------------------

export function bytesToBase64(data: Uint8Array): string {
  let binary = "";
  for (let i = 0; i < data.length; i += 0x8000) {
    binary += String.fromCharCode(...data.subarray(i, i + 0x8000));
  }
  return btoa(binary);
}

export function base64ToBytes(text: string): Uint8Array {
  const binary = atob(text);
  const out = new Uint8Array(binary.length);
  for (let i = 0; i < binary.length; i++) {
    out[i] = binary.charCodeAt(i);
  }
  return out;
}

// -- deflate via web streams ---------------------------------------------------

async function pump(data: Uint8Array, stream: CompressionStream | DecompressionStream): Promise<Uint8Array> {
  const piped = new Blob([data as BlobPart]).stream().pipeThrough(stream as ReadableWritablePair<Uint8Array, Uint8Array>);
  return new Uint8Array(await new Response(piped).arrayBuffer());
}

const deflate = (data: Uint8Array) => pump(data, new CompressionStream("deflate"));
const inflate = (data: Uint8Array) => pump(data, new DecompressionStream("deflate"));

// -- encode --------------------------------------------------------------------

function chunk(type: string, data: Uint8Array): Uint8Array {
  const out = new Uint8Array(12 + data.length);
  const view = new DataView(out.buffer);
  view.setUint32(0, data.length);
  for (let i = 0; i < 4; i++) {
    out[4 + i] = type.charCodeAt(i);
  }
  out.set(data, 8);
  view.setUint32(8 + data.length, crc32(out.subarray(4, 8 + data.length)));
  return out;
}

function concat(parts: Uint8Array[]): Uint8Array {
  const out = new Uint8Array(parts.reduce((n, p) => n + p.length, 0));
  let off = 0;
  for (const p of parts) {
    out.set(p, off);
    off += p.length;
  }
  return out;
}

/** Encode a label grid as an 8-bit grayscale PNG (pixel value = class id). */
export async function encodeLabelPng(image: LabelImage): Promise<Uint8Array> {
  const { width, height, labels } = image;
  if (width <= 0 || height <= 0 || labels.length !== width * height) {
    throw new Error(`label grid is ${labels.length} pixels, expected ${width}x${height}`);
  }
  const ihdr = new Uint8Array(13);
  const view = new DataView(ihdr.buffer);
  view.setUint32(0, width);
  view.setUint32(4, height);
  ihdr[8] = 8; // bit depth
  ihdr[9] = 0; // color type: grayscale
  const raw = new Uint8Array(height * (width + 1)); // filter byte 0 per scanline
  for (let y = 0; y < height; y++) {
    raw.set(labels.subarray(y * width, (y + 1) * width), y * (width + 1) + 1);
  }
  return concat([
    new Uint8Array(PNG_SIGNATURE),
    chunk("IHDR", ihdr),
    chunk("IDAT", await deflate(raw)),
    chunk("IEND", new Uint8Array(0)),
  ]);
}

// -- decode --------------------------------------------------------------------

function paeth(a: number, b: number, c: number): number {
  const p = a + b - c;
  const pa = Math.abs(p - a);
  const pb = Math.abs(p - b);
  const pc = Math.abs(p - c);
  if (pa <= pb && pa <= pc) return a;
  return pb <= pc ? b : c;
}

function unfilter(raw: Uint8Array, width: number, height: number): Uint8Array {
  // bpp = 1: "pixel to the left" is one byte back
  const out = new Uint8Array(width * height);
  const stride = width + 1;
  if (raw.length !== height * stride) {
    throw new Error(`PNG pixel data is ${raw.length} bytes, expected ${height * stride}`);
  }
  for (let y = 0; y < height; y++) {
    const filter = raw[y * stride]!;
    const row = y * width;
    const prev = row - width;
    for (let x = 0; x < width; x++) {
      const v = raw[y * stride + 1 + x]!;
      const left = x > 0 ? out[row + x - 1]! : 0;
      const up = y > 0 ? out[prev + x]! : 0;
      const upLeft = x > 0 && y > 0 ? out[prev + x - 1]! : 0;
      let recon: number;
      switch (filter) {
        case 0: recon = v; break;
        case 1: recon = v + left; break;
        case 2: recon = v + up; break;
        case 3: recon = v + ((left + up) >> 1); break;
        case 4: recon = v + paeth(left, up, upLeft); break;
        default: throw new Error(`PNG scanline ${y} has unknown filter ${filter}`);
      }
      out[row + x] = recon & 0xff;
    }
  }
  return out;
}

/** Decode an 8-bit grayscale PNG into a label grid. */
export async function decodeLabelPng(data: Uint8Array): Promise<LabelImage> {
  if (data.length < 8 || PNG_SIGNATURE.some((b, i) => data[i] !== b)) {
    throw new Error("not a PNG: bad signature");
  }
  const view = new DataView(data.buffer, data.byteOffset, data.byteLength);
  let off = 8;
  let width = 0;
  let height = 0;
  let sawHeader = false;
  const idat: Uint8Array[] = [];
  while (off + 8 <= data.length) {
    const length = view.getUint32(off);
    const type = String.fromCharCode(data[off + 4]!, data[off + 5]!, data[off + 6]!, data[off + 7]!);
    const body = data.subarray(off + 8, off + 8 + length);
    if (body.length !== length) {
      throw new Error(`PNG chunk ${type} is truncated`);
    }
    const stored = view.getUint32(off + 8 + length);
    if (crc32(data.subarray(off + 4, off + 8 + length)) !== stored) {
      throw new Error(`PNG chunk ${type} fails its CRC`);
    }
    if (type === "IHDR") {
      const h = new DataView(body.buffer, body.byteOffset, body.byteLength);
      width = h.getUint32(0);
      height = h.getUint32(4);
      const [depth, color, interlace] = [body[8], body[9], body[12]];
      if (depth !== 8 || color !== 0) {
        throw new Error(`unsupported PNG: bit depth ${depth}, color type ${color} (need 8-bit grayscale)`);
      }
      if (interlace !== 0) {
        throw new Error("unsupported PNG: interlaced");
      }
      sawHeader = true;
    } else if (type === "IDAT") {
      idat.push(body);
    } else if (type === "IEND") {
      break;
    }
    off += 12 + length;
  }
  if (!sawHeader || idat.length === 0) {
    throw new Error("PNG is missing IHDR or IDAT");
  }
  const raw = await inflate(concat(idat));
  return { width, height, labels: unfilter(raw, width, height) };
}
