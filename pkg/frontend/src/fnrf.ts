/**
 * Reader for the service's tensor-table container (magic "FNRF").
 *
 * Stored latent codes are served as artifacts in this format; parsing them
 * client-side lets the studio recombine a shape code with another sample's
 * texture code through the plain /render endpoint, with no dedicated
 * style-transfer route on the server.
 *
 * Layout (all little-endian): "FNRF" | version u32 | crc32(body) u32 |
 * entry count u32 | entries sorted by name, each
 * name_len u16 | name utf-8 | dtype u8 | rank u8 | dims u32[rank] | payload.
 */

import { crc32 } from "./png.js";

export type TensorData = Float32Array | Float64Array | BigInt64Array | Uint8Array;

export interface TensorEntry {
  dims: number[];
  data: TensorData;
}

const FNRF_VERSION = 1;

function dataOf(code: number, buffer: ArrayBufferLike, offset: number, count: number): TensorData {
  // payloads are little-endian; typed arrays match on every platform we target
  switch (code) {
    case 0: return new Float32Array(buffer.slice(offset, offset + 4 * count));
    case 1: return new Float64Array(buffer.slice(offset, offset + 8 * count));
    case 2: return new BigInt64Array(buffer.slice(offset, offset + 8 * count));
    case 3: return new Uint8Array(buffer.slice(offset, offset + count));
    default: throw new Error(`tensor table: unknown dtype code ${code}`);
  }
}

const ITEM_SIZE: Record<number, number> = { 0: 4, 1: 8, 2: 8, 3: 1 };

export function readTensorTable(bytes: Uint8Array): Map<string, TensorEntry> {
  if (bytes.length < 16 || String.fromCharCode(...bytes.subarray(0, 4)) !== "FNRF") {
    throw new Error("tensor table: bad magic");
  }
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const version = view.getUint32(4, true);
  if (version !== FNRF_VERSION) {
    throw new Error(`tensor table: unsupported version ${version}`);
  }
  const crc = view.getUint32(8, true);
  const count = view.getUint32(12, true);
  if (crc32(bytes.subarray(16)) !== crc) {
    throw new Error("tensor table: CRC mismatch");
  }
  const table = new Map<string, TensorEntry>();
  let off = 16;
  const decoder = new TextDecoder();
  for (let i = 0; i < count; i++) {
    if (off + 4 > bytes.length) throw new Error("tensor table: truncated entry");
    const nameLen = view.getUint16(off, true);
    const name = decoder.decode(bytes.subarray(off + 2, off + 2 + nameLen));
    off += 2 + nameLen;
    const code = bytes[off]!;
    const rank = bytes[off + 1]!;
    off += 2;
    const dims: number[] = [];
    for (let d = 0; d < rank; d++) {
      dims.push(view.getUint32(off, true));
      off += 4;
    }
    const n = dims.reduce((a, b) => a * b, 1);
    const size = ITEM_SIZE[code];
    if (size === undefined) throw new Error(`tensor table: unknown dtype code ${code}`);
    if (off + n * size > bytes.length) {
      throw new Error(`tensor table: truncated payload for '${name}'`);
    }
    table.set(name, { dims, data: dataOf(code, bytes.buffer, bytes.byteOffset + off, n) });
    off += n * size;
  }
  if (off !== bytes.length) {
    throw new Error("tensor table: trailing bytes");
  }
  return table;
}

/** Pull the latent pair out of a stored-latents artifact. */
export function readLatents(bytes: Uint8Array): { z_s: number[]; z_t: number[] } {
  const table = readTensorTable(bytes);
  const zs = table.get("latent/z_s");
  const zt = table.get("latent/z_t");
  if (!zs || !zt) {
    throw new Error("latent artifact is missing latent/z_s or latent/z_t");
  }
  return { z_s: Array.from(zs.data as Float32Array), z_t: Array.from(zt.data as Float32Array) };
}
