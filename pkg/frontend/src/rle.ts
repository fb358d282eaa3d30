/**
 * Run-length mask codec, mirroring the service wire format: runs over the
 * row-major flattening, alternating values starting with 0, each run a
 * little-endian uint32, base64-wrapped.
 */

export interface RlePayload {
  rle: string;
  height: number;
  width: number;
}

function bytesToBase64(bytes: Uint8Array): string {
  if (typeof btoa === "function") {
    let bin = "";
    for (const b of bytes) bin += String.fromCharCode(b);
    return btoa(bin);
  }
  return Buffer.from(bytes).toString("base64");
}

function base64ToBytes(b64: string): Uint8Array {
  if (typeof atob === "function") {
    const bin = atob(b64);
    const out = new Uint8Array(bin.length);
    for (let i = 0; i < bin.length; i++) out[i] = bin.charCodeAt(i);
    return out;
  }
  return new Uint8Array(Buffer.from(b64, "base64"));
}

export function rleEncode(mask: Uint8Array, height: number, width: number): RlePayload {
  if (mask.length !== height * width || mask.length === 0) {
    throw new Error(`mask length ${mask.length} != ${height}x${width}`);
  }
  const runs: number[] = [];
  let current = 0;
  let run = 0;
  for (const cell of mask) {
    const v = cell ? 1 : 0;
    if (v === current) {
      run += 1;
    } else {
      runs.push(run);
      current = v;
      run = 1;
    }
  }
  runs.push(run);
  const buf = new Uint8Array(runs.length * 4);
  const view = new DataView(buf.buffer);
  runs.forEach((r, i) => view.setUint32(i * 4, r, true));
  return { rle: bytesToBase64(buf), height, width };
}

export function rleDecode(payload: RlePayload): Uint8Array {
  const bytes = base64ToBytes(payload.rle);
  if (bytes.length % 4 !== 0) throw new Error(`rle byte length ${bytes.length} not /4`);
  const view = new DataView(bytes.buffer, bytes.byteOffset, bytes.byteLength);
  const total = payload.height * payload.width;
  const out = new Uint8Array(total);
  let pos = 0;
  for (let i = 0; i < bytes.length / 4; i++) {
    const run = view.getUint32(i * 4, true);
    const value = i % 2;
    if (value === 1) out.fill(1, pos, pos + run);
    pos += run;
  }
  if (pos !== total) throw new Error(`rle covers ${pos} cells, expected ${total}`);
  return out;
}

/** Decode base64 float32 little-endian pixels from the frames endpoint. */
export function imageDecode(payload: { pixels: string; height: number; width: number }): Float32Array {
  const bytes = base64ToBytes(payload.pixels);
  if (bytes.length !== payload.height * payload.width * 4) {
    throw new Error(`image payload ${bytes.length} bytes, expected ${payload.height * payload.width * 4}`);
  }
  return new Float32Array(bytes.buffer.slice(bytes.byteOffset, bytes.byteOffset + bytes.length));
}
