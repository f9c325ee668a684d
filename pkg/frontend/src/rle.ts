/** Run-length-encoded binary mask as served over the wire. */
export interface Rle {
  size: [number, number]; // [height, width]
  first: number; // value of the first run, 0 or 1
  runs: number[]; // strictly positive run lengths, row-major, summing to h*w
}

export class RleError extends Error {}

export interface DecodedMask {
  width: number;
  height: number;
  /** Row-major 0/1 per pixel, length width*height. */
  data: Uint8Array;
}

function isPositiveInt(v: unknown): v is number {
  return typeof v === "number" && Number.isInteger(v) && v > 0;
}

/** Decode a row-major RLE payload, validating that the runs tile the mask. */
export function decodeRle(rle: Rle): DecodedMask {
  if (!rle || !Array.isArray(rle.size) || rle.size.length !== 2) {
    throw new RleError("size must be [height, width]");
  }
  const [height, width] = rle.size;
  if (!isPositiveInt(height) || !isPositiveInt(width)) {
    throw new RleError(`bad mask size ${String(rle.size)}`);
  }
  if (rle.first !== 0 && rle.first !== 1) {
    throw new RleError(`first run value must be 0 or 1, got ${String(rle.first)}`);
  }
  if (!Array.isArray(rle.runs) || rle.runs.length === 0) {
    throw new RleError("runs must be a non-empty array");
  }
  const total = width * height;
  const data = new Uint8Array(total);
  let offset = 0;
  let value = rle.first;
  for (const run of rle.runs) {
    if (!isPositiveInt(run)) {
      throw new RleError(`run lengths must be positive integers, got ${String(run)}`);
    }
    if (offset + run > total) {
      throw new RleError(`runs overflow the ${height}x${width} mask`);
    }
    if (value === 1) {
      data.fill(1, offset, offset + run);
    }
    offset += run;
    value ^= 1;
  }
  if (offset !== total) {
    throw new RleError(`runs cover ${offset} of ${total} pixels`);
  }
  return { width, height, data };
}

/** Number of set pixels; used to pick the most specific mask under the cursor. */
export function maskArea(mask: DecodedMask): number {
  let area = 0;
  for (const v of mask.data) area += v;
  return area;
}

/** Whether the decoded mask covers the given pixel. */
export function maskContains(mask: DecodedMask, x: number, y: number): boolean {
  if (x < 0 || y < 0 || x >= mask.width || y >= mask.height) return false;
  return mask.data[y * mask.width + x] === 1;
}
