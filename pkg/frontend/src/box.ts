/** Prompt box in image pixel coordinates, x0 < x1, y0 < y1. */
export interface Box {
  x0: number;
  y0: number;
  x1: number;
  y1: number;
}

/** Smallest accepted box edge, in image pixels. */
export const MIN_BOX_PX = 4;

function clamp(v: number, lo: number, hi: number): number {
  return Math.min(hi, Math.max(lo, v));
}

/**
 * Turn a rubber-band drag into a prompt box: corners are ordered (a reversed
 * drag yields the same box), rounded to integer pixels, and clamped to the
 * image bounds. Drags smaller than MIN_BOX_PX on either side are ignored.
 */
export function normalizeDrag(
  ax: number,
  ay: number,
  bx: number,
  by: number,
  width: number,
  height: number,
): Box | null {
  const x0 = clamp(Math.round(Math.min(ax, bx)), 0, width);
  const x1 = clamp(Math.round(Math.max(ax, bx)), 0, width);
  const y0 = clamp(Math.round(Math.min(ay, by)), 0, height);
  const y1 = clamp(Math.round(Math.max(ay, by)), 0, height);
  if (x1 - x0 < MIN_BOX_PX || y1 - y0 < MIN_BOX_PX) {
    return null;
  }
  return { x0, y0, x1, y1 };
}

/** Wire form: [x0, y0, x1, y1]. */
export function boxToWire(box: Box): [number, number, number, number] {
  return [box.x0, box.y0, box.x1, box.y1];
}
