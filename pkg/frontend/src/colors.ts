/** Distinct overlay colors; at most five masks per candidate are ever shown. */
export const MASK_PALETTE: readonly string[] = [
  "#e6194b",
  "#3cb44b",
  "#4363d8",
  "#f58231",
  "#911eb4",
  "#46f0f0",
  "#f032e6",
  "#9a6324",
  "#808000",
  "#008080",
];

/**
 * Assign one palette color per linked word position, in mask order.
 * The returned map is a bijection: distinct positions get distinct colors
 * (a duplicate position keeps its first color, since word and mask must
 * share exactly one).
 */
export function colorAssignments(wordPositions: number[]): Map<number, string> {
  const colors = new Map<number, string>();
  for (const pos of wordPositions) {
    if (!colors.has(pos)) {
      colors.set(pos, MASK_PALETTE[colors.size % MASK_PALETTE.length]);
    }
  }
  return colors;
}
