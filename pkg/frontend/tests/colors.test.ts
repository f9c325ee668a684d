import { describe, expect, it } from "vitest";
import { colorAssignments, MASK_PALETTE } from "../src/colors.js";

describe("colorAssignments", () => {
  it("assigns distinct colors to distinct word positions (bijection)", () => {
    const colors = colorAssignments([2, 8, 14, 5, 11]);
    expect(colors.size).toBe(5);
    expect(new Set(colors.values()).size).toBe(5);
  });

  it("is stable in mask order", () => {
    const colors = colorAssignments([7, 3]);
    expect(colors.get(7)).toBe(MASK_PALETTE[0]);
    expect(colors.get(3)).toBe(MASK_PALETTE[1]);
  });

  it("keeps one color when a position repeats", () => {
    const colors = colorAssignments([4, 4, 9]);
    expect(colors.size).toBe(2);
    expect(colors.get(4)).toBe(MASK_PALETTE[0]);
    expect(colors.get(9)).toBe(MASK_PALETTE[1]);
  });

  it("handles the empty mask list", () => {
    expect(colorAssignments([]).size).toBe(0);
  });
});
