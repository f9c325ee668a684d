import { colorAssignments } from "./colors.js";
import type { DecodedMask } from "./rle.js";
import { decodeRle, maskArea, maskContains } from "./rle.js";
import type { Hover, SessionState, WireCandidate } from "./state.js";

/** A candidate mask prepared for display: decoded bitmap or decode error. */
export interface PreparedMask {
  wordPosition: number;
  confidence: number;
  color: string;
  mask: DecodedMask | null;
  error: string | null;
}

/** Decode every mask of a candidate; failures keep their slot with an error. */
export function prepareMasks(candidate: WireCandidate): PreparedMask[] {
  const colors = colorAssignments(candidate.masks.map((m) => m.word_position));
  return candidate.masks.map((m) => {
    try {
      return {
        wordPosition: m.word_position,
        confidence: m.confidence,
        color: colors.get(m.word_position) ?? "#888888",
        mask: decodeRle(m.rle),
        error: null,
      };
    } catch (err) {
      return {
        wordPosition: m.word_position,
        confidence: m.confidence,
        color: colors.get(m.word_position) ?? "#888888",
        mask: null,
        error: err instanceof Error ? err.message : String(err),
      };
    }
  });
}

/** Most specific (smallest-area) decoded mask covering the pixel, if any. */
export function maskAtPixel(
  prepared: PreparedMask[],
  x: number,
  y: number,
): PreparedMask | null {
  let best: PreparedMask | null = null;
  let bestArea = Infinity;
  for (const p of prepared) {
    if (p.mask && maskContains(p.mask, x, y)) {
      const area = maskArea(p.mask);
      if (area < bestArea) {
        best = p;
        bestArea = area;
      }
    }
  }
  return best;
}

/** Candidate tabs, one per candidate in stored (score) order. */
export function renderTabs(
  container: HTMLElement,
  state: SessionState,
  onTab: (index: number) => void,
): void {
  container.textContent = "";
  const doc = container.ownerDocument;
  state.candidates.forEach((cand, i) => {
    const tab = doc.createElement("button");
    tab.type = "button";
    tab.className = "tab" + (i === state.active ? " tab-active" : "");
    tab.dataset.index = String(i);
    tab.textContent = `#${i + 1} · ${cand.score.toFixed(2)}`;
    tab.addEventListener("click", () => onTab(i));
    container.appendChild(tab);
  });
}

/** Caption words; linked words carry their mask color and hover handlers. */
export function renderCaption(
  container: HTMLElement,
  state: SessionState,
  prepared: PreparedMask[],
  onHover: (hover: Hover) => void,
): void {
  container.textContent = "";
  const doc = container.ownerDocument;
  const candidate = state.candidates[state.active];
  if (!candidate) return;
  const byPosition = new Map(prepared.map((p) => [p.wordPosition, p]));
  candidate.caption.split(" ").forEach((word, position) => {
    const span = doc.createElement("span");
    span.textContent = word;
    span.className = "word";
    span.dataset.position = String(position);
    const linked = byPosition.get(position);
    if (linked) {
      span.classList.add("word-linked");
      span.style.borderBottom = `3px solid ${linked.color}`;
      if (state.hover && state.hover.position === position) {
        span.classList.add("word-hl");
      }
      span.addEventListener("mouseenter", () =>
        onHover({ kind: "word", position }),
      );
      span.addEventListener("mouseleave", () => onHover(null));
    }
    container.appendChild(span);
    container.appendChild(doc.createTextNode(" "));
  });
}

/** Per-mask problem badges; healthy masks add nothing. */
export function renderBadges(
  container: HTMLElement,
  prepared: PreparedMask[],
): void {
  container.textContent = "";
  const doc = container.ownerDocument;
  prepared.forEach((p, i) => {
    if (p.error === null) return;
    const badge = doc.createElement("span");
    badge.className = "badge-error";
    badge.textContent = `mask ${i + 1}: ${p.error}`;
    container.appendChild(badge);
  });
}

/** The recorded "use this" choice. */
export function renderSelection(
  container: HTMLElement,
  state: SessionState,
): void {
  if (state.selected === null) {
    container.textContent = "no candidate selected";
    return;
  }
  const cand = state.candidates[state.selected];
  container.textContent = `using candidate #${state.selected + 1}: “${cand.caption}”`;
}

/**
 * Paint decoded masks over the scene; the hovered mask is emphasized.
 * No-ops when the canvas has no 2d context (non-browser environments).
 */
export function renderOverlays(
  canvas: HTMLCanvasElement,
  state: SessionState,
  prepared: PreparedMask[],
  scale: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx) return;
  for (const p of prepared) {
    if (!p.mask) continue;
    const hovered =
      state.hover !== null && state.hover.position === p.wordPosition;
    ctx.globalAlpha = hovered ? 0.85 : state.hover ? 0.2 : 0.45;
    ctx.fillStyle = p.color;
    const { width, height, data } = p.mask;
    for (let y = 0; y < height; y++) {
      for (let x = 0; x < width; x++) {
        if (data[y * width + x] === 1) {
          ctx.fillRect(x * scale, y * scale, scale, scale);
        }
      }
    }
  }
  ctx.globalAlpha = 1.0;
}

/** Draw the prompt box outline over the scene. */
export function renderBox(
  canvas: HTMLCanvasElement,
  box: { x0: number; y0: number; x1: number; y1: number } | null,
  scale: number,
): void {
  const ctx = canvas.getContext("2d");
  if (!ctx || !box) return;
  ctx.strokeStyle = "#ffffff";
  ctx.lineWidth = 2;
  ctx.setLineDash([6, 4]);
  ctx.strokeRect(
    box.x0 * scale,
    box.y0 * scale,
    (box.x1 - box.x0) * scale,
    (box.y1 - box.y0) * scale,
  );
  ctx.setLineDash([]);
}
