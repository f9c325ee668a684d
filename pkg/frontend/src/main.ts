import { ApiClient, ApiError } from "./api.js";
import type { Box } from "./box.js";
import { normalizeDrag } from "./box.js";
import { DEMO_HEIGHT, DEMO_IMAGE_B64, DEMO_IMAGE_URI, DEMO_WIDTH } from "./demo.js";
import type { PreparedMask } from "./render.js";
import {
  maskAtPixel,
  prepareMasks,
  renderBadges,
  renderBox,
  renderCaption,
  renderOverlays,
  renderSelection,
  renderTabs,
} from "./render.js";
import type { Hover, SessionState } from "./state.js";
import {
  initialState,
  withActive,
  withBox,
  withCandidates,
  withHover,
  withSelection,
} from "./state.js";

const SCALE = 8;
const DEFAULT_ENDPOINT = "http://127.0.0.1:8000";

interface Elements {
  scene: HTMLCanvasElement;
  tabs: HTMLElement;
  caption: HTMLElement;
  badges: HTMLElement;
  selection: HTMLElement;
  status: HTMLElement;
  useButton: HTMLButtonElement;
  endpoint: HTMLInputElement;
}

function grabElements(): Elements {
  const byId = <T extends HTMLElement>(id: string): T => {
    const el = document.getElementById(id);
    if (!el) throw new Error(`missing element #${id}`);
    return el as T;
  };
  return {
    scene: byId<HTMLCanvasElement>("scene"),
    tabs: byId("tabs"),
    caption: byId("caption"),
    badges: byId("badges"),
    selection: byId("selection"),
    status: byId("status"),
    useButton: byId<HTMLButtonElement>("use-this"),
    endpoint: byId<HTMLInputElement>("endpoint"),
  };
}

function setStatus(els: Elements, text: string, kind: "info" | "error" = "info"): void {
  els.status.textContent = text;
  els.status.className = kind === "error" ? "status status-error" : "status";
}

async function loadImage(uri: string): Promise<HTMLImageElement> {
  return new Promise((resolve, reject) => {
    const img = new Image();
    img.onload = () => resolve(img);
    img.onerror = () => reject(new Error("demo image failed to load"));
    img.src = uri;
  });
}

function main(): void {
  const els = grabElements();
  const api = new ApiClient(DEFAULT_ENDPOINT);
  els.endpoint.value = DEFAULT_ENDPOINT;
  els.endpoint.addEventListener("change", () => {
    api.setEndpoint(els.endpoint.value.trim() || DEFAULT_ENDPOINT);
  });

  let state: SessionState = initialState();
  let prepared: PreparedMask[] = [];
  let image: HTMLImageElement | null = null;
  let drag: { x: number; y: number } | null = null;
  let preview: Box | null = null;

  els.scene.width = DEMO_WIDTH * SCALE;
  els.scene.height = DEMO_HEIGHT * SCALE;

  const repaintScene = (): void => {
    const ctx = els.scene.getContext("2d");
    if (!ctx) return;
    ctx.imageSmoothingEnabled = false;
    ctx.clearRect(0, 0, els.scene.width, els.scene.height);
    if (image) {
      ctx.drawImage(image, 0, 0, els.scene.width, els.scene.height);
    }
    renderOverlays(els.scene, state, prepared, SCALE);
    renderBox(els.scene, preview ?? state.box, SCALE);
  };

  const repaintPanels = (): void => {
    renderTabs(els.tabs, state, (i) => {
      state = withActive(state, i);
      prepared = state.candidates[state.active]
        ? prepareMasks(state.candidates[state.active])
        : [];
      repaintPanels();
      repaintScene();
    });
    renderCaption(els.caption, state, prepared, onHover);
    renderBadges(els.badges, prepared);
    renderSelection(els.selection, state);
    els.useButton.disabled = state.candidates.length === 0;
  };

  const onHover = (hover: Hover): void => {
    state = withHover(state, hover);
    renderCaption(els.caption, state, prepared, onHover);
    repaintScene();
  };

  els.useButton.addEventListener("click", () => {
    state = withSelection(state);
    renderSelection(els.selection, state);
  });

  const toImagePixel = (event: PointerEvent): { x: number; y: number } => {
    const rect = els.scene.getBoundingClientRect();
    return {
      x: ((event.clientX - rect.left) / rect.width) * DEMO_WIDTH,
      y: ((event.clientY - rect.top) / rect.height) * DEMO_HEIGHT,
    };
  };

  els.scene.addEventListener("pointerdown", (event) => {
    drag = toImagePixel(event);
    els.scene.setPointerCapture(event.pointerId);
  });

  els.scene.addEventListener("pointermove", (event) => {
    if (drag) {
      const here = toImagePixel(event);
      preview = normalizeDrag(drag.x, drag.y, here.x, here.y, DEMO_WIDTH, DEMO_HEIGHT) ?? {
        x0: Math.min(drag.x, here.x),
        y0: Math.min(drag.y, here.y),
        x1: Math.max(drag.x, here.x),
        y1: Math.max(drag.y, here.y),
      };
      repaintScene();
      return;
    }
    // hover over a mask highlights its word and the mask itself
    const { x, y } = toImagePixel(event);
    const hit = maskAtPixel(prepared, Math.floor(x), Math.floor(y));
    const next: Hover = hit ? { kind: "mask", position: hit.wordPosition } : null;
    const changed =
      (state.hover === null) !== (next === null) ||
      (state.hover !== null && next !== null && state.hover.position !== next.position);
    if (changed) onHover(next);
  });

  els.scene.addEventListener("pointerup", (event) => {
    if (!drag) return;
    const start = drag;
    drag = null;
    preview = null;
    const here = toImagePixel(event);
    const box = normalizeDrag(start.x, start.y, here.x, here.y, DEMO_WIDTH, DEMO_HEIGHT);
    if (!box) {
      setStatus(els, "drag ignored: box must be at least 4×4 image pixels");
      repaintScene();
      return;
    }
    state = withBox(state, box);
    repaintScene();
    void requestCandidates(box);
  });

  const requestCandidates = async (box: Box): Promise<void> => {
    setStatus(els, "inferring…");
    const started = performance.now();
    try {
      const response = await api.infer(DEMO_IMAGE_B64, box, 5);
      if (response === null) return; // superseded by a newer box
      state = withCandidates(state, response);
      prepared = state.candidates[state.active]
        ? prepareMasks(state.candidates[state.active])
        : [];
      const ms = Math.round(performance.now() - started);
      setStatus(
        els,
        `${state.candidates.length} candidate(s) in ${ms} ms · model ${state.modelVersion ?? "?"}`,
      );
      repaintPanels();
      repaintScene();
    } catch (err) {
      const message =
        err instanceof ApiError
          ? err.message
          : "service unreachable — is it running? (see README: serve command)";
      setStatus(els, message, "error");
    }
  };

  loadImage(DEMO_IMAGE_URI)
    .then((img) => {
      image = img;
      repaintScene();
      setStatus(els, "draw a box around an object to request candidates");
    })
    .catch((err: unknown) => {
      setStatus(els, err instanceof Error ? err.message : String(err), "error");
    });
}

document.addEventListener("DOMContentLoaded", main);
