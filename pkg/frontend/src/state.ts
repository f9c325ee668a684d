import type { Box } from "./box.js";
import type { Rle } from "./rle.js";

/** One mask of a candidate, as served over the wire. */
export interface WireMask {
  rle: Rle;
  word_position: number;
  confidence: number;
}

/** One caption/mask candidate, as served over the wire. */
export interface WireCandidate {
  tokens: number[];
  caption: string;
  score: number;
  masks: WireMask[];
}

export interface InferResponse {
  model_version: string;
  candidates: WireCandidate[];
}

/** Hover target: a caption word position or the mask linked to it. */
export type Hover = { kind: "word" | "mask"; position: number } | null;

export interface SessionState {
  box: Box | null;
  candidates: WireCandidate[];
  modelVersion: string | null;
  /** Tab currently shown; < candidates.length whenever candidates exist. */
  active: number;
  /** Candidate recorded via "use this"; survives tab switches. */
  selected: number | null;
  hover: Hover;
}

export function initialState(): SessionState {
  return {
    box: null,
    candidates: [],
    modelVersion: null,
    active: 0,
    selected: null,
    hover: null,
  };
}

export function withBox(state: SessionState, box: Box): SessionState {
  return { ...state, box };
}

/** Install a response: tabs ordered by descending score, view reset. */
export function withCandidates(
  state: SessionState,
  response: InferResponse,
): SessionState {
  const candidates = [...response.candidates].sort((a, b) => b.score - a.score);
  return {
    ...state,
    candidates,
    modelVersion: response.model_version,
    active: 0,
    selected: null,
    hover: null,
  };
}

/** Switch tabs; the recorded selection is untouched. */
export function withActive(state: SessionState, index: number): SessionState {
  if (index < 0 || index >= state.candidates.length) {
    return state;
  }
  return { ...state, active: index, hover: null };
}

/** Record "use this" for the visible candidate. */
export function withSelection(state: SessionState): SessionState {
  if (state.candidates.length === 0) {
    return state;
  }
  return { ...state, selected: state.active };
}

export function withHover(state: SessionState, hover: Hover): SessionState {
  return { ...state, hover };
}
