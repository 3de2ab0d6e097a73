import type { Counts, Status } from "./api.js";

export const FEED_LIMIT = 50;

export interface WarningEntry {
  text: string;
  timestampMs: number;
  kind: "anomaly" | "general";
}

/** Pure snapshot of everything the dashboard renders. Derived only from API payloads. */
export interface ConsoleState {
  connected: boolean;
  mode: number;
  running: boolean;
  counts: Record<string, number>;
  total: number;
  skip: number | null;
  threshold: number;
  fired: boolean;
  latestLarge: boolean;
  droppedFrames: number;
  /** Bumped whenever counts change so the frame image URL is cache-busted. */
  frameVersion: number;
  /** Newest first, capped at FEED_LIMIT. */
  warnings: WarningEntry[];
  /** Operator-chosen frame source; informational only, the server owns sessions. */
  source: string | null;
  lastError: string | null;
}

export function initialState(): ConsoleState {
  return {
    connected: false,
    mode: 1,
    running: false,
    counts: {},
    total: 0,
    skip: null,
    threshold: 10,
    fired: false,
    latestLarge: false,
    droppedFrames: 0,
    frameVersion: 0,
    warnings: [],
    source: null,
    lastError: null,
  };
}

export function applyStatus(state: ConsoleState, status: Status): ConsoleState {
  const countsChanged = status.total !== state.total;
  return {
    ...state,
    connected: true,
    mode: status.mode,
    running: status.running,
    counts: status.counts,
    total: status.total,
    skip: status.skip,
    threshold: status.threshold,
    fired: status.fired,
    latestLarge: status.latest_large,
    droppedFrames: status.dropped_frames,
    frameVersion: countsChanged ? state.frameVersion + 1 : state.frameVersion,
    lastError: null,
  };
}

export function applyCounts(state: ConsoleState, counts: Counts): ConsoleState {
  return {
    ...state,
    connected: true,
    counts: counts.per_class,
    total: counts.total,
    frameVersion: state.frameVersion + 1,
  };
}

export function pushWarning(state: ConsoleState, entry: WarningEntry): ConsoleState {
  return { ...state, warnings: [entry, ...state.warnings].slice(0, FEED_LIMIT) };
}

export function setDisconnected(state: ConsoleState, reason: string): ConsoleState {
  return { ...state, connected: false, lastError: reason };
}

export function setError(state: ConsoleState, reason: string): ConsoleState {
  return { ...state, lastError: reason };
}

export function setSource(state: ConsoleState, source: string): ConsoleState {
  return { ...state, source };
}
