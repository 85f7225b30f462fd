/** Presentation helpers: timeline math and label formatting. All pure. */

import type { PlaybackView } from "./protocol.js";

/** Render milliseconds as m:ss (or h:mm:ss past the hour). */
export function clock(ms: number): string {
  const total = Math.max(0, Math.floor(ms / 1000));
  const s = total % 60;
  const m = Math.floor(total / 60) % 60;
  const h = Math.floor(total / 3600);
  const mm = String(m).padStart(2, "0");
  const ss = String(s).padStart(2, "0");
  return h > 0 ? `${h}:${mm}:${ss}` : `${m}:${ss}`;
}

/**
 * Where the shared timeline sits for display, `elapsed` ms after the last
 * ui_state arrived. Pure extrapolation for a smooth progress bar between
 * server pushes; the authoritative position is always the next ui_state.
 */
export function displayedOffset(
  playback: PlaybackView,
  durationMs: number,
  elapsed: number,
): number {
  const base = playback.effective_offset_ms;
  if (!playback.playing) return Math.min(base, durationMs);
  return Math.min(base + Math.max(0, elapsed), durationMs);
}

/** Progress through the lecture as a 0..1 fraction. */
export function progressFraction(offsetMs: number, durationMs: number): number {
  if (durationMs <= 0) return 0;
  return Math.min(1, Math.max(0, offsetMs / durationMs));
}

/** "Slide 3 of 12" — slide indices are zero-based on the wire. */
export function slideLabel(index: number, count: number): string {
  return `Slide ${index + 1} of ${count}`;
}

/** Short human label for a connection state chip. */
export function connectionLabel(state: "connecting" | "open" | "closed"): string {
  switch (state) {
    case "connecting":
      return "connecting…";
    case "open":
      return "connected";
    case "closed":
      return "reconnecting…";
  }
}

/** One line describing how our control request ended. */
export function outcomeLabel(outcome: string): string {
  switch (outcome) {
    case "granted":
      return "You have control.";
    case "denied":
      return "The leader declined your request.";
    case "superseded":
      return "Control went to another participant.";
    case "timeout":
      return "Your request timed out.";
    default:
      return `Request ${outcome}.`;
  }
}
