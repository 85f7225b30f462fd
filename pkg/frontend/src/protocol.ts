/**
 * Wire types for the peer gateway's WebSocket channel.
 *
 * Everything here mirrors the JSON the gateway actually sends and accepts;
 * the UI speaks this vocabulary and nothing else. Commands go up as
 * `{"action": ..., "seq": ...}` objects; the server pushes `ui_*` messages
 * to every attached client and answers each command with a `cmd_result`
 * carrying the echoed `seq`.
 */

export interface Version {
  epoch: number;
  seq: number;
}

export interface RosterEntry {
  participant: string;
  join_seq: number;
  leads: boolean;
}

export interface PlaybackView {
  slide_index: number;
  media_offset_ms: number;
  playing: boolean;
  version: Version;
  anchor_time: number | null;
  effective_offset_ms: number;
}

export interface ManifestView {
  lecture_id: string;
  slide_count: number;
  duration_ms: number;
}

/** Full projection of the peer's session state; sent on attach and on
 * every change. The UI renders this and keeps no protocol state of its
 * own. */
export interface UiState {
  type: "ui_state";
  name: string;
  phase: string;
  group_id: string | null;
  leader: string | null;
  epoch: number;
  you_lead: boolean;
  roster: RosterEntry[];
  pending_requests: string[];
  playback: PlaybackView;
  manifest: ManifestView;
  active: boolean;
  departed_reason: string | null;
}

export interface CmdResult {
  type: "cmd_result";
  seq: number | null;
  ok: boolean;
  error?: string;
  message?: string;
  [extra: string]: unknown;
}

export interface UiChat {
  type: "ui_chat";
  from: string;
  text: string;
  chat_seq: number;
  epoch: number;
}

export type RequestOutcome = "granted" | "denied" | "superseded" | "timeout";

export interface UiRequestOutcome {
  type: "ui_request_outcome";
  outcome: RequestOutcome;
}

export interface UiError {
  type: "ui_error";
  code: string;
  message: string;
}

export type ServerMessage = UiState | CmdResult | UiChat | UiRequestOutcome | UiError;

const SERVER_TYPES = new Set([
  "ui_state",
  "cmd_result",
  "ui_chat",
  "ui_request_outcome",
  "ui_error",
]);

/** Parse one incoming WebSocket text frame. Returns null for anything that
 * is not a known server message, so a confused server can't wedge the UI. */
export function parseServerMessage(raw: string): ServerMessage | null {
  let data: unknown;
  try {
    data = JSON.parse(raw);
  } catch {
    return null;
  }
  if (typeof data !== "object" || data === null) return null;
  const type = (data as { type?: unknown }).type;
  if (typeof type !== "string" || !SERVER_TYPES.has(type)) return null;
  return data as ServerMessage;
}

export type Command =
  | { action: "play" }
  | { action: "pause" }
  | { action: "seek"; ms: number }
  | { action: "slide"; index: number }
  | { action: "request_control" }
  | { action: "grant"; participant: string }
  | { action: "deny"; participant: string }
  | { action: "transfer"; participant: string }
  | { action: "chat"; text: string }
  | { action: "set_active"; active: boolean }
  | { action: "leave" }
  | { action: "state" };

/** Serialize a command with its correlation seq, exactly as the gateway
 * expects it. */
export function encodeCommand(cmd: Command, seq: number): string {
  return JSON.stringify({ ...cmd, seq });
}
