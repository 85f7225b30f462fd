/**
 * Pure view-model reducer.
 *
 * The model is a projection of what the gateway has told us plus the small
 * amount of UI-local state a client legitimately owns: in-flight command
 * bookkeeping (for optimistic button disabling), the "ask to take control?"
 * prompt, and dismissable toasts. Everything about the session itself —
 * roster, leadership, playback, pending control requests — comes straight
 * from the last `ui_state`, so reloading the page and re-attaching always
 * reproduces the identical view.
 */

import type {
  Command,
  RequestOutcome,
  ServerMessage,
  UiState,
} from "./protocol.js";

export type Connection = "connecting" | "open" | "closed";

export interface ChatLine {
  from: string;
  text: string;
  chatSeq: number;
  epoch: number;
  self: boolean;
}

export interface Toast {
  id: number;
  code: string;
  message: string;
}

export interface Model {
  connection: Connection;
  /** Last full session projection from the gateway; null until greeted. */
  view: UiState | null;
  chat: ChatLine[];
  toasts: Toast[];
  nextToastId: number;
  /** Commands awaiting their cmd_result, keyed by seq. */
  inflight: Record<number, Command["action"]>;
  /** True between sending request_control and its terminal outcome. */
  requestPending: boolean;
  /** Terminal outcome of our last control request, until acknowledged. */
  lastOutcome: RequestOutcome | null;
  /** Follower clicked a transport control; offer to request control. */
  controlPrompt: boolean;
}

export type Msg =
  | { kind: "socket"; status: Connection }
  | { kind: "server"; message: ServerMessage }
  | { kind: "sent"; action: Command["action"]; seq: number }
  | { kind: "dismiss_toast"; id: number }
  | { kind: "clear_outcome" }
  | { kind: "control_prompt"; show: boolean };

export function initModel(): Model {
  return {
    connection: "connecting",
    view: null,
    chat: [],
    toasts: [],
    nextToastId: 1,
    inflight: {},
    requestPending: false,
    lastOutcome: null,
    controlPrompt: false,
  };
}

const TOAST_LIMIT = 5;

function pushToast(model: Model, code: string, message: string): Model {
  const toast = { id: model.nextToastId, code, message };
  return {
    ...model,
    toasts: [...model.toasts, toast].slice(-TOAST_LIMIT),
    nextToastId: model.nextToastId + 1,
  };
}

function applyServer(model: Model, message: ServerMessage): Model {
  switch (message.type) {
    case "ui_state": {
      let next: Model = { ...model, view: message };
      if (message.you_lead) {
        // Any outstanding request of ours is moot once we hold control.
        next = { ...next, requestPending: false, controlPrompt: false };
      }
      return next;
    }
    case "cmd_result": {
      const seq = message.seq;
      let next = model;
      let action: Command["action"] | undefined;
      if (typeof seq === "number" && seq in model.inflight) {
        action = model.inflight[seq];
        const inflight = { ...model.inflight };
        delete inflight[seq];
        next = { ...model, inflight };
      }
      if (!message.ok) {
        if (action === "request_control") {
          next = { ...next, requestPending: false };
        }
        return pushToast(
          next,
          String(message.error ?? "CommandFailed"),
          String(message.message ?? "command failed"),
        );
      }
      return next;
    }
    case "ui_chat": {
      const dup = model.chat.some(
        (line) => line.epoch === message.epoch && line.chatSeq === message.chat_seq,
      );
      if (dup) return model;
      const line: ChatLine = {
        from: message.from,
        text: message.text,
        chatSeq: message.chat_seq,
        epoch: message.epoch,
        self: model.view !== null && message.from === model.view.name,
      };
      return { ...model, chat: [...model.chat, line] };
    }
    case "ui_request_outcome":
      return {
        ...model,
        requestPending: false,
        lastOutcome: message.outcome,
      };
    case "ui_error":
      return pushToast(model, message.code, message.message);
  }
}

export function reduce(model: Model, msg: Msg): Model {
  switch (msg.kind) {
    case "socket": {
      if (msg.status === "open") {
        return { ...model, connection: "open" };
      }
      if (msg.status === "closed") {
        // Pending cmd_results and request outcomes died with the socket; a
        // fresh greeting ui_state re-establishes the truth on reconnect.
        return {
          ...model,
          connection: "closed",
          inflight: {},
          requestPending: false,
        };
      }
      return { ...model, connection: msg.status };
    }
    case "server":
      return applyServer(model, msg.message);
    case "sent": {
      let next: Model = {
        ...model,
        inflight: { ...model.inflight, [msg.seq]: msg.action },
      };
      if (msg.action === "request_control") {
        next = { ...next, requestPending: true, controlPrompt: false, lastOutcome: null };
      }
      return next;
    }
    case "dismiss_toast":
      return { ...model, toasts: model.toasts.filter((t) => t.id !== msg.id) };
    case "clear_outcome":
      return { ...model, lastOutcome: null };
    case "control_prompt":
      return { ...model, controlPrompt: msg.show };
  }
}

// ------------------------------------------------------------- selectors

/** Requesters the leader should see one banner each for. Derived straight
 * from the server's pending list: when a grant moves leadership, the next
 * ui_state carries you_lead=false and an empty list, so every banner —
 * including the ones for requests we did NOT accept — disappears at once. */
export function banners(model: Model): string[] {
  if (model.view === null || !model.view.you_lead) return [];
  return model.view.pending_requests;
}

/** Transport controls are live only for the connected leader. */
export function canDrive(model: Model): boolean {
  return (
    model.connection === "open" &&
    model.view !== null &&
    model.view.you_lead &&
    model.view.phase === "leading"
  );
}

/** True while a command of this action awaits its cmd_result. */
export function actionInflight(model: Model, action: Command["action"]): boolean {
  return Object.values(model.inflight).includes(action);
}

/** Roster rows in join order, ready to render. */
export function rosterRows(
  model: Model,
): { participant: string; joinSeq: number; leads: boolean; you: boolean }[] {
  if (model.view === null) return [];
  const you = model.view.name;
  return model.view.roster.map((m) => ({
    participant: m.participant,
    joinSeq: m.join_seq,
    leads: m.leads,
    you: m.participant === you,
  }));
}
