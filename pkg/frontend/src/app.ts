/**
 * Browser entry point: one WebSocket to the peer gateway, one reducer, one
 * render pass per change. No framework — the page is a direct projection
 * of the model, which is itself a direct projection of gateway messages.
 */

import { encodeCommand, parseServerMessage, type Command } from "./protocol.js";
import {
  actionInflight,
  banners,
  canDrive,
  initModel,
  reduce,
  rosterRows,
  type Model,
  type Msg,
} from "./state.js";
import {
  clock,
  connectionLabel,
  displayedOffset,
  outcomeLabel,
  progressFraction,
  slideLabel,
} from "./format.js";

// --------------------------------------------------------------- gateway

const BACKOFF_START_MS = 500;
const BACKOFF_CAP_MS = 8000;

class GatewayClient {
  private ws: WebSocket | null = null;
  private backoff = BACKOFF_START_MS;
  private nextSeq = 1;
  private closedByUs = false;

  constructor(
    private readonly url: string,
    private readonly dispatch: (msg: Msg) => void,
  ) {}

  connect(): void {
    this.dispatch({ kind: "socket", status: "connecting" });
    const ws = new WebSocket(this.url);
    this.ws = ws;
    ws.onopen = () => {
      this.backoff = BACKOFF_START_MS;
      this.dispatch({ kind: "socket", status: "open" });
    };
    ws.onmessage = (ev) => {
      if (typeof ev.data !== "string") return;
      const message = parseServerMessage(ev.data);
      if (message !== null) this.dispatch({ kind: "server", message });
    };
    ws.onclose = () => {
      if (ws !== this.ws) return;
      this.ws = null;
      this.dispatch({ kind: "socket", status: "closed" });
      if (!this.closedByUs) this.scheduleReconnect();
    };
    ws.onerror = () => ws.close();
  }

  private scheduleReconnect(): void {
    const jitter = 0.8 + Math.random() * 0.4;
    const delay = Math.round(this.backoff * jitter);
    this.backoff = Math.min(this.backoff * 2, BACKOFF_CAP_MS);
    setTimeout(() => {
      if (this.ws === null && !this.closedByUs) this.connect();
    }, delay);
  }

  /** Send a command; returns its seq, or null when the socket is down. */
  send(cmd: Command): number | null {
    if (this.ws === null || this.ws.readyState !== WebSocket.OPEN) return null;
    const seq = this.nextSeq++;
    this.ws.send(encodeCommand(cmd, seq));
    return seq;
  }

  shutdown(): void {
    this.closedByUs = true;
    this.ws?.close();
  }
}

// ------------------------------------------------------------------- app

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (node === null) throw new Error(`missing element #${id}`);
  return node as T;
}

function startApp(): void {
  let model: Model = initModel();
  let stateReceivedAt = performance.now();

  const wsUrl = `${location.protocol === "https:" ? "wss" : "ws"}://${location.host}/ws`;
  const client = new GatewayClient(wsUrl, (msg) => {
    if (msg.kind === "server" && msg.message.type === "ui_state") {
      stateReceivedAt = performance.now();
    }
    model = reduce(model, msg);
    render();
  });

  function send(cmd: Command): void {
    const seq = client.send(cmd);
    if (seq !== null) {
      model = reduce(model, { kind: "sent", action: cmd.action, seq });
      render();
    }
  }

  function dispatch(msg: Msg): void {
    model = reduce(model, msg);
    render();
  }

  // ------------------------------------------------------------ elements

  const chip = el<HTMLSpanElement>("connection");
  const whoami = el<HTMLSpanElement>("whoami");
  const lectureLabel = el<HTMLSpanElement>("lecture");
  const groupLabel = el<HTMLSpanElement>("group");
  const slideEl = el<HTMLDivElement>("slide");
  const playingEl = el<HTMLSpanElement>("playing");
  const offsetEl = el<HTMLSpanElement>("offset");
  const durationEl = el<HTMLSpanElement>("duration");
  const barEl = el<HTMLDivElement>("bar");
  const barFillEl = el<HTMLDivElement>("bar-fill");
  const controlsEl = el<HTMLDivElement>("controls");
  const leaderTools = el<HTMLDivElement>("leader-tools");
  const transferSel = el<HTMLSelectElement>("transfer-to");
  const activeToggle = el<HTMLInputElement>("active-toggle");
  const promptEl = el<HTMLDivElement>("control-prompt");
  const pendingEl = el<HTMLDivElement>("request-pending");
  const outcomeEl = el<HTMLDivElement>("request-outcome");
  const bannersEl = el<HTMLDivElement>("banners");
  const rosterEl = el<HTMLUListElement>("roster");
  const chatLog = el<HTMLDivElement>("chat-log");
  const chatInput = el<HTMLInputElement>("chat-input");
  const toastsEl = el<HTMLDivElement>("toasts");
  const departedEl = el<HTMLDivElement>("departed");

  // ------------------------------------------------------------- actions

  function transport(cmd: Command): void {
    if (model.view === null) return;
    if (!model.view.you_lead) {
      // Following: playback is the leader's to drive. Offer the handoff
      // path instead of silently ignoring the click.
      dispatch({ kind: "control_prompt", show: true });
      return;
    }
    send(cmd);
  }

  el<HTMLButtonElement>("btn-play").onclick = () => transport({ action: "play" });
  el<HTMLButtonElement>("btn-pause").onclick = () => transport({ action: "pause" });
  el<HTMLButtonElement>("btn-prev").onclick = () => {
    const v = model.view;
    if (v !== null) transport({ action: "slide", index: Math.max(0, v.playback.slide_index - 1) });
  };
  el<HTMLButtonElement>("btn-next").onclick = () => {
    const v = model.view;
    if (v === null) return;
    const last = v.manifest.slide_count - 1;
    transport({ action: "slide", index: Math.min(last, v.playback.slide_index + 1) });
  };

  barEl.onclick = (ev) => {
    const v = model.view;
    if (v === null) return;
    const rect = barEl.getBoundingClientRect();
    const frac = Math.min(1, Math.max(0, (ev.clientX - rect.left) / rect.width));
    transport({ action: "seek", ms: Math.round(frac * v.manifest.duration_ms) });
  };

  el<HTMLButtonElement>("btn-request").onclick = () => send({ action: "request_control" });
  el<HTMLButtonElement>("btn-dismiss-prompt").onclick = () =>
    dispatch({ kind: "control_prompt", show: false });
  el<HTMLButtonElement>("btn-outcome-ok").onclick = () => dispatch({ kind: "clear_outcome" });

  el<HTMLButtonElement>("btn-transfer").onclick = () => {
    const to = transferSel.value;
    if (to !== "") send({ action: "transfer", participant: to });
  };
  activeToggle.onchange = () => send({ action: "set_active", active: activeToggle.checked });
  el<HTMLButtonElement>("btn-leave").onclick = () => send({ action: "leave" });

  el<HTMLFormElement>("chat-form").onsubmit = (ev) => {
    ev.preventDefault();
    const text = chatInput.value.trim();
    if (text === "") return;
    send({ action: "chat", text });
    chatInput.value = "";
  };

  // -------------------------------------------------------------- render

  function render(): void {
    const v = model.view;
    chip.textContent = connectionLabel(model.connection);
    chip.dataset.state = model.connection;

    if (v === null) {
      whoami.textContent = "…";
      return;
    }
    whoami.textContent = `${v.name} (${v.phase})`;
    lectureLabel.textContent = v.manifest.lecture_id;
    groupLabel.textContent = v.group_id ?? "—";

    // Playback panel.
    slideEl.textContent = slideLabel(v.playback.slide_index, v.manifest.slide_count);
    playingEl.textContent = v.playback.playing ? "▶ playing" : "⏸ paused";
    renderTimeline();

    const driving = canDrive(model);
    controlsEl.classList.toggle("inactive", !driving);
    for (const btn of controlsEl.querySelectorAll("button")) {
      // Buttons stay clickable for followers so a click can open the
      // request-control prompt; they grey out visually via .inactive.
      (btn as HTMLButtonElement).disabled =
        model.connection !== "open" || actionInflight(model, "play");
    }

    // Leader-only affordances are hidden, not disabled, for everyone else.
    leaderTools.hidden = !v.you_lead;
    if (v.you_lead) {
      const others = v.roster.filter((m) => m.participant !== v.name);
      const current = transferSel.value;
      transferSel.innerHTML = "";
      for (const m of others) {
        const opt = document.createElement("option");
        opt.value = m.participant;
        opt.textContent = m.participant;
        transferSel.appendChild(opt);
      }
      if (others.some((m) => m.participant === current)) transferSel.value = current;
      activeToggle.checked = v.active;
    }

    // Follower request-control flow.
    promptEl.hidden = !model.controlPrompt || v.you_lead;
    const leaderName = v.leader ?? "the leader";
    el<HTMLSpanElement>("prompt-leader").textContent = leaderName;
    pendingEl.hidden = !model.requestPending;
    outcomeEl.hidden = model.lastOutcome === null;
    if (model.lastOutcome !== null) {
      el<HTMLSpanElement>("outcome-text").textContent = outcomeLabel(model.lastOutcome);
    }

    // One banner per pending requester; all of them derive from the same
    // ui_state, so granting any single request clears the whole strip.
    bannersEl.innerHTML = "";
    for (const requester of banners(model)) {
      const div = document.createElement("div");
      div.className = "banner";
      const label = document.createElement("span");
      label.textContent = `${requester} asked to take control`;
      const grant = document.createElement("button");
      grant.textContent = "Grant";
      grant.onclick = () => send({ action: "grant", participant: requester });
      const deny = document.createElement("button");
      deny.textContent = "Deny";
      deny.onclick = () => send({ action: "deny", participant: requester });
      div.append(label, grant, deny);
      bannersEl.appendChild(div);
    }

    // Roster.
    rosterEl.innerHTML = "";
    for (const row of rosterRows(model)) {
      const li = document.createElement("li");
      li.textContent = row.participant;
      if (row.leads) {
        const badge = document.createElement("span");
        badge.className = "badge";
        badge.textContent = "leader";
        li.appendChild(badge);
      }
      if (row.you) li.classList.add("you");
      li.title = `joined #${row.joinSeq}`;
      rosterEl.appendChild(li);
    }

    // Chat.
    chatLog.innerHTML = "";
    for (const line of model.chat) {
      const div = document.createElement("div");
      div.className = line.self ? "chat-line self" : "chat-line";
      const who = document.createElement("span");
      who.className = "chat-from";
      who.textContent = line.from;
      const what = document.createElement("span");
      what.textContent = line.text;
      div.append(who, what);
      chatLog.appendChild(div);
    }
    chatLog.scrollTop = chatLog.scrollHeight;

    // Toasts.
    toastsEl.innerHTML = "";
    for (const toast of model.toasts) {
      const div = document.createElement("div");
      div.className = "toast";
      const text = document.createElement("span");
      text.textContent = `${toast.code}: ${toast.message}`;
      const close = document.createElement("button");
      close.textContent = "×";
      close.onclick = () => dispatch({ kind: "dismiss_toast", id: toast.id });
      div.append(text, close);
      toastsEl.appendChild(div);
    }

    // Session over.
    departedEl.hidden = v.phase !== "departed";
    if (v.phase === "departed") {
      el<HTMLSpanElement>("departed-reason").textContent =
        v.departed_reason ?? "session ended";
    }
  }

  function renderTimeline(): void {
    const v = model.view;
    if (v === null) return;
    const elapsed = performance.now() - stateReceivedAt;
    const shown = displayedOffset(v.playback, v.manifest.duration_ms, elapsed);
    offsetEl.textContent = clock(shown);
    durationEl.textContent = clock(v.manifest.duration_ms);
    barFillEl.style.width = `${progressFraction(shown, v.manifest.duration_ms) * 100}%`;
  }

  // Smooth progress between pushes; authoritative state still only ever
  // comes from ui_state.
  setInterval(() => {
    if (model.view !== null && model.view.playback.playing) renderTimeline();
  }, 250);

  window.addEventListener("beforeunload", () => client.shutdown());
  client.connect();
  render();
}

startApp();
