// DOM wiring: state lives in one object, every change re-renders, and all
// session requests flow through a single queue so frames never arrive out
// of order.

import { ApiError, NavigatorClient } from "./api.js";
import { RequestQueue } from "./queue.js";
import {
  initialState,
  onBusy,
  onCameraResult,
  onConnected,
  onDisconnected,
  onError,
  onHistory,
  onPromptResult,
  onSessionCreated,
  playbackTick,
  render,
  UISessionView,
} from "./state.js";

const PLAYBACK_MS = 120;
const ORBIT_STEP = 0.5;

function baseUrl(): string {
  const params = new URLSearchParams(window.location.search);
  return params.get("service") ?? "";
}

const client = new NavigatorClient(baseUrl());
const queue = new RequestQueue();
const root = document.getElementById("app")!;
let state: UISessionView = initialState();
let playbackTimer: number | null = null;

function update(next: UISessionView): void {
  state = next;
  root.innerHTML = render(state);
  bind();
}

function startPlayback(): void {
  if (playbackTimer !== null) window.clearInterval(playbackTimer);
  playbackTimer = window.setInterval(() => {
    update(playbackTick(state));
    if (!state.playback && playbackTimer !== null) {
      window.clearInterval(playbackTimer);
      playbackTimer = null;
    }
  }, PLAYBACK_MS);
}

async function refreshHistory(): Promise<void> {
  if (!state.sessionId) return;
  const { history } = await client.history(state.sessionId);
  update(onHistory(state, history));
}

function describe(err: unknown): string {
  if (err instanceof ApiError) return `${err.code}: ${err.message}`;
  return err instanceof Error ? err.message : String(err);
}

async function connect(): Promise<void> {
  try {
    const health = await client.health();
    if (health.status !== "ok") {
      update(onDisconnected(state, "service is starting, retry shortly"));
      return;
    }
    const { datasets } = await client.datasets();
    update(onConnected(state, datasets));
    if (datasets.length) await openSession(datasets[0]);
  } catch (err) {
    update(onDisconnected(state, `service unreachable (${describe(err)})`));
  }
}

async function openSession(dataset: string): Promise<void> {
  try {
    const info = await client.createSession(dataset);
    update(onSessionCreated(state, info));
  } catch (err) {
    update(onError(state, describe(err)));
  }
}

function submitPrompt(text: string): void {
  if (!state.sessionId || state.busy) return;
  const trimmed = text.trim();
  if (!trimmed) return; // client-side validation: no request for empty prompts
  const sid = state.sessionId;
  update(onBusy(state));
  queue
    .enqueue(() => client.prompt(sid, trimmed))
    .then(async (result) => {
      update(onPromptResult(state, result));
      startPlayback();
      await refreshHistory();
    })
    .catch((err) => update(onError(state, describe(err))));
}

function nudge(action: number[]): void {
  if (!state.sessionId || state.busy) return;
  const sid = state.sessionId;
  queue
    .enqueue(() => client.cameraAction(sid, action))
    .then((result) => update(onCameraResult(state, result)))
    .catch((err) => update(onError(state, describe(err))));
}

function replay(index: number): void {
  const entry = state.history[index];
  if (!entry || !entry.viewpoint || !state.sessionId || state.busy) return;
  const sid = state.sessionId;
  const viewpoint = entry.viewpoint;
  queue
    .enqueue(() => client.cameraAbsolute(sid, viewpoint))
    .then((result) => update(onCameraResult(state, result)))
    .catch((err) => update(onError(state, describe(err))));
}

function bind(): void {
  document.getElementById("retry")?.addEventListener("click", () => void connect());
  document.getElementById("dataset-picker")?.addEventListener("change", (ev) => {
    void openSession((ev.target as HTMLSelectElement).value);
  });
  document.getElementById("prompt-form")?.addEventListener("submit", (ev) => {
    ev.preventDefault();
    const input = document.getElementById("prompt-input") as HTMLInputElement | null;
    if (input) submitPrompt(input.value);
  });
  const nudges: Array<[string, number[]]> = [
    ["orbit-left", [0, 0, -ORBIT_STEP, 0, 0]],
    ["orbit-right", [0, 0, ORBIT_STEP, 0, 0]],
    ["orbit-up", [0, ORBIT_STEP, 0, 0, 0]],
    ["orbit-down", [0, -ORBIT_STEP, 0, 0, 0]],
    ["zoom-in", [0, 0, 0, 0, -1]],
    ["zoom-out", [0, 0, 0, 0, 1]],
  ];
  for (const [id, action] of nudges) {
    document.getElementById(id)?.addEventListener("click", () => nudge(action));
  }
  document.querySelectorAll("#history [data-replay]").forEach((el) => {
    el.addEventListener("click", () => {
      replay(Number((el as HTMLElement).dataset.replay));
    });
  });
}

update(state);
void connect();
