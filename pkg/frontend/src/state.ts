// Session view state and its pure transitions. Rendering is a pure function
// of this object, so identical payloads always produce identical DOM.

import type {
  CameraResult,
  HistoryEntry,
  PromptResult,
  SessionInfo,
  TrajectoryStep,
  ViewpointJson,
} from "./api.js";

export interface Playback {
  steps: TrajectoryStep[];
  position: number; // index of the step currently displayed
  // authoritative landing point: the service's chosen viewpoint, which can
  // sit anywhere on the visited path, not necessarily at its end
  final: { frame: string; reward: number; viewpoint: ViewpointJson };
}

export interface UISessionView {
  connected: boolean;
  datasets: string[];
  sessionId: string | null;
  dataset: string | null;
  frame: string | null;
  reward: number | null;
  viewpoint: ViewpointJson | null;
  history: HistoryEntry[];
  playback: Playback | null;
  busy: boolean;
  error: string | null;
}

export function initialState(): UISessionView {
  return {
    connected: false,
    datasets: [],
    sessionId: null,
    dataset: null,
    frame: null,
    reward: null,
    viewpoint: null,
    history: [],
    playback: null,
    busy: false,
    error: null,
  };
}

export function onConnected(state: UISessionView, datasets: string[]): UISessionView {
  return { ...state, connected: true, datasets, error: null };
}

export function onDisconnected(state: UISessionView, message: string): UISessionView {
  return { ...state, connected: false, error: message };
}

export function onSessionCreated(state: UISessionView, info: SessionInfo): UISessionView {
  return {
    ...state,
    sessionId: info.session_id,
    dataset: info.dataset,
    frame: info.frame,
    viewpoint: info.viewpoint,
    reward: null,
    history: [],
    playback: null,
    error: null,
  };
}

export function onBusy(state: UISessionView): UISessionView {
  return { ...state, busy: true, error: null };
}

export function onPromptResult(state: UISessionView, result: PromptResult): UISessionView {
  // playback starts at the first trajectory step; the final frame/reward
  // land when playback finishes (or immediately when there is no trajectory)
  if (result.trajectory.length === 0) {
    return {
      ...state,
      busy: false,
      frame: result.frame,
      reward: result.reward,
      viewpoint: result.viewpoint,
      playback: null,
    };
  }
  const first = result.trajectory[0];
  return {
    ...state,
    busy: false,
    playback: {
      steps: result.trajectory,
      position: 0,
      final: { frame: result.frame, reward: result.reward, viewpoint: result.viewpoint },
    },
    frame: first.frame,
    reward: first.reward,
    viewpoint: first.viewpoint,
  };
}

export function playbackTick(state: UISessionView): UISessionView {
  if (!state.playback) return state;
  const next = state.playback.position + 1;
  if (next >= state.playback.steps.length) {
    const final = state.playback.final;
    return {
      ...state,
      playback: null,
      frame: final.frame,
      reward: final.reward,
      viewpoint: final.viewpoint,
    };
  }
  const step = state.playback.steps[next];
  return {
    ...state,
    playback: { ...state.playback, position: next },
    frame: step.frame,
    reward: step.reward,
    viewpoint: step.viewpoint,
  };
}

export function onHistory(state: UISessionView, history: HistoryEntry[]): UISessionView {
  return { ...state, history };
}

export function onCameraResult(state: UISessionView, result: CameraResult): UISessionView {
  return {
    ...state,
    busy: false,
    frame: result.frame,
    reward: result.reward,
    viewpoint: result.viewpoint,
    playback: null,
  };
}

export function onError(state: UISessionView, message: string): UISessionView {
  return { ...state, busy: false, error: message };
}

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function rewardText(reward: number | null): string {
  return reward === null ? "–" : reward.toFixed(4);
}

export function render(state: UISessionView): string {
  const banner = state.error
    ? `<div class="banner error">${escapeHtml(state.error)} <button id="retry">retry</button></div>`
    : state.connected
      ? ""
      : `<div class="banner">connecting…</div>`;

  const picker = state.datasets.length
    ? `<select id="dataset-picker">${state.datasets
        .map((d) => `<option value="${escapeHtml(d)}"${d === state.dataset ? " selected" : ""}>${escapeHtml(d)}</option>`)
        .join("")}</select>`
    : "";

  const frame = state.frame
    ? `<img id="frame" alt="rendered view" src="data:image/png;base64,${state.frame}">`
    : `<div id="frame" class="placeholder">no frame</div>`;

  const playing = state.playback
    ? `<span class="playing">playing ${state.playback.position + 1}/${state.playback.steps.length}</span>`
    : "";

  const history = state.history
    .map((entry, i) => {
      const label = entry.error
        ? `${escapeHtml(entry.prompt)} failed: ${escapeHtml(entry.error)}`
        : `${escapeHtml(entry.prompt)} reward ${rewardText(entry.reward ?? null)}`;
      const replayable = entry.viewpoint ? ` data-replay="${i}" class="replayable"` : "";
      return `<li${replayable}>${label}</li>`;
    })
    .join("");

  const disabled = state.busy || !state.sessionId ? " disabled" : "";
  return `
${banner}
<header>${picker}</header>
<main>
  <section class="viewer">
    ${frame}
    <div class="readout">reward: <span id="reward">${rewardText(state.reward)}</span> ${playing}</div>
    <div class="camera">
      <button id="orbit-left"${disabled}>&#8634;</button>
      <button id="orbit-up"${disabled}>&#8593;</button>
      <button id="orbit-down"${disabled}>&#8595;</button>
      <button id="orbit-right"${disabled}>&#8635;</button>
      <button id="zoom-in"${disabled}>zoom in</button>
      <button id="zoom-out"${disabled}>zoom out</button>
    </div>
  </section>
  <section class="prompting">
    <form id="prompt-form">
      <input id="prompt-input" placeholder="e.g. show the dorsal fin from the side"${disabled}>
      <button id="prompt-send"${disabled}>${state.busy ? "working…" : "go"}</button>
    </form>
    <ol id="history">${history}</ol>
  </section>
</main>`;
}
