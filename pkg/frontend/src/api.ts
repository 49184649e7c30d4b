// Typed client for the navigator service. Every mutation of what the user
// sees flows through one of these calls; the client never invents state.

export interface ViewpointJson {
  orientation: number[];
  depth: number;
  look_at: number[];
}

export interface TrajectoryStep {
  viewpoint: ViewpointJson;
  reward: number;
  frame: string; // base64 PNG
}

export interface SessionInfo {
  session_id: string;
  dataset: string;
  viewpoint: ViewpointJson;
  frame: string;
}

export interface PromptResult {
  viewpoint: ViewpointJson;
  reward: number;
  frame: string;
  trajectory: TrajectoryStep[];
}

export interface CameraResult {
  viewpoint: ViewpointJson;
  reward: number | null;
  frame: string;
}

export interface HistoryEntry {
  prompt: string;
  viewpoint?: ViewpointJson;
  reward?: number;
  reward_mode?: string;
  error?: string;
}

export class ApiError extends Error {
  constructor(readonly status: number, readonly code: string, message: string) {
    super(message);
  }
}

type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class NavigatorClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const resp = await this.fetchImpl(this.baseUrl + path, {
      method,
      headers: body === undefined ? undefined : { "content-type": "application/json" },
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    const payload = await resp.json().catch(() => ({}));
    if (!resp.ok) {
      throw new ApiError(
        resp.status,
        typeof payload.code === "string" ? payload.code : "unknown",
        typeof payload.message === "string" ? payload.message : `HTTP ${resp.status}`,
      );
    }
    return payload as T;
  }

  health(): Promise<{ status: string }> {
    return this.request("GET", "/health");
  }

  datasets(): Promise<{ datasets: string[] }> {
    return this.request("GET", "/datasets");
  }

  createSession(dataset: string): Promise<SessionInfo> {
    return this.request("POST", "/sessions", { dataset });
  }

  prompt(sessionId: string, text: string, rewardMode?: string): Promise<PromptResult> {
    const body: Record<string, unknown> = { text };
    if (rewardMode) body.reward_mode = rewardMode;
    return this.request("POST", `/sessions/${sessionId}/prompt`, body);
  }

  cameraAction(sessionId: string, action: number[]): Promise<CameraResult> {
    return this.request("POST", `/sessions/${sessionId}/camera`, { action });
  }

  cameraAbsolute(sessionId: string, viewpoint: ViewpointJson): Promise<CameraResult> {
    return this.request("POST", `/sessions/${sessionId}/camera`, { viewpoint });
  }

  history(sessionId: string): Promise<{ history: HistoryEntry[] }> {
    return this.request("GET", `/sessions/${sessionId}/history`);
  }
}
