"""HTTP service for interactive, prompt-driven volume exploration.

Sessions carry a current viewpoint, an optional goal, and an append-only
history. Each session mutates under its own lock: a prompt on a busy
session is rejected with a conflict instead of queueing, and concurrent
sessions never share mutable state. Dataset artifacts (volume, grid,
models) are immutable shared reads.
"""

from __future__ import annotations

import base64
import threading
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from . import camera
from .block_encoder import load_block_encoder
from .config import ProjectConfig
from .errors import VolnavError
from .pipeline import (
    ENCODER_CKPT,
    _build_env,
    load_alignment,
    load_bundle,
    load_policy,
    make_provider,
    render_settings,
)
from .render import image_to_bytes, render
from .rl import best_viewpoint
from .volume import Volume


def _viewpoint_json(vp: camera.Viewpoint) -> dict:
    return {
        "orientation": list(vp.orientation),
        "depth": vp.depth,
        "look_at": list(vp.look_at),
    }


def _viewpoint_from_json(data: dict) -> camera.Viewpoint:
    try:
        return camera.Viewpoint(
            tuple(float(x) for x in data["orientation"]),
            float(data["depth"]),
            tuple(float(x) for x in data.get("look_at", (0.0, 0.0, 0.0))),
        )
    except (KeyError, TypeError, ValueError, VolnavError) as exc:
        raise ApiError(400, "invalid-viewpoint", f"bad viewpoint payload: {exc}") from exc


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class Session:
    id: str
    dataset: str
    viewpoint: camera.Viewpoint
    reward_mode: str
    goal_text: str | None = None
    goal: np.ndarray | None = None
    history: list[dict] = field(default_factory=list)
    lock: threading.Lock = field(default_factory=threading.Lock)


class NavigatorState:
    """Loaded dataset artifacts plus the live session table."""

    def __init__(self, config: ProjectConfig):
        self.config = config
        self.loaded = False
        self.load_error: str | None = None
        self.sessions: dict[str, Session] = {}
        self._sessions_lock = threading.Lock()
        self.volume: Volume | None = None
        self.grid = None
        self.tf = None
        self.alignment = None
        self.encoder = None
        self.policy = None
        self.provider = None
        self.envs: dict[str, object] = {}

    def load(self) -> None:
        config = self.config
        try:
            self.volume, self.grid, self.tf = load_bundle(config)
            self.provider = make_provider(config)
            self.alignment = load_alignment(config)
            self.encoder, _ = load_block_encoder(config.workspace_dir / ENCODER_CKPT)
            self.policy = load_policy(config)
            for mode in ("block", "image"):
                self.envs[mode] = _build_env(config, self.volume, self.grid, self.tf,
                                             self.encoder, reward_mode=mode)
            self.loaded = True
        except Exception as exc:  # surfaced through /health
            self.load_error = str(exc)
            raise

    def require_loaded(self) -> None:
        if not self.loaded:
            raise ApiError(503, "starting",
                           self.load_error or "datasets are still loading")

    def default_viewpoint(self) -> camera.Viewpoint:
        depth = self.config.sampling.depth_factor * self.volume.bounding_radius
        return camera.Viewpoint((1.0, 0.0, 0.0, 0.0), depth)

    def render_frame(self, vp: camera.Viewpoint, size=None) -> str:
        frame = camera.to_camera_frame(vp, self.config.fov_radians,
                                       self.config.camera.aspect,
                                       self.volume.bounding_radius)
        img = render(self.volume, self.tf, frame, render_settings(self.config),
                     size or (self.config.render.width, self.config.render.height))
        return base64.b64encode(image_to_bytes(img)).decode("ascii")

    def session(self, session_id: str) -> Session:
        with self._sessions_lock:
            session = self.sessions.get(session_id)
        if session is None:
            raise ApiError(404, "unknown-session", f"no session {session_id!r}")
        return session

    def create_session(self, dataset: str) -> Session:
        if dataset != self.config.dataset.name:
            raise ApiError(404, "unknown-dataset",
                           f"dataset {dataset!r} is not loaded")
        session = Session(
            id=uuid.uuid4().hex,
            dataset=dataset,
            viewpoint=self.default_viewpoint(),
            reward_mode=self.config.rl.reward_mode,
        )
        with self._sessions_lock:
            self.sessions[session.id] = session
        return session


def create_app(state: NavigatorState) -> FastAPI:
    app = FastAPI(title="volnav", version="0.1.0")
    config = state.config

    @app.exception_handler(ApiError)
    async def handle_api_error(request: Request, exc: ApiError):
        return JSONResponse(status_code=exc.status,
                            content={"code": exc.code, "message": exc.message})

    @app.exception_handler(VolnavError)
    async def handle_domain_error(request: Request, exc: VolnavError):
        return JSONResponse(status_code=502,
                            content={"code": type(exc).__name__, "message": str(exc)})

    @app.get("/health")
    def health():
        if state.loaded:
            return {"status": "ok"}
        return {"status": "starting", "detail": state.load_error}

    @app.get("/datasets")
    def datasets():
        if not state.loaded:
            return {"datasets": []}
        return {"datasets": [config.dataset.name]}

    @app.post("/sessions")
    def create_session(payload: dict):
        state.require_loaded()
        dataset = payload.get("dataset")
        if not isinstance(dataset, str) or not dataset:
            raise ApiError(400, "bad-request", "payload needs a 'dataset' string")
        session = state.create_session(dataset)
        return {
            "session_id": session.id,
            "dataset": session.dataset,
            "viewpoint": _viewpoint_json(session.viewpoint),
            "frame": state.render_frame(session.viewpoint),
        }

    @app.post("/sessions/{session_id}/prompt")
    def prompt(session_id: str, payload: dict):
        state.require_loaded()
        session = state.session(session_id)
        text = payload.get("text")
        if not isinstance(text, str) or not text.strip():
            raise ApiError(400, "empty-prompt", "payload needs nonempty 'text'")
        mode = payload.get("reward_mode", session.reward_mode)
        if mode not in ("block", "image"):
            raise ApiError(400, "bad-reward-mode", f"unknown reward mode {mode!r}")
        if not session.lock.acquire(blocking=False):
            raise ApiError(409, "busy", "session already has an optimization running")
        try:
            try:
                goal = state.alignment.project_texts(
                    state.provider.embed_text(text)[None])[0]
                best = best_viewpoint(state.policy, state.envs[mode], goal,
                                      restarts=config.rl.restarts,
                                      start=session.viewpoint, seed=config.rl.seed)
            except VolnavError as exc:
                # failed prompts leave an error entry, never a partial viewpoint
                session.history.append({"prompt": text, "error": str(exc)})
                raise ApiError(502, "upstream-failure", str(exc)) from exc
            trajectory = [
                {"viewpoint": _viewpoint_json(vp), "reward": r,
                 "frame": state.render_frame(vp)}
                for vp, r in best.trajectory
            ]
            session.viewpoint = best.viewpoint
            session.goal_text = text
            session.goal = goal
            session.reward_mode = mode
            session.history.append({
                "prompt": text,
                "viewpoint": _viewpoint_json(best.viewpoint),
                "reward": best.reward,
                "reward_mode": mode,
            })
            return {
                "viewpoint": _viewpoint_json(best.viewpoint),
                "reward": best.reward,
                "frame": state.render_frame(best.viewpoint),
                "trajectory": trajectory,
            }
        finally:
            session.lock.release()

    @app.post("/sessions/{session_id}/camera")
    def manual_camera(session_id: str, payload: dict):
        state.require_loaded()
        session = state.session(session_id)
        if not session.lock.acquire(blocking=False):
            raise ApiError(409, "busy", "session already has an optimization running")
        try:
            if "viewpoint" in payload:
                vp = _viewpoint_from_json(payload["viewpoint"])
            elif "action" in payload:
                action = payload["action"]
                if not isinstance(action, list) or len(action) != 5:
                    raise ApiError(400, "bad-action", "'action' must be 5 numbers")
                radius = state.volume.bounding_radius
                delta = np.asarray([float(x) for x in action], dtype=float)
                delta = np.clip(delta, -1.0, 1.0)
                delta[4] *= camera.ACTION_DEPTH_FACTOR * radius
                try:
                    vp = camera.apply_action(
                        session.viewpoint, delta,
                        d_min=config.camera.d_min_factor * radius,
                        d_max=config.camera.d_max_factor * radius,
                    )
                except VolnavError as exc:
                    raise ApiError(400, "invalid-action", str(exc)) from exc
            else:
                raise ApiError(400, "bad-request",
                               "payload needs 'action' or 'viewpoint'")
            session.viewpoint = vp
            reward = None
            if session.goal is not None:
                env = state.envs[session.reward_mode]
                reward = env.reward_of(vp, session.goal)
            return {
                "viewpoint": _viewpoint_json(vp),
                "reward": reward,
                "frame": state.render_frame(vp),
            }
        finally:
            session.lock.release()

    @app.get("/sessions/{session_id}/history")
    def history(session_id: str):
        session = state.session(session_id)
        return {"history": session.history}

    return app


def serve(config: ProjectConfig, listen: str | None = None) -> None:
    """Bind the service and load dataset artifacts off the request path."""
    import uvicorn

    state = NavigatorState(config)
    app = create_app(state)

    def load_quietly():
        try:
            state.load()
        except Exception:
            pass  # /health keeps reporting "starting" with the stored detail

    thread = threading.Thread(target=load_quietly, daemon=True)
    thread.start()
    host, _, port = (listen or config.service.listen).rpartition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
