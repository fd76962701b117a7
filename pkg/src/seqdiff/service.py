"""Session-oriented HTTP service for interactive steered rollout.

JSON over HTTP; frames travel as nested numeric arrays plus a rendering hint
describing which columns are position and which encode heading, so thin
clients never decode tensors. All request/response bodies carry a schema
``version`` field.

Steps are synchronous: one window per request, well under a second at toy
scale. A per-session guard rejects concurrent steps with a retryable 409.
"""

from __future__ import annotations

import threading
import uuid
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from .datasets import NAV_ACTIONS
from .sampler import RolloutDriver, SamplerConfig, SteeringInput, interpolate
from .sampler import InterpolationConfig

SCHEMA_VERSION = 1


@dataclass
class ModelEntry:
    """One servable model: a denoiser plus its rollout plumbing."""

    model: object
    rollout_config: object
    schedule: object
    sampler: SamplerConfig
    frame_layout: dict
    window_codec: object = None
    plan_actions: object = None
    description: str = ""


class SteeringBody(BaseModel):
    version: int = SCHEMA_VERSION
    turn_angle_deg: float = Field(0.0, ge=-180.0, le=180.0)
    distance: float = 1.0
    action: str | None = None
    scheme_override: dict | None = None


class CreateSessionBody(BaseModel):
    version: int = SCHEMA_VERSION
    model_id: str
    seed: int = 0
    initial_history: list[list[float]] | None = None


class InterpolateBody(BaseModel):
    version: int = SCHEMA_VERSION
    factor: int = Field(ge=2)


class Session:
    def __init__(self, session_id: str, model_id: str, entry: ModelEntry,
                 driver: RolloutDriver, seed: int):
        self.id = session_id
        self.model_id = model_id
        self.entry = entry
        self.driver = driver
        self.seed = seed
        self.transcript: list[dict] = []
        self.interpolations: list[dict] = []
        self.lock = threading.Lock()

    def snapshot(self) -> dict:
        return {
            "version": SCHEMA_VERSION,
            "session_id": self.id,
            "model_id": self.model_id,
            "seed": self.seed,
            "frames": self.driver.frames.tolist(),
            "actions": self.driver.actions.tolist(),
            "num_windows": self.driver.window_index,
            "frames_per_window": self.entry.rollout_config.frames_per_window,
            "context_frames": self.entry.rollout_config.context_frames,
            "initial_frames": len(self.driver.frames)
            - self.driver.window_index * self.entry.rollout_config.frames_per_window,
            "frame_layout": self.entry.frame_layout,
            "scheme_log": list(self.driver.scheme_log),
            "transcript": list(self.transcript),
            "action_names": list(NAV_ACTIONS),
        }


def create_app(models: dict[str, ModelEntry]) -> FastAPI:
    app = FastAPI(title="seqdiff rollout service")
    sessions: dict[str, Session] = {}
    registry_lock = threading.Lock()

    def get_session(session_id: str) -> Session:
        session = sessions.get(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    @app.get("/models")
    def list_models():
        return {
            "version": SCHEMA_VERSION,
            "models": [
                {
                    "model_id": model_id,
                    "description": entry.description,
                    "frame_layout": entry.frame_layout,
                    "context_frames": entry.rollout_config.context_frames,
                    "frames_per_window": entry.rollout_config.frames_per_window,
                }
                for model_id, entry in models.items()
            ],
        }

    @app.post("/sessions")
    def create_session(body: CreateSessionBody):
        entry = models.get(body.model_id)
        if entry is None:
            raise HTTPException(status_code=404, detail=f"unknown model {body.model_id}")
        if body.initial_history is not None:
            initial = np.asarray(body.initial_history, dtype=np.float64)
        else:
            dim = len(entry.frame_layout.get("columns", [])) or 4
            initial = np.zeros((1, dim))
            if "heading" in entry.frame_layout:
                initial[0, entry.frame_layout["heading"][0]] = 1.0
        driver = RolloutDriver(
            initial,
            entry.rollout_config,
            entry.model,
            entry.sampler,
            entry.schedule,
            seed=body.seed,
            window_codec=entry.window_codec,
            plan_actions=entry.plan_actions,
        )
        session_id = uuid.uuid4().hex[:12]
        with registry_lock:
            sessions[session_id] = Session(session_id, body.model_id, entry, driver, body.seed)
        snap = sessions[session_id].snapshot()
        return {"version": SCHEMA_VERSION, "session_id": session_id,
                "initial_frames": snap["frames"], "frame_layout": entry.frame_layout}

    @app.post("/sessions/{session_id}/step")
    def step_session(session_id: str, body: SteeringBody):
        session = get_session(session_id)
        if not session.lock.acquire(blocking=False):
            raise HTTPException(
                status_code=409,
                detail={"status": "busy", "retryable": True,
                        "message": "a window is already in flight for this session"},
            )
        try:
            try:
                steering = SteeringInput(
                    turn_angle_deg=body.turn_angle_deg,
                    distance=body.distance,
                    action=body.action,
                    scheme_override=body.scheme_override,
                )
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            try:
                new_frames, applied = session.driver.step(steering)
            except ValueError as exc:
                raise HTTPException(status_code=422, detail=str(exc)) from exc
            session.transcript.append(
                {
                    "turn_angle_deg": body.turn_angle_deg,
                    "distance": body.distance,
                    "action": body.action,
                    "scheme_override": body.scheme_override,
                }
            )
            return {
                "version": SCHEMA_VERSION,
                "session_id": session_id,
                "new_frames": new_frames.tolist(),
                "applied_scheme": applied,
                "window_index": session.driver.window_index - 1,
                "total_frames": len(session.driver.frames),
            }
        finally:
            session.lock.release()

    @app.post("/sessions/{session_id}/interpolate")
    def interpolate_session(session_id: str, body: InterpolateBody):
        session = get_session(session_id)
        if not session.lock.acquire(blocking=False):
            raise HTTPException(
                status_code=409,
                detail={"status": "busy", "retryable": True,
                        "message": "a window is already in flight for this session"},
            )
        try:
            entry = session.entry
            dense = interpolate(
                session.driver.frames,
                InterpolationConfig(factor=body.factor),
                entry.model,
                entry.sampler,
                entry.schedule,
                seed=session.seed + 7919,
                window_codec=entry.window_codec,
            )
            session.interpolations.append({"factor": body.factor, "length": len(dense)})
            return {
                "version": SCHEMA_VERSION,
                "session_id": session_id,
                "factor": body.factor,
                "frames": dense.tolist(),
            }
        finally:
            session.lock.release()

    @app.get("/sessions/{session_id}")
    def session_state(session_id: str):
        return get_session(session_id).snapshot()

    return app
