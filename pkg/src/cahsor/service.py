"""Live shared-control service.

One WebSocket session per connection, each with its own simulator. Three
cooperating tasks share the asyncio loop: the reader answers every command
with exactly one constrained frame, a 10 Hz control tick applies the latest
(possibly filtered) command to the simulator, and a 20 Hz telemetry task
broadcasts vehicle state. Commands arrive normalized to [-1, 1] and are
scaled to the physical bounds server-side; a 0.5 s silence decays the speed
command to zero.

Wire format: JSON text frames {"type", "seq", "payload"} with per-direction
strictly increasing seq. Types: state, command, constrained, config,
terrain, error. Unknown or malformed input yields an error frame and the
connection stays up.
"""

from __future__ import annotations

import asyncio
import json
import time
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, WebSocket, WebSocketDisconnect

from . import __version__
from .config import Config
from .kinodyn import KdModel
from .planner import ConstraintLimits, filter_human
from .sensing import ImageRing, extract_patch, patch_grid, psd, render_camera_image, synthesize_imu, OdometryDelta
from .terrain import Control, InstabilityMetrics, VehicleState, make_terrain_map, step


@dataclass
class LatestCommand:
    throttle: float = 0.0
    steer: float = 0.0
    seq: int = 0
    received: float = 0.0
    applied: Control = field(default_factory=lambda: Control(0.0, 0.0))


class TeleopSession:
    """State of one connection: its own simulator, history and model inputs."""

    def __init__(self, config: Config, model: KdModel | None, session_seed: int = 0):
        self.config = config
        self.model = model
        registry = config.terrain_registry()
        self.terrain = make_terrain_map(config.terrain_spec(), registry)
        self.camera = config.camera_model()
        self.sim = config.sim_config(seed=session_seed)
        self.limits = config.limits()
        self.cahsor_enabled = bool(config.service["cahsor_enabled"]) and model is not None
        ex, ey = self.terrain.extent
        self.state = VehicleState(x=ex * 0.25, y=ey * 0.5, yaw=0.0, v=0.0, t=0.0)
        self.ring = ImageRing(capacity=24)
        self.metrics_hist: list[InstabilityMetrics] = [InstabilityMetrics(0.0, 0.0, 0.0)] * 20
        self.speeds_hist: list[float] = [0.0] * 20
        self.last_metrics = InstabilityMetrics(0.0, 0.0, 0.0)
        self.last_predicted: list[float] | None = None
        self.rng = np.random.default_rng(np.random.SeedSequence([session_seed, 0x7E1E0]))
        self.command = LatestCommand()
        self.ring.push(render_camera_image(self.terrain, self.state, self.camera))

    # observation assembly -----------------------------------------------------
    def current_patch(self) -> np.ndarray:
        for image in reversed(self.ring.snapshot()):
            delta = OdometryDelta.from_poses(image.pose_at_capture, self.state)
            patch = extract_patch(image, delta)
            if patch.visible_fraction >= 0.6:
                return patch.pixels
        # standstill fallback: sample the footprint straight from the map
        gx, gy = patch_grid()
        c, s = np.cos(self.state.yaw), np.sin(self.state.yaw)
        wx = self.state.x + gx * c - gy * s
        wy = self.state.y + gx * s + gy * c
        return self.terrain.sample_texture(wx, wy).astype(np.float32)

    def current_psd(self) -> np.ndarray:
        window = synthesize_imu(
            self.metrics_hist[-20:],
            self.speeds_hist[-20:],
            self.rng,
            noise_floor=float(self.config.collect["noise_floor"]),
        )
        return psd(window).values

    def scale_command(self, throttle: float, steer: float) -> Control:
        return Control(
            v_cmd=float(np.clip(throttle, -1.0, 1.0)) * self.sim.v_max,
            steer=float(np.clip(steer, -1.0, 1.0)) * self.sim.steer_max,
        )

    def constrain(self, commanded: Control) -> dict:
        """Apply the shared-control filter to a scaled command."""
        if not self.cahsor_enabled or self.model is None:
            self.last_predicted = None
            return {
                "commanded": {"v_cmd": commanded.v_cmd, "steer": commanded.steer},
                "applied": {"v_cmd": commanded.v_cmd, "steer": commanded.steer},
                "pass_through": True,
                "flag": "bypass",
                "predicted": None,
            }
        res = filter_human(
            commanded,
            self.model,
            self.limits,
            patch=self.current_patch(),
            speed=self.state.v,
            psd=self.current_psd(),
            v_max=self.sim.v_max,
            steer_max=self.sim.steer_max,
            margin=float(self.config.planner["margin"]),
        )
        self.last_predicted = res.predicted.tolist()
        return {
            "commanded": {"v_cmd": commanded.v_cmd, "steer": commanded.steer},
            "applied": {"v_cmd": res.control.v_cmd, "steer": res.control.steer},
            "pass_through": res.pass_through,
            "flag": res.flag,
            "predicted": res.predicted.tolist(),
        }

    def tick(self) -> None:
        """One 10 Hz control step of the owned simulator."""
        timeout = float(self.config.service["command_timeout_s"])
        applied = self.command.applied
        if time.monotonic() - self.command.received > timeout:
            applied = Control(0.0, applied.steer)
        res = step(self.state, applied, self.terrain, self.sim, self.rng)
        self.state = res.state
        self.last_metrics = res.metrics
        self.metrics_hist.append(res.metrics)
        self.speeds_hist.append(self.state.v)
        del self.metrics_hist[0], self.speeds_hist[0]
        self.ring.push(render_camera_image(self.terrain, self.state, self.camera))

    def state_payload(self) -> dict:
        return {
            "t": round(self.state.t, 4),
            "x": self.state.x,
            "y": self.state.y,
            "yaw": self.state.yaw,
            "v": self.state.v,
            "metrics": {
                "sliding": self.last_metrics.sliding,
                "roll": self.last_metrics.roll,
                "bumpiness": self.last_metrics.bumpiness,
            },
            "predicted": self.last_predicted,
            "limits": {
                "sliding": self.limits.max_sliding,
                "roll": self.limits.max_roll,
                "bumpiness": self.limits.max_bumpiness,
            },
            "cahsor": self.cahsor_enabled,
            "applied": {"v_cmd": self.command.applied.v_cmd, "steer": self.command.applied.steer},
        }


def create_app(config: Config, models_dir=None, model: KdModel | None = None) -> FastAPI:
    """Service factory; a preloaded model may be injected for tests."""
    if model is None and models_dir is not None:
        model = KdModel.load_bundle(models_dir)
    if model is not None and not (
        model.mode.pretraining == "tron" and model.mode.modalities == frozenset({"V", "S", "I"})
    ):
        raise ValueError(f"teleop needs a tron-vsi bundle, got {model.mode.key}")
    app = FastAPI(title="cahsor-teleop", version=__version__)
    app.state.sessions = 0

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "name": "cahsor-teleop",
            "version": __version__,
            "config_hash": config.hash(),
            "cahsor_model": model.mode.key if model is not None else None,
        }

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        app.state.sessions += 1
        session = TeleopSession(config, model, session_seed=app.state.sessions)
        out_seq = 0

        async def send(msg_type: str, payload: dict) -> None:
            nonlocal out_seq
            out_seq += 1
            await ws.send_text(json.dumps({"type": msg_type, "seq": out_seq, "payload": payload}))

        await send("config", {
            "cahsor": session.cahsor_enabled,
            "v_max": session.sim.v_max,
            "steer_max": session.sim.steer_max,
            "control_hz": float(config.service["control_hz"]),
            "telemetry_hz": float(config.service["telemetry_hz"]),
        })
        await send("terrain", session.terrain.snapshot())

        last_client_seq = 0

        async def reader() -> None:
            nonlocal last_client_seq
            while True:
                raw = await ws.receive_text()
                try:
                    msg = json.loads(raw)
                except json.JSONDecodeError:
                    await send("error", {"message": "malformed JSON frame", "cause_seq": None})
                    continue
                msg_type = msg.get("type")
                seq = msg.get("seq")
                if not isinstance(seq, int) or seq <= last_client_seq:
                    await send("error", {"message": f"seq must increase (last {last_client_seq})", "cause_seq": seq})
                    continue
                last_client_seq = seq
                payload = msg.get("payload") or {}
                if msg_type == "command":
                    try:
                        throttle = float(payload["throttle"])
                        steer = float(payload["steer"])
                    except (KeyError, TypeError, ValueError):
                        await send("error", {"message": "command needs numeric throttle and steer", "cause_seq": seq})
                        continue
                    commanded = session.scale_command(throttle, steer)
                    result = session.constrain(commanded)
                    session.command = LatestCommand(
                        throttle=throttle,
                        steer=steer,
                        seq=seq,
                        received=time.monotonic(),
                        applied=Control(result["applied"]["v_cmd"], result["applied"]["steer"]),
                    )
                    await send("constrained", {"command_seq": seq, **result})
                elif msg_type == "config":
                    if "cahsor" in payload:
                        session.cahsor_enabled = bool(payload["cahsor"]) and model is not None
                    await send("config", {
                        "cahsor": session.cahsor_enabled,
                        "v_max": session.sim.v_max,
                        "steer_max": session.sim.steer_max,
                        "control_hz": float(config.service["control_hz"]),
                        "telemetry_hz": float(config.service["telemetry_hz"]),
                    })
                else:
                    await send("error", {"message": f"unknown message type {msg_type!r}", "cause_seq": seq})

        async def ticker() -> None:
            dt = 1.0 / float(config.service["control_hz"])
            while True:
                t0 = time.monotonic()
                session.tick()
                await asyncio.sleep(max(0.0, dt - (time.monotonic() - t0)))

        async def telemetry() -> None:
            dt = 1.0 / float(config.service["telemetry_hz"])
            while True:
                t0 = time.monotonic()
                await send("state", session.state_payload())
                await asyncio.sleep(max(0.0, dt - (time.monotonic() - t0)))

        tasks = [asyncio.create_task(c) for c in (reader(), ticker(), telemetry())]
        try:
            done, pending = await asyncio.wait(tasks, return_when=asyncio.FIRST_EXCEPTION)
            for task in done:
                exc = task.exception()
                if exc is not None and not isinstance(exc, WebSocketDisconnect):
                    raise exc
        except WebSocketDisconnect:
            pass
        finally:
            for task in tasks:
                task.cancel()
