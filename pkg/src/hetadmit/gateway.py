"""HTTP gateway that fronts the dispatcher with real request concurrency.

Endpoints:

* ``POST /v1/embed``  admit, run on a worker backend, respond with the placement
* ``GET /v1/metrics`` monotonic counters and latency percentiles
* ``GET /healthz``    503 until the queue plan is resolved

Busy requests get 429 with a ``Retry-After`` hint.
"""

from __future__ import annotations

import asyncio
import contextlib
import itertools
import json
import logging
import math
import os
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

import numpy as np
from fastapi import FastAPI
from fastapi.responses import JSONResponse
from pydantic import BaseModel

from .calibration import estimate_max_concurrency
from .dispatch import DecisionRecord, DispatchDecisionLog, QueueSet, detect_and_plan
from .domain import DeviceKind, FleetConfig, Placement, Query, QueuePlan, Slo, load_config
from .errors import BindFailure, ConfigError
from .simulation import SimulatedDevice

logger = logging.getLogger(__name__)

LISTEN_ENV = "HETADMIT_LISTEN"
LOG_LEVEL_ENV = "HETADMIT_LOG_LEVEL"


class EmbedRequest(BaseModel):
    id: str | int | None = None
    text: str | None = None
    token_length: int | None = None


class EmbedResponse(BaseModel):
    id: str | int
    placement: Placement
    status: str
    latency_s: float | None = None


class WorkerBackend(Protocol):
    async def run(self, kind: DeviceKind, in_flight: int, request: EmbedRequest) -> float:
        """Process one admitted query; return its latency in seconds."""


class SimulatedBackend:
    """Sleeps for the device line's latency, scaled by ``time_scale`` of wall time."""

    def __init__(self, config: FleetConfig, seed: int, time_scale: float = 1.0):
        self.time_scale = time_scale
        seeds = np.random.SeedSequence(seed).spawn(2)
        self.devices: dict[DeviceKind, SimulatedDevice] = {}
        for s, kind in zip(seeds, (DeviceKind.ACCELERATOR, DeviceKind.CPU)):
            profile = config.fleet.primary(kind)
            if profile is not None:
                self.devices[kind] = SimulatedDevice(profile, s)
        self._lock = threading.Lock()

    async def run(self, kind: DeviceKind, in_flight: int, request: EmbedRequest) -> float:
        with self._lock:
            latency = self.devices[kind].batch_latency(in_flight)
        if self.time_scale > 0:
            await asyncio.sleep(latency * self.time_scale)
        return latency


class CommandBackend:
    """Runs an external command per query; ``HETADMIT_DEVICE`` tells it which device.

    The request text (or token length) is written to the command's stdin.
    Concurrency per device is capped at that device's ``worker_count``.
    """

    def __init__(self, command: list[str], config: FleetConfig):
        if not command:
            raise ConfigError("external backend needs a command")
        self.command = command
        self._slots = {
            kind: asyncio.Semaphore(config.fleet.primary(kind).worker_count)
            for kind in DeviceKind
            if config.fleet.primary(kind) is not None
        }

    async def run(self, kind: DeviceKind, in_flight: int, request: EmbedRequest) -> float:
        payload = request.text if request.text is not None else str(request.token_length or "")
        async with self._slots[kind]:
            start = time.perf_counter()
            proc = await asyncio.create_subprocess_exec(
                *self.command,
                stdin=asyncio.subprocess.PIPE,
                stdout=asyncio.subprocess.DEVNULL,
                env={**os.environ, "HETADMIT_DEVICE": kind.value},
            )
            await proc.communicate(payload.encode())
            if proc.returncode:
                raise RuntimeError(f"worker command exited with {proc.returncode}")
            return time.perf_counter() - start


@dataclass
class GatewayConfig:
    config_path: str | Path
    host: str = "127.0.0.1"
    port: int = 8080
    plan: QueuePlan | str = "auto"
    heterogeneous: bool = True
    metrics_flush_interval: float = 0.0
    metrics_path: str | Path | None = None
    seed: int | None = None
    backend: str = "simulated"
    command: list[str] = field(default_factory=list)
    time_scale: float = 1.0
    request_log: str | Path | None = None

    def __post_init__(self) -> None:
        listen = os.environ.get(LISTEN_ENV)
        if listen:
            host, _, port = listen.rpartition(":")
            if not host or not port.isdigit():
                raise ConfigError(f"{LISTEN_ENV} must look like host:port, got {listen!r}")
            self.host, self.port = host, int(port)


class GatewayMetrics:
    """Counters that only ever grow within one process."""

    def __init__(self, slo: Slo | None, window: int = 10_000):
        self.slo = slo
        self.accepted = 0
        self.rejected_busy = 0
        self.slo_violations = 0
        self.completed = 0
        self.max_observed: dict[str, int] = {}
        self._latencies: deque[float] = deque(maxlen=window)
        self._lock = threading.Lock()
        self._started = time.monotonic()

    def admitted(self, kind: DeviceKind, in_flight: int) -> None:
        with self._lock:
            self.accepted += 1
            self.max_observed[kind.value] = max(self.max_observed.get(kind.value, 0), in_flight)

    def busy(self) -> None:
        with self._lock:
            self.rejected_busy += 1

    def finished(self, latency: float) -> None:
        with self._lock:
            self.completed += 1
            self._latencies.append(latency)
            if self.slo is not None and latency > self.slo.max_latency:
                self.slo_violations += 1

    def snapshot(self) -> dict[str, Any]:
        with self._lock:
            lat = np.asarray(self._latencies, dtype=float)
            elapsed = time.monotonic() - self._started
            return {
                "accepted": self.accepted,
                "rejected_busy": self.rejected_busy,
                "submitted": self.accepted + self.rejected_busy,
                "slo_violations": self.slo_violations,
                "completed": self.completed,
                "max_observed_concurrency": dict(sorted(self.max_observed.items())),
                "latency_p50": float(np.percentile(lat, 50)) if lat.size else 0.0,
                "latency_p99": float(np.percentile(lat, 99)) if lat.size else 0.0,
                "latency_max": float(lat.max()) if lat.size else 0.0,
                "throughput": self.completed / elapsed if elapsed > 0 else 0.0,
            }


def resolve_plan(config: FleetConfig, requested: QueuePlan | str, heterogeneous: bool) -> QueuePlan:
    """Explicit plan, the one in the config file, or depths estimated from the latency lines."""
    if isinstance(requested, QueuePlan):
        return requested
    if requested != "auto":
        raise ConfigError(f"plan must be a QueuePlan or 'auto', got {requested!r}")
    if config.plan is not None:
        return config.plan
    if config.slo is None:
        raise ConfigError("an automatic plan needs an [slo] section")
    fleet = config.fleet
    acc = estimate_max_concurrency(fleet.accelerator.latency, config.slo) if fleet.accelerator else 0
    cpu = estimate_max_concurrency(fleet.cpu.latency, config.slo) if fleet.cpu else 0
    if fleet.accelerator is None:
        return QueuePlan(0, int(cpu), True)
    return QueuePlan(int(acc), int(cpu) if heterogeneous else 0, heterogeneous)


def _retry_after(queues: QueueSet, config: FleetConfig) -> int:
    """Seconds until the primary queue is expected to drain, at least 1."""
    kind = queues.primary.kind
    alpha = config.fleet.primary(kind).latency.alpha
    return max(1, math.ceil(alpha * queues.primary.current_length))


def create_app(gw: GatewayConfig, fleet_config: FleetConfig | None = None,
               backend: WorkerBackend | None = None) -> FastAPI:
    """Build the ASGI app; the plan is resolved during application startup."""
    config = fleet_config if fleet_config is not None else load_config(gw.config_path)
    seed = gw.seed if gw.seed is not None else config.seed
    if backend is None:
        if gw.backend == "simulated":
            if seed is None:
                raise ConfigError("simulation mode needs an explicit seed (--seed or 'seed' in the config)")
            backend = SimulatedBackend(config, seed, gw.time_scale)
        elif gw.backend == "command":
            backend = CommandBackend(gw.command, config)
        else:
            raise ConfigError(f"unknown backend {gw.backend!r}")

    log_fh = open(gw.request_log, "a") if gw.request_log else None
    log_lock = threading.Lock()

    def write_record(record: DecisionRecord) -> None:
        with log_lock:
            log_fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
            log_fh.flush()

    @contextlib.asynccontextmanager
    async def lifespan(app: FastAPI):
        plan = resolve_plan(config, gw.plan, gw.heterogeneous)
        decision_log = DispatchDecisionLog(keep=False, sink=write_record if log_fh else None)
        app.state.queues = detect_and_plan(config.fleet, plan, gw.heterogeneous, decision_log)
        app.state.plan = plan
        logger.info("queue plan resolved: %s", plan)
        flusher = None
        if gw.metrics_flush_interval > 0 and gw.metrics_path:
            flusher = asyncio.create_task(_flush_metrics(app, gw))
        try:
            yield
        finally:
            if flusher is not None:
                flusher.cancel()
            if log_fh is not None:
                log_fh.close()

    app = FastAPI(title="hetadmit gateway", lifespan=lifespan)
    app.state.queues = None
    app.state.plan = None
    app.state.metrics = GatewayMetrics(config.slo)
    app.state.backend = backend
    ids = itertools.count()

    @app.get("/healthz")
    async def healthz():
        if app.state.queues is None:
            return JSONResponse({"status": "starting"}, status_code=503)
        return {"status": "ok", "plan": app.state.plan.to_dict()}

    @app.get("/v1/metrics")
    async def metrics():
        out = app.state.metrics.snapshot()
        if app.state.queues is not None:
            out["queues"] = app.state.queues.snapshot()
        return out

    @app.post("/v1/embed", response_model=EmbedResponse, response_model_exclude_none=True)
    async def embed(req: EmbedRequest):
        queues: QueueSet | None = app.state.queues
        if queues is None:
            return JSONResponse({"status": "starting"}, status_code=503)
        qid = req.id if req.id is not None else next(ids)
        length = req.token_length or (len(req.text.split()) if req.text else 1)
        placement = queues.dispatch(Query(qid, max(length, 1), time.time()))
        m: GatewayMetrics = app.state.metrics
        if placement is Placement.BUSY:
            m.busy()
            return JSONResponse(
                {"id": qid, "placement": "busy", "status": "busy"},
                status_code=429,
                headers={"Retry-After": str(_retry_after(queues, config))},
            )
        kind = placement.kind
        in_flight = queues.queue(kind).current_length
        m.admitted(kind, in_flight)
        try:
            latency = await app.state.backend.run(kind, in_flight, req)
        finally:
            queues.release(placement)
        m.finished(latency)
        return EmbedResponse(id=qid, placement=placement, status="ok", latency_s=latency)

    return app


async def _flush_metrics(app: FastAPI, gw: GatewayConfig) -> None:
    path = Path(gw.metrics_path)
    while True:
        await asyncio.sleep(gw.metrics_flush_interval)
        path.write_text(json.dumps(app.state.metrics.snapshot(), sort_keys=True, indent=2))


def serve(gw: GatewayConfig) -> None:
    import uvicorn

    level = os.environ.get(LOG_LEVEL_ENV, "info").lower()
    logging.basicConfig(level=level.upper())
    # uvicorn exits instead of raising on bind errors, so probe first
    try:
        with socket.create_server((gw.host, gw.port)):
            pass
    except OSError as exc:
        raise BindFailure(f"cannot bind {gw.host}:{gw.port}: {exc}") from None
    uvicorn.run(create_app(gw), host=gw.host, port=gw.port, log_level=level)
