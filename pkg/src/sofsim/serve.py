"""Newline-delimited streaming predictor.

Input lines carry one observation each, either as a JSON object
``{"t": 12.4, "id": 3, "x": 1.0, "y": 2.5}`` or as ``t id x y``. Observations
whose timestamps lie within 50 ms of the first one of the current frame
belong to that frame; a later timestamp, an empty line or end of input closes
it. Whenever a closed frame leaves at least one agent present in each of the
last 8 frames, those agents are predicted and one JSON line per agent and
sample is written::

    {"type": "prediction", "t": 12.4, "id": 3, "sample": 0, "points": [[x, y], ...]}

Malformed input produces ``{"type": "error", ...}`` and the stream continues.
Ingestion never waits for inference: the two run in separate threads and
share a single-slot buffer in which a newer frame replaces an unprocessed one.
"""
from __future__ import annotations

import json
import logging
import math
import socketserver
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, TextIO

import numpy as np

from .data import FRAME_DT, OBS_LEN, _context_velocities, observation_features
from .geometry import AngleBinPartition
from .predictors import Predictor, SceneContext
from .sfm import SfmParams

log = logging.getLogger(__name__)

FRAME_WINDOW = 0.05
STALE_AFTER = 5.0


class RecordError(ValueError):
    pass


@dataclass(frozen=True)
class Observation:
    t: float
    agent: int
    x: float
    y: float


def parse_observation(line: str) -> Observation:
    text = line.strip()
    try:
        if text.startswith("{"):
            obj = json.loads(text)
            t, agent, x, y = obj["t"], obj["id"], obj["x"], obj["y"]
        else:
            fields = text.split()
            if len(fields) != 4:
                raise RecordError(f"expected 4 fields 't id x y', got {len(fields)}")
            t, agent, x, y = fields
        values = float(t), float(x), float(y)
        agent_f = float(agent)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise RecordError(f"malformed observation: {exc}") from None
    if not all(math.isfinite(v) for v in values) or not agent_f.is_integer():
        raise RecordError("observation values must be finite and the id an integer")
    return Observation(values[0], int(agent_f), values[1], values[2])


@dataclass
class Frame:
    t: float
    positions: dict = field(default_factory=dict)


class FrameAssembler:
    """Groups observations into frames by timestamp proximity."""

    def __init__(self, window: float = FRAME_WINDOW):
        self.window = window
        self.current: Frame | None = None

    def feed(self, obs: Observation) -> Frame | None:
        """Add ``obs``; returns the previous frame if this observation closed it."""
        closed = None
        if self.current is not None and obs.t < self.current.t - self.window:
            raise RecordError(f"timestamp {obs.t} precedes the current frame at {self.current.t}")
        if self.current is not None and obs.t - self.current.t > self.window:
            closed = self.current
            self.current = None
        if self.current is None:
            self.current = Frame(obs.t)
        self.current.positions[obs.agent] = (obs.x, obs.y)
        return closed

    def flush(self) -> Frame | None:
        closed, self.current = self.current, None
        return closed


@dataclass
class Job:
    t: float
    closed_at: float
    ped_ids: list
    x_obs: np.ndarray
    context_ids: list
    context_pos: list


class AgentBuffers:
    """The last 8 frames, with agents unseen for ``timeout`` seconds evicted."""

    def __init__(self, timeout: float = STALE_AFTER):
        self.timeout = timeout
        self.frames: deque = deque(maxlen=OBS_LEN)
        self.last_seen: dict[int, float] = {}

    def push(self, frame: Frame) -> Job | None:
        closed_at = time.perf_counter()
        for agent in frame.positions:
            self.last_seen[agent] = frame.t
        stale = {a for a, seen in self.last_seen.items() if frame.t - seen > self.timeout}
        for agent in stale:
            del self.last_seen[agent]
            for old in self.frames:
                old.positions.pop(agent, None)
        self.frames.append(frame)
        if len(self.frames) < OBS_LEN:
            return None
        ready = set(frame.positions)
        for old in self.frames:
            ready &= old.positions.keys()
        if not ready:
            return None
        ids = sorted(ready)
        x_obs = np.array([[f.positions[a] for f in self.frames] for a in ids], dtype=float)
        context_ids = [sorted(f.positions) for f in self.frames]
        context_pos = [[f.positions[a] for a in cid] for f, cid in zip(self.frames, context_ids)]
        return Job(frame.t, closed_at, ids, x_obs, context_ids, context_pos)


class NewestSlot:
    """Single-item hand-off where a new item replaces one not yet taken."""

    def __init__(self):
        self._item = None
        self._closed = False
        self._cond = threading.Condition()
        self.dropped = 0

    def put(self, item) -> None:
        with self._cond:
            if self._item is not None:
                self.dropped += 1
            self._item = item
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify()

    def take(self):
        """Next item, or None once closed and drained."""
        with self._cond:
            while self._item is None and not self._closed:
                self._cond.wait()
            item, self._item = self._item, None
            return item


class PredictionServer:
    def __init__(self, predictor: Predictor, obstacles=(), params: SfmParams | None = None,
                 timeout: float = STALE_AFTER, frame_window: float = FRAME_WINDOW, m_bins: int = 4):
        self.predictor = predictor
        self.obstacles = tuple(obstacles)
        self.params = params or SfmParams()
        self.partition = AngleBinPartition(m_bins)
        self.timeout = timeout
        self.frame_window = frame_window
        self.latencies: list[float] = []
        self.dropped = 0

    def _predict(self, job: Job) -> list[dict]:
        feats = observation_features(job.ped_ids, job.x_obs, job.context_ids, job.context_pos,
                                     self.obstacles, self.params, self.partition)
        vel = _context_velocities([np.asarray(c) for c in job.context_ids],
                                  [np.asarray(p, dtype=float).reshape(-1, 2) for p in job.context_pos], FRAME_DT)[-1]
        ctx = SceneContext(np.asarray(job.context_ids[-1]), np.asarray(job.context_pos[-1], dtype=float),
                           vel, self.obstacles)
        pred = self.predictor(feats, [ctx])
        points = pred.absolute()
        return [
            {"type": "prediction", "t": job.t, "id": int(agent), "sample": j, "points": points[i, j].tolist()}
            for i, agent in enumerate(pred.ped_ids)
            for j in range(pred.k)
        ]

    def serve(self, lines: Iterable[str], out: TextIO) -> None:
        """Process ``lines`` until exhausted, then finish the newest pending frame."""
        lock = threading.Lock()

        def emit(records):
            with lock:
                try:
                    for rec in records:
                        out.write(json.dumps(rec) + "\n")
                    out.flush()
                except (BrokenPipeError, ConnectionError):
                    log.warning("output closed; dropping %d records", len(records))

        slot = NewestSlot()

        def inference():
            while (job := slot.take()) is not None:
                try:
                    records = self._predict(job)
                except Exception as exc:  # a failed frame must not stop the stream
                    log.exception("prediction failed at t=%s", job.t)
                    records = [{"type": "error", "t": job.t, "message": f"prediction failed: {exc}"}]
                emit(records)
                latency = time.perf_counter() - job.closed_at
                self.latencies.append(latency)
                log.info("frame t=%.3f: %d agents, latency %.1f ms", job.t, len(job.ped_ids), 1e3 * latency)

        worker = threading.Thread(target=inference, name="inference", daemon=True)
        worker.start()
        assembler = FrameAssembler(self.frame_window)
        buffers = AgentBuffers(self.timeout)

        def close(frame):
            if frame is not None:
                job = buffers.push(frame)
                if job is not None:
                    slot.put(job)

        try:
            for lineno, line in enumerate(lines, start=1):
                if not line.strip():
                    close(assembler.flush())
                    continue
                try:
                    obs = parse_observation(line)
                    close(assembler.feed(obs))
                except RecordError as exc:
                    emit([{"type": "error", "line": lineno, "message": str(exc)}])
            close(assembler.flush())
        finally:
            slot.close()
            worker.join()
            self.dropped = slot.dropped


def serve_tcp(server: PredictionServer, host: str = "127.0.0.1", port: int = 0,
              ready: threading.Event | None = None, bound: list | None = None) -> None:
    """Serve one connection at a time on ``host:port`` until interrupted."""

    class Handler(socketserver.StreamRequestHandler):
        def handle(self):
            lines = (raw.decode("utf-8", errors="replace") for raw in self.rfile)
            writer = _SocketWriter(self.wfile)
            server.serve(lines, writer)

    with socketserver.TCPServer((host, port), Handler) as tcp:
        if bound is not None:
            bound.append(tcp.server_address)
        if ready is not None:
            ready.set()
        log.info("listening on %s:%d", *tcp.server_address[:2])
        tcp.serve_forever()


class _SocketWriter:
    def __init__(self, wfile):
        self.wfile = wfile

    def write(self, text: str) -> None:
        self.wfile.write(text.encode("utf-8"))

    def flush(self) -> None:
        self.wfile.flush()
