"""Worker pools the coordinator dispatches to, and the remote worker client.

A pool accepts trials through `submit` and hands back `Completion` events
through `next_event`.  The coordinator is the only caller, so pools never
touch loop state.
"""

from __future__ import annotations

import heapq
import logging
import os
import queue
import socket
import threading
import time
import uuid
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional

from . import protocol
from .evaluators import EvaluatorHandle, Observation, observe

log = logging.getLogger(__name__)


class PoolError(RuntimeError):
    pass


@dataclass(frozen=True)
class Completion:
    trial_id: int
    observation: Optional[Observation]
    reason: str = ""
    worker_id: str = ""

    @property
    def failed(self) -> bool:
        return self.observation is None


def _evaluate(handle, candidate, seed, replicates):
    try:
        return observe(handle, candidate, replicates, seed), ""
    except Exception as exc:  # a crashing evaluation is a failed trial
        return None, f"{type(exc).__name__}: {exc}"


class InlinePool:
    """Evaluates in-process on a simulated clock.

    Each trial occupies one of `n_workers` slots for ``duration(trial_id,
    seed)`` time units (default 1.0) and completions are returned in order
    of simulated finish time, ties by trial id.  With one worker this is
    plain sequential evaluation; with several it reproduces asynchronous
    arrival orders deterministically.  ``fail(trial_id, candidate)`` may
    return a reason string to inject a failure.
    """

    def __init__(self, n_workers: int = 1, duration: Callable | None = None, fail: Callable | None = None):
        if n_workers < 1:
            raise PoolError("worker pool is empty")
        self.n_workers = n_workers
        self.duration = duration or (lambda trial_id, seed: 1.0)
        self.fail = fail
        self.clock = 0.0
        self._heap = []

    def start(self):
        return self

    def slots(self) -> int:
        return self.n_workers - len(self._heap)

    def submit(self, trial_id, candidate, seed, handle, replicates=1):
        if self.slots() <= 0:
            raise PoolError("no idle worker")
        reason = self.fail(trial_id, candidate) if self.fail else None
        if reason:
            obs = None
        else:
            obs, reason = _evaluate(handle, candidate, seed, replicates)
        done = self.clock + float(self.duration(trial_id, seed))
        heapq.heappush(self._heap, (done, trial_id, Completion(trial_id, obs, reason, "inline")))

    def next_event(self, timeout=None) -> Completion:
        if not self._heap:
            raise PoolError("no trial in flight")
        done, _, event = heapq.heappop(self._heap)
        self.clock = max(self.clock, done)
        return event

    def close(self):
        self._heap.clear()


class ThreadPool:
    """Evaluates on local threads; completions arrive in real finish order."""

    def __init__(self, n_workers: int = 1):
        if n_workers < 1:
            raise PoolError("worker pool is empty")
        self.n_workers = n_workers
        self._exec = None
        self._events = queue.Queue()
        self._busy = 0

    def start(self):
        if self._exec is None:
            self._exec = ThreadPoolExecutor(max_workers=self.n_workers)
        return self

    def slots(self) -> int:
        return self.n_workers - self._busy

    def submit(self, trial_id, candidate, seed, handle, replicates=1):
        self._busy += 1

        def job():
            obs, reason = _evaluate(handle, candidate, seed, replicates)
            self._events.put(Completion(trial_id, obs, reason, threading.current_thread().name))

        self._exec.submit(job)

    def next_event(self, timeout=None) -> Completion:
        event = self._events.get(timeout=timeout)
        self._busy -= 1
        return event

    def close(self):
        if self._exec is not None:
            self._exec.shutdown(wait=True)
            self._exec = None


# ---------------------------------------------------------------------------
# sockets


def _send(sock, kind, **fields):
    sock.sendall(protocol.encode(kind, **fields))


class _Conn:
    def __init__(self, sock, addr):
        self.sock = sock
        self.addr = addr
        self.worker_id = None
        self.trial_id = None
        self.last_seen = time.monotonic()
        self.lock = threading.Lock()

    def send(self, kind, **fields):
        with self.lock:
            _send(self.sock, kind, **fields)


class SocketPool:
    """Coordinator side of the wire protocol.

    Workers connect, announce themselves with HELLO and are then handed
    DISPATCH messages one trial at a time.  A worker that disconnects or
    stays silent for `heartbeat_timeout` seconds while busy has its trial
    reported as failed.
    """

    def __init__(self, host="127.0.0.1", port=0, heartbeat_timeout=60.0, wait_for_workers=30.0):
        self.host = host
        self.port = port
        self.heartbeat_timeout = heartbeat_timeout
        self.wait_for_workers = wait_for_workers
        self._inbox = queue.Queue()
        self._conns: dict[str, _Conn] = {}
        self._idle: list[str] = []
        self._parked = deque()
        self._server = None
        self._stop = threading.Event()
        self._threads = []

    @property
    def address(self):
        return self._server.getsockname()[:2]

    def start(self):
        if self._server is not None:
            return self
        srv = socket.create_server((self.host, self.port), reuse_port=False)
        srv.settimeout(0.2)
        self._server = srv
        t = threading.Thread(target=self._accept_loop, name="neibo-accept", daemon=True)
        t.start()
        self._threads.append(t)
        return self

    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                sock, addr = self._server.accept()
            except (socket.timeout, OSError):
                continue
            conn = _Conn(sock, addr)
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)

    def _read_loop(self, conn: _Conn):
        buf = conn.sock.makefile("rb")
        try:
            for line in buf:
                try:
                    msg = protocol.decode(line)
                except protocol.ProtocolError as exc:
                    log.warning("dropping malformed message from %s: %s", conn.addr, exc)
                    continue
                self._inbox.put((conn, msg))
        except OSError:
            pass
        finally:
            self._inbox.put((conn, None))

    def _register(self, conn, msg):
        wid = str(msg["worker_id"])
        if wid in self._conns:
            wid = f"{wid}-{uuid.uuid4().hex[:6]}"
        conn.worker_id = wid
        self._conns[wid] = conn
        self._idle.append(wid)
        log.info("worker %s joined from %s", wid, conn.addr)

    def _drain(self, timeout):
        """Process one inbox message; return a Completion if it produced one."""
        try:
            conn, msg = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return None
        conn.last_seen = time.monotonic()
        if msg is None:
            return self._drop(conn, "worker disconnected")
        if msg.type == "HELLO":
            self._register(conn, msg)
        elif msg.type in ("RESULT", "FAIL"):
            tid = int(msg["trial_id"])
            if conn.trial_id != tid:
                log.warning("ignoring result for trial %s from %s", tid, conn.worker_id)
                return None
            conn.trial_id = None
            self._idle.append(conn.worker_id)
            if msg.type == "FAIL":
                return Completion(tid, None, str(msg["reason"]), conn.worker_id)
            try:
                obs = Observation(float(msg["y"]), float(msg["y_var"]), float(msg["c"]), float(msg["c_var"]))
            except ValueError as exc:
                return Completion(tid, None, f"invalid result: {exc}", conn.worker_id)
            return Completion(tid, obs, "", conn.worker_id)
        return None

    def _drop(self, conn, reason):
        wid = conn.worker_id
        if wid is None or wid not in self._conns:
            return None
        del self._conns[wid]
        if wid in self._idle:
            self._idle.remove(wid)
        try:
            conn.sock.close()
        except OSError:
            pass
        log.warning("worker %s dropped: %s", wid, reason)
        if conn.trial_id is not None:
            tid, conn.trial_id = conn.trial_id, None
            return Completion(tid, None, reason, wid)
        return None

    def _check_heartbeats(self):
        now = time.monotonic()
        for conn in list(self._conns.values()):
            if conn.trial_id is not None and now - conn.last_seen > self.heartbeat_timeout:
                event = self._drop(conn, "heartbeat timeout")
                if event is not None:
                    return event
        return None

    def wait_ready(self, min_workers: int = 1):
        deadline = time.monotonic() + self.wait_for_workers
        while len(self._conns) < min_workers:
            if time.monotonic() > deadline:
                raise PoolError("worker pool is empty")
            self._drain(0.1)
        return self

    def slots(self) -> int:
        if not self._conns:
            self.wait_ready()
        while not self._inbox.empty():
            event = self._drain(0)
            if event is not None:
                self._parked.append(event)
        return len(self._idle)

    def submit(self, trial_id, candidate, seed, handle: EvaluatorHandle, replicates=1):
        while not self._idle:
            self._drain(0.1)
        wid = self._idle.pop(0)
        conn = self._conns[wid]
        conn.trial_id = trial_id
        conn.last_seen = time.monotonic()
        spec = handle.to_dict()
        spec["replicates"] = replicates
        try:
            conn.send("DISPATCH", trial_id=trial_id, candidate=candidate, seed=seed, evaluator=spec)
        except OSError:
            self._inbox.put((conn, None))  # surfaces as a failed trial

    def next_event(self, timeout=None) -> Completion:
        deadline = None if timeout is None else time.monotonic() + timeout
        while not self._parked:
            event = self._drain(0.2) or self._check_heartbeats()
            if event is not None:
                return event
            if deadline is not None and time.monotonic() > deadline:
                raise queue.Empty
        return self._parked.popleft()

    def close(self):
        for conn in list(self._conns.values()):
            try:
                conn.send("SHUTDOWN")
                conn.sock.close()
            except OSError:
                pass
        self._conns.clear()
        self._stop.set()
        if self._server is not None:
            self._server.close()


def run_worker(host: str, port: int, worker_id: str | None = None, heartbeat_interval: float = 5.0,
               connect_timeout: float = 10.0) -> int:
    """Connect to a coordinator and evaluate dispatched trials until SHUTDOWN.

    Returns the number of trials evaluated.
    """
    worker_id = worker_id or f"{socket.gethostname()}-{os.getpid()}"
    sock = socket.create_connection((host, port), timeout=connect_timeout)
    sock.settimeout(None)
    lock = threading.Lock()

    def send(kind, **fields):
        with lock:
            _send(sock, kind, **fields)

    send("HELLO", worker_id=worker_id, capabilities=["observe"])
    done = 0
    busy = threading.Event()
    stop = threading.Event()

    def beat():
        while not stop.wait(heartbeat_interval):
            if busy.is_set():
                try:
                    send("HEARTBEAT", worker_id=worker_id)
                except OSError:
                    return

    threading.Thread(target=beat, daemon=True).start()
    try:
        for line in sock.makefile("rb"):
            try:
                msg = protocol.decode(line)
            except protocol.ProtocolError as exc:
                log.warning("dropping malformed message: %s", exc)
                continue
            if msg.type == "SHUTDOWN":
                break
            if msg.type != "DISPATCH":
                continue
            spec = dict(msg["evaluator"])
            replicates = int(spec.pop("replicates", 1))
            busy.set()
            obs, reason = _evaluate(
                EvaluatorHandle.from_dict(spec), msg["candidate"], int(msg["seed"]), replicates
            )
            busy.clear()
            if obs is None:
                send("FAIL", trial_id=msg["trial_id"], reason=reason)
            else:
                send("RESULT", trial_id=msg["trial_id"], **obs.to_dict())
            done += 1
    except OSError:
        pass
    finally:
        stop.set()
        sock.close()
    return done
