import json
import socket
import threading
import time
from dataclasses import replace

import numpy as np
import pytest

from neibo import gp, protocol
from neibo.acquisition import AcqConfig, maximize_nei
from neibo.evaluators import EvaluatorHandle, Observation, observe
from neibo.orchestrator import (
    Coordinator,
    DuplicateResultError,
    History,
    HistoryError,
    LoopState,
    OrchestratorError,
    RunConfig,
    TrialRecord,
    UnknownTrialError,
    best_feasible,
    best_feasible_trial,
    fit_models,
    handle_result,
    load_history,
    load_run_config,
    random_search,
    replay,
    run_loop,
    trial_seed,
)
from neibo.space import decode, sobol_points
from neibo.workers import InlinePool, PoolError, SocketPool, ThreadPool, run_worker

FAST = AcqConfig(fantasy_count=16, restarts=3, raw_samples=64)


def branin_cfg(tmp_path=None, **kw):
    base = dict(
        evaluator=EvaluatorHandle("branin", noise_sd=0.5),
        budget=12,
        n_init=5,
        acq=FAST,
        master_seed=3,
        max_in_flight=1,
        history_path=str(tmp_path / "h.jsonl") if tmp_path is not None else None,
    )
    base.update(kw)
    return RunConfig(**base)


def completed_set(history):
    return sorted(
        (t.trial_id, json.dumps(t.candidate, sort_keys=True), t.observation.y)
        for t in history if t.state == "completed"
    )


def rec(tid, y=None, c=-1.0, state=None):
    obs = None if y is None else Observation(y, 0.0, c, 0.0)
    return TrialRecord(tid, {"x1": 0.0, "x2": float(tid)}, state or ("completed" if obs else "failed"), tid,
                       observation=obs)


class CrashAfter:
    """Inline pool that raises after `n` completions, like a killed coordinator."""

    def __init__(self, n):
        self.inner = InlinePool(1)
        self.n = n

    def start(self):
        self.inner.start()
        return self

    def slots(self):
        return self.inner.slots()

    def submit(self, *a, **k):
        self.inner.submit(*a, **k)

    def next_event(self, timeout=None):
        if self.n == 0:
            raise KeyboardInterrupt
        self.n -= 1
        return self.inner.next_event()

    def close(self):
        self.inner.close()


class TestRunConfig:
    def test_invariants(self):
        with pytest.raises(ValueError):
            branin_cfg(budget=4, n_init=5)
        with pytest.raises(ValueError):
            branin_cfg(n_init=0)
        with pytest.raises(ValueError):
            branin_cfg(max_in_flight=0)

    def test_trial_seed_independent_of_order(self):
        assert trial_seed(1, 5) == trial_seed(1, 5)
        assert len({trial_seed(1, i) for i in range(100)}) == 100
        assert trial_seed(1, 5) != trial_seed(2, 5)

    def test_load_config(self, tmp_path):
        path = tmp_path / "run.conf"
        path.write_text(
            "[run]\nbudget = 20\nn_init = 6\nseed = 4\nmax_in_flight = 2\nhistory = out/h.jsonl\n\n"
            "[evaluator]\nkind = branin\nnoise_sd = 1.0\nexclude_minimum = 1\n\n"
            "[acquisition]\nfantasy_count = 32\n"
        )
        cfg = load_run_config(path, master_seed=9)
        assert (cfg.budget, cfg.n_init, cfg.master_seed, cfg.max_in_flight) == (20, 6, 9, 2)
        assert cfg.history_path == str(tmp_path / "out" / "h.jsonl")
        assert dict(cfg.evaluator.options) == {"exclude_minimum": "1"}
        assert cfg.acq.fantasy_count == 32


class TestHandleResult:
    def _state(self):
        st = LoopState()
        for i in range(3):
            st.history.append(TrialRecord(i, {"x1": 0.0, "x2": 0.0}, "dispatched", i))
            st.pending.add(i)
        return st

    def test_completion_shrinks_pending(self):
        st = self._state()
        handle_result(st, 1, Observation(1.0))
        assert st.pending == {0, 2}
        assert st.history[1].state == "completed"

    def test_failure(self):
        st = self._state()
        handle_result(st, 0, "worker crashed")
        t = st.history[0]
        assert t.state == "failed" and t.observation is None and t.reason == "worker crashed"

    def test_duplicate(self):
        st = self._state()
        handle_result(st, 0, Observation(1.0))
        with pytest.raises(DuplicateResultError):
            handle_result(st, 0, Observation(2.0))

    def test_unknown(self):
        st = self._state()
        with pytest.raises(UnknownTrialError):
            handle_result(st, 7, Observation(1.0))

    def test_failed_trials_not_fitted(self):
        st = self._state()
        handle_result(st, 0, Observation(1.0))
        handle_result(st, 1, "boom")
        handle_result(st, 2, Observation(0.5))
        st.history[2].candidate = {"x1": 1.0, "x2": 2.0}
        obj, con = fit_models(st.history, EvaluatorHandle("branin").space, seed=0)
        assert obj.n == 2


class TestBestFeasible:
    def test_none_when_all_infeasible(self):
        assert best_feasible([rec(0, 1.0, c=0.5), rec(1, 2.0, c=0.1)]) is None

    def test_tie_goes_to_lower_id(self):
        h = [rec(0, 0.1), rec(1, 2.0), rec(2, 2.0)]
        assert best_feasible_trial(h).trial_id == 1
        assert best_feasible_trial(list(reversed(h))).trial_id == 1

    def test_exhaustive_scan(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            h = []
            for i in range(12):
                r = rng.random()
                if r < 0.15:
                    h.append(rec(i))
                else:
                    h.append(rec(i, float(rng.integers(0, 5)), c=float(rng.normal())))
            feas = [t for t in h if t.state == "completed" and t.observation.c <= 0]
            got = best_feasible_trial(h)
            if not feas:
                assert got is None
                continue
            top = max(t.observation.y for t in feas)
            oracle = min(t.trial_id for t in feas if t.observation.y == top)
            assert got.trial_id == oracle
            cand, obs = best_feasible(h)
            assert cand == got.candidate and obs == got.observation

    def test_infeasible_global_max(self):
        h = [rec(0, 1.0), rec(1, 9.0, c=0.3), rec(2, 3.0)]
        assert best_feasible_trial(h).trial_id == 2


class TestHistory:
    def test_roundtrip(self, tmp_path):
        hist = run_loop(branin_cfg(tmp_path, budget=6, n_init=6))
        loaded = load_history(tmp_path / "h.jsonl")
        assert [t.to_dict() for t in loaded] == [t.to_dict() for t in hist]

    def test_torn_final_line_dropped(self, tmp_path):
        run_loop(branin_cfg(tmp_path, budget=6, n_init=6))
        p = tmp_path / "h.jsonl"
        text = p.read_text()
        p.write_text(text + '{"record": "trial", "trial_id": 6, "sta')
        assert len(load_history(p)) == 6

    def test_corrupt_middle_line(self, tmp_path):
        run_loop(branin_cfg(tmp_path, budget=6, n_init=6))
        p = tmp_path / "h.jsonl"
        lines = p.read_text().splitlines(keepends=True)
        lines[3] = "garbage\n"
        p.write_text("".join(lines))
        with pytest.raises(HistoryError):
            load_history(p)

    def test_gap_detected(self):
        with pytest.raises(HistoryError):
            replay([rec(0, 1.0).to_dict(), rec(2, 1.0).to_dict()])

    def test_refuses_overwrite(self, tmp_path):
        run_loop(branin_cfg(tmp_path, budget=6, n_init=6))
        with pytest.raises(HistoryError):
            run_loop(branin_cfg(tmp_path, budget=6, n_init=6))

    def test_refuses_other_config(self, tmp_path):
        run_loop(branin_cfg(tmp_path, budget=6, n_init=6))
        with pytest.raises(HistoryError):
            run_loop(branin_cfg(tmp_path, budget=6, n_init=6, master_seed=99), resume=True)

    def test_write_ahead(self, tmp_path):
        cfg = branin_cfg(tmp_path, budget=6, n_init=3)
        seen = []

        class Spy(InlinePool):
            def submit(self, trial_id, *a, **k):
                _, recs = History(cfg.history_path).read()
                seen.append(any(r["trial_id"] == trial_id and r["state"] == "dispatched" for r in recs))
                super().submit(trial_id, *a, **k)

        run_loop(cfg, pool=Spy(1))
        assert seen and all(seen)


class TestLoop:
    def test_pure_design(self):
        cfg = branin_cfg(budget=8, n_init=8)
        co = Coordinator(cfg)
        hist = co.run()
        assert co.fits == 0
        assert all(t.source == "design" for t in hist)
        design = sobol_points(2, 16, seed=cfg.master_seed)
        assert [t.candidate for t in hist] == [decode(u, cfg.space) for u in design[:8]]

    def test_reproducible(self):
        a = Coordinator(branin_cfg(), clock=lambda: 0.0).run()
        b = Coordinator(branin_cfg(), clock=lambda: 0.0).run()
        assert [json.dumps(t.to_dict(), sort_keys=True) for t in a] == [
            json.dumps(t.to_dict(), sort_keys=True) for t in b
        ]

    def test_matches_sequential_reference(self):
        cfg = branin_cfg()
        hist = run_loop(cfg)
        # plain sequential BO written out by hand
        space = cfg.space
        design = sobol_points(space.dim, max(2 * cfg.n_init, 8), seed=cfg.master_seed)
        trials = []
        for i in range(cfg.budget):
            seed = trial_seed(cfg.master_seed, i)
            if i < cfg.n_init:
                cand = decode(design[i], space)
            else:
                obj, con = fit_models(trials, space, seed)
                cand = maximize_nei(obj, con, space, (), replace(cfg.acq, seed=seed))[0]
            obs = observe(cfg.evaluator, cand, 1, seed)
            trials.append(TrialRecord(i, cand, "completed", seed, observation=obs))
        assert [t.candidate for t in hist] == [t.candidate for t in trials]
        assert [t.observation for t in hist] == [t.observation for t in trials]

    def test_models_fit_on_completed(self, tmp_path):
        cfg = branin_cfg(tmp_path)
        co = Coordinator(cfg)
        co.run()
        ref_hist = load_history(cfg.history_path)
        done = [t for t in ref_hist if t.state == "completed"]
        obj, _ = fit_models(done[:-1], cfg.space, co.state.fit_seed)
        Xq = np.random.default_rng(0).random((5, 2))
        a = gp.posterior(obj, Xq)
        b = gp.posterior(co.state.obj_model, Xq)
        np.testing.assert_allclose(a.mean, b.mean, atol=1e-10)
        np.testing.assert_allclose(a.covariance, b.covariance, atol=1e-10)

    def test_resume_after_crash(self, tmp_path):
        full = run_loop(branin_cfg(tmp_path / "a"))
        cfg = branin_cfg(tmp_path / "b")
        with pytest.raises(KeyboardInterrupt):
            run_loop(cfg, pool=CrashAfter(7))
        resumed = run_loop(cfg, resume=True)
        assert completed_set(resumed) == completed_set(full)

    @pytest.mark.parametrize("keep", [3, 9, 17, 22])
    def test_resume_from_truncated_history(self, tmp_path, keep):
        cfg_a = branin_cfg(tmp_path / "a")
        full = run_loop(cfg_a)
        cfg = branin_cfg(tmp_path / "b")
        (tmp_path / "b").mkdir()
        lines = open(cfg_a.history_path).read().splitlines(keepends=True)
        open(cfg.history_path, "w").write("".join(lines[:keep]))
        resumed = run_loop(cfg, resume=True)
        assert completed_set(resumed) == completed_set(full)

    def test_failures_do_not_consume_budget(self):
        cfg = branin_cfg(budget=10, n_init=4)
        pool = InlinePool(1, fail=lambda tid, cand: "OOM" if tid in (2, 6) else None)
        hist = run_loop(cfg, pool=pool)
        assert sum(t.state == "completed" for t in hist) == 10
        failed = [t for t in hist if t.state == "failed"]
        assert [t.trial_id for t in failed] == [2, 6]
        # a failed candidate is not retried
        assert hist[3].candidate != hist[2].candidate and hist[7].candidate != hist[6].candidate

    def test_all_failing_gives_up(self):
        cfg = branin_cfg(budget=4, n_init=2)
        with pytest.raises(OrchestratorError):
            run_loop(cfg, pool=InlinePool(1, fail=lambda tid, cand: "boom"))

    def test_crashing_evaluator(self):
        cfg = branin_cfg(budget=3, n_init=3,
                         evaluator=EvaluatorHandle("external_worker", options={"target": "tests.helpers:crashing_trainer"}))
        with pytest.raises(OrchestratorError):
            run_loop(cfg)

    def test_pending_bounded(self):
        cfg = branin_cfg(budget=14, n_init=4, max_in_flight=3)
        sizes = []

        class Spy(InlinePool):
            def submit(self, *a, **k):
                super().submit(*a, **k)
                sizes.append(len(self._heap))

        durations = lambda tid, seed: 1.0 + (seed % 7) / 3.0
        hist = run_loop(cfg, pool=Spy(3, duration=durations))
        assert max(sizes) <= 3
        assert sum(t.state == "completed" for t in hist) == 14
        assert any(t.source == "model" for t in hist)

    def test_async_deterministic_given_arrival_order(self):
        cfg = branin_cfg(budget=12, n_init=4, max_in_flight=3)
        dur = lambda tid, seed: 1.0 + (seed % 5) / 2.0
        a = run_loop(cfg, pool=InlinePool(3, duration=dur))
        b = run_loop(cfg, pool=InlinePool(3, duration=dur))
        assert [t.candidate for t in a] == [t.candidate for t in b]

    def test_threads(self):
        hist = run_loop(branin_cfg(budget=8, n_init=4, max_in_flight=2, workers="threads:2"))
        assert sum(t.state == "completed" for t in hist) == 8

    def test_random_search_budget(self):
        hist = random_search(branin_cfg())
        assert len(hist) == 12 and all(t.state == "completed" for t in hist)
        assert [t.seed for t in hist] == [trial_seed(3, i) for i in range(12)]


class TestProtocol:
    def test_roundtrip(self):
        line = protocol.encode("RESULT", trial_id=3, y=1.5, y_var=0.1, c=-0.2, c_var=0.0)
        msg = protocol.decode(line)
        assert msg.type == "RESULT" and msg["y"] == 1.5
        assert msg.protocol_version == protocol.PROTOCOL_VERSION
        assert line.endswith(b"\n") and line.count(b"\n") == 1

    def test_unknown_fields_ignored(self):
        body = {"type": "HEARTBEAT", "protocol_version": 7, "worker_id": "w", "gpu_temp": 61}
        msg = protocol.decode(json.dumps(body))
        assert msg.fields == {"worker_id": "w"}

    def test_errors(self):
        with pytest.raises(protocol.ProtocolError):
            protocol.decode("{not json")
        with pytest.raises(protocol.ProtocolError):
            protocol.decode(json.dumps({"type": "RESULT", "protocol_version": 1, "trial_id": 1}))
        with pytest.raises(protocol.ProtocolError):
            protocol.decode(json.dumps({"type": "DANCE", "protocol_version": 1}))
        with pytest.raises(protocol.ProtocolError):
            protocol.decode(json.dumps({"type": "SHUTDOWN"}))
        with pytest.raises(protocol.ProtocolError):
            protocol.encode("FAIL")

    def test_every_kind_encodes(self):
        samples = {
            "HELLO": dict(worker_id="w", capabilities=["observe"]),
            "DISPATCH": dict(trial_id=0, candidate={"x1": 0.0}, seed=1, evaluator={"kind": "branin"}),
            "RESULT": dict(trial_id=0, y=0.0, y_var=0.0, c=0.0, c_var=0.0),
            "FAIL": dict(trial_id=0, reason="x"),
            "HEARTBEAT": dict(worker_id="w"),
            "SHUTDOWN": dict(),
        }
        assert set(samples) == set(protocol.FIELDS)
        for kind, fields in samples.items():
            assert protocol.decode(protocol.encode(kind, **fields)).fields == fields


def _start_workers(pool, n, **kw):
    host, port = pool.address
    threads = []
    for i in range(n):
        t = threading.Thread(target=run_worker, args=(host, port), kwargs=dict(worker_id=f"w{i}", **kw), daemon=True)
        t.start()
        threads.append(t)
    return threads


class _SilentWorker:
    """Says HELLO, accepts work, then never answers."""

    def __init__(self, address, hang_up=False):
        self.sock = socket.create_connection(address)
        self.sock.sendall(protocol.encode("HELLO", worker_id="silent", capabilities=[]))
        self.hang_up = hang_up
        self.thread = threading.Thread(target=self._loop, daemon=True)
        self.thread.start()

    def _loop(self):
        try:
            for line in self.sock.makefile("rb"):
                if protocol.decode(line).type == "DISPATCH" and self.hang_up:
                    self.sock.close()
                    return
        except (OSError, ValueError):
            pass


class TestSocketPool:
    def test_run_over_sockets(self):
        cfg = branin_cfg(budget=8, n_init=4, max_in_flight=2)
        pool = SocketPool("127.0.0.1", 0, heartbeat_timeout=30).start()
        threads = _start_workers(pool, 2, heartbeat_interval=0.2)
        pool.wait_ready(2)
        hist = run_loop(cfg, pool=pool)
        assert sum(t.state == "completed" for t in hist) == 8
        assert {t.worker_id for t in hist} <= {"w0", "w1"}
        for t in threads:
            t.join(timeout=5)
            assert not t.is_alive()  # SHUTDOWN reached every worker

    def test_socket_results_match_inline(self):
        cfg = branin_cfg(budget=7, n_init=4)
        pool = SocketPool("127.0.0.1", 0).start()
        _start_workers(pool, 1)
        pool.wait_ready(1)
        remote = run_loop(cfg, pool=pool)
        local = run_loop(cfg)
        assert completed_set(remote) == completed_set(local)

    def test_heartbeat_timeout_fails_trial(self):
        cfg = branin_cfg(budget=4, n_init=4)
        pool = SocketPool("127.0.0.1", 0, heartbeat_timeout=0.5).start()
        _SilentWorker(pool.address)
        pool.wait_ready(1)
        _start_workers(pool, 1, heartbeat_interval=0.1)
        pool.wait_ready(2)
        hist = run_loop(cfg, pool=pool)
        assert sum(t.state == "completed" for t in hist) == 4
        failed = [t for t in hist if t.state == "failed"]
        assert len(failed) == 1 and failed[0].reason == "heartbeat timeout"

    def test_disconnect_fails_trial(self):
        cfg = branin_cfg(budget=4, n_init=4)
        pool = SocketPool("127.0.0.1", 0).start()
        _SilentWorker(pool.address, hang_up=True)
        pool.wait_ready(1)
        _start_workers(pool, 1)
        pool.wait_ready(2)
        hist = run_loop(cfg, pool=pool)
        assert sum(t.state == "completed" for t in hist) == 4
        assert [t.reason for t in hist if t.state == "failed"] == ["worker disconnected"]

    def test_empty_pool(self):
        pool = SocketPool("127.0.0.1", 0, wait_for_workers=0.3)
        with pytest.raises(PoolError):
            run_loop(branin_cfg(budget=2, n_init=2), pool=pool)

    def test_empty_inline_pool(self):
        with pytest.raises(PoolError):
            InlinePool(0)
        with pytest.raises(PoolError):
            ThreadPool(0)
