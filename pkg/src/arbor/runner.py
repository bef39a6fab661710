"""Replay capture logs through the configured pipeline and score the result.

The runner is the file-level entry point: it builds the problem from a YAML
config, replays a JSONL capture log in time order, lets the window manager
and solver run after every keyframe, and writes the per-keyframe estimates
(plus final landmark and calibration estimates) to a JSONL file.  Frames
dropped by a sliding window keep their last solved estimate, so the output
always covers the whole trajectory.
"""

from __future__ import annotations

import json
import threading
import time
from pathlib import Path
from typing import Callable, Optional

from . import tree as T
from .config import Application, auto_setup, parse_config
from .errors import BindingError, OrderingError
from .metrics import MetricsReport, compute_ate, compute_calib_error
from .processors import LandmarkInfo
from .sim import TRUTH_CALIB, CaptureRecord, read_jsonl, write_jsonl
from .solver import SolverProblem, lm_solve, sync

ESTIMATE_SENSOR = "estimate"
ESTIMATE_LANDMARK = "estimate_landmark"
ESTIMATE_CALIB = "estimate_calib"


def _solve_once(problem: SolverProblem, tree, threaded: bool):
    if not threaded:
        sync(problem, tree)
        return lm_solve(problem, tree)
    box: dict = {}

    def work():
        try:
            sync(problem, tree)
            box["report"] = lm_solve(problem, tree)
        except BaseException as exc:  # propagated to the caller below
            box["error"] = exc

    worker = threading.Thread(target=work, name="solver")
    worker.start()
    worker.join()
    if "error" in box:
        raise box["error"]
    return box["report"]


def build_application(config_path) -> Application:
    """Config phase of a run: parse the YAML and auto-set-up the problem."""
    return auto_setup(parse_config(Path(config_path).read_text()))


def run(config_path, log_path, out_path=None, truth_path=None,
        metrics_path=None, print_tree: bool = False,
        threaded_solver: bool = False,
        on_keyframe: Optional[Callable] = None):
    """Replay a capture log; returns (estimate records, metrics or None).

    ``on_keyframe(tree, event, report)`` is called after each keyframe's
    window enforcement and solve, mainly for tests and instrumentation.
    """
    app = build_application(config_path)
    return replay(app, log_path, out_path=out_path, truth_path=truth_path,
                  metrics_path=metrics_path, print_tree=print_tree,
                  threaded_solver=threaded_solver, on_keyframe=on_keyframe)


def replay(app: Application, log_path, out_path=None, truth_path=None,
           metrics_path=None, print_tree: bool = False,
           threaded_solver: bool = False,
           on_keyframe: Optional[Callable] = None):
    """Data phase of a run: feed a capture log through a built application."""
    t_start = time.perf_counter()
    tree = app.tree
    problem = SolverProblem(app.solver_options)
    records = read_jsonl(log_path)

    sensor_names = set(app.sensors.keys())
    last_t = None
    for rec in records:
        if rec.sensor not in sensor_names:
            raise BindingError(f"log references unknown sensor {rec.sensor!r}")
        if last_t is not None and rec.t < last_t:
            raise OrderingError(f"log goes back in time at t={rec.t}")
        last_t = rec.t

    archive: dict = {app.first_frame: tree.frame_pose(app.first_frame)}
    frame_times = {app.first_frame: tree.node(app.first_frame).timestamp}
    last_report = None

    def refresh_archive():
        for fid in tree.frames():
            archive[fid] = tree.frame_pose(fid)
            frame_times[fid] = tree.node(fid).timestamp

    # records sharing a timestamp form one instant: all of them are
    # dispatched before window enforcement and solving, so a keyframe voted
    # on one sensor can still be joined by the others at the same tick
    i = 0
    while i < len(records):
        j = i
        while j < len(records) and records[j].t == records[i].t:
            j += 1
        events = []
        for rec in records[i:j]:
            events += app.pipeline.dispatch(rec.sensor, rec.t, rec.data)
        for event in events:
            if app.window_policy is not None:
                tree.enforce_window(app.window_policy)
            last_report = _solve_once(problem, tree, threaded_solver)
            refresh_archive()
            if on_keyframe is not None:
                on_keyframe(tree, event, last_report)
        i = j

    if print_tree:
        print(tree.print_tree(), end="")

    ordered = sorted(archive.items(), key=lambda kv: (frame_times[kv[0]], kv[0].index))
    estimates = [
        CaptureRecord(frame_times[fid], ESTIMATE_SENSOR,
                      [pose.p[0], pose.p[1], pose.theta])
        for fid, pose in ordered
    ]
    final_t = estimates[-1].t if estimates else 0.0
    out_records = list(estimates)
    for lm in tree.children(tree.map_id, T.LANDMARK):
        info = tree.node(lm).payload
        raw = info.raw_id if isinstance(info, LandmarkInfo) and info.raw_id is not None else -1
        p = tree.block(lm, "p").values
        out_records.append(CaptureRecord(final_t, ESTIMATE_LANDMARK,
                                         [raw, float(p[0]), float(p[1])]))
    calib_est = None
    for name, (sensor_id, info) in app.sensors.items():
        if info.type_name == "diff_drive":
            calib_est = tree.block(sensor_id, "intrinsic").values.copy()
            out_records.append(CaptureRecord(final_t, ESTIMATE_CALIB,
                                             [float(v) for v in calib_est]))
            break

    if out_path is not None:
        write_jsonl(out_records, out_path)

    metrics = None
    if truth_path is not None:
        truth = read_jsonl(truth_path)
        ate = compute_ate([(r.t, r.data[0], r.data[1]) for r in estimates], truth)
        calib_abs = calib_rel = None
        c_true = next((r.data for r in truth if r.sensor == TRUTH_CALIB), None)
        if c_true is not None and calib_est is not None:
            abs_err, rel_err = compute_calib_error(calib_est, c_true)
            calib_abs, calib_rel = abs_err.tolist(), rel_err.tolist()
        metrics = MetricsReport(
            ate_rmse=ate,
            calib_abs=calib_abs,
            calib_rel=calib_rel,
            final_cost=None if last_report is None else last_report.final_cost,
            keyframes=len(estimates),
            wall_time=time.perf_counter() - t_start,
        )
        if metrics_path is not None:
            Path(metrics_path).write_text(json.dumps(metrics.as_dict(), indent=2) + "\n")

    return out_records, metrics
