"""YAML configuration: parameter server, creator registries, auto-setup.

A YAML file describing the whole setup (sensors, processors, solver, window
manager, initial state, optional map) is flattened into a parameter server
of dotted keys.  Factories registered per category turn server subtrees
into live objects, so a new sensor or processor type only needs a creator
registration.  ``auto_setup`` assembles the full problem: the hardware
branch, the first frame with its prior, the initial map, the processor
pipeline, and the solver options.

Keys the setup never reads are reported as warnings, not errors, so configs
stay forward compatible.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from . import tree as T
from .errors import (
    BindingError,
    ConfigError,
    ConfigParseError,
    ConflictError,
    UnknownTypeError,
)
from .factors import PRIOR_BLOCK, PRIOR_POSE, Factor
from .manifold import ANGLE, StateBlock
from .processors import (
    KeyframePolicy,
    LandmarkInfo,
    LandmarkTracker,
    LoopCloser,
    LoopPolicy,
    MotionProcessor,
    Pipeline,
    ProcessorInfo,
    SensorInfo,
)
from .solver import SolverOptions

_MISSING = object()


class ConfigWarning(UserWarning):
    pass


class _StrictLoader(yaml.SafeLoader):
    """SafeLoader that rejects duplicate mapping keys."""


def _strict_mapping(loader, node, deep=False):
    mapping = {}
    for key_node, value_node in node.value:
        key = loader.construct_object(key_node, deep=deep)
        if key in mapping:
            raise ConflictError(
                f"duplicate key {key!r} at line {key_node.start_mark.line + 1}"
            )
        mapping[key] = loader.construct_object(value_node, deep=deep)
    return mapping


_StrictLoader.add_constructor(
    yaml.resolver.BaseResolver.DEFAULT_MAPPING_TAG, _strict_mapping
)


def _flatten(prefix: str, value, out: dict):
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    elif isinstance(value, list) and value and any(isinstance(v, (dict, list)) for v in value):
        for i, v in enumerate(value):
            _flatten(f"{prefix}.{i}", v, out)
    else:
        out[prefix] = value


class ParameterServer:
    """Flat dotted-key view of a parsed configuration.

    Reads are tracked so auto-setup can warn about keys it never consumed.
    """

    def __init__(self, flat: dict):
        self._flat = dict(flat)
        self._consumed: set = set()

    def keys(self):
        return list(self._flat.keys())

    def as_dict(self) -> dict:
        return dict(self._flat)

    def has(self, key: str) -> bool:
        return key in self._flat

    def get(self, key: str, default=_MISSING):
        if key in self._flat:
            self._consumed.add(key)
            return self._flat[key]
        if default is _MISSING:
            return None
        return default

    def require(self, key: str):
        if key not in self._flat:
            raise ConfigError(f"missing mandatory config key: {key}")
        self._consumed.add(key)
        return self._flat[key]

    def count(self, prefix: str) -> int:
        """Number of contiguous list entries under a dotted prefix."""
        n = 0
        while any(k == f"{prefix}.{n}" or k.startswith(f"{prefix}.{n}.")
                  for k in self._flat):
            n += 1
        return n

    def unconsumed(self):
        return sorted(k for k in self._flat if k not in self._consumed)


def parse_config(text: str) -> ParameterServer:
    """Parse YAML text into a flat parameter server with typed scalars."""
    try:
        data = yaml.load(text, Loader=_StrictLoader)
    except ConflictError:
        raise
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        location = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigParseError(f"invalid YAML{location}: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigParseError("top level of the configuration must be a mapping")
    flat: dict = {}
    _flatten("", data, flat)
    return ParameterServer(flat)


class CreatorRegistry:
    """Per-category factories mapping type names to creator callables."""

    def __init__(self):
        self._creators: dict = {}

    def register(self, category: str, type_name: str, creator):
        key = (category, type_name)
        if key in self._creators:
            raise ConflictError(f"{category} creator {type_name!r} already registered")
        self._creators[key] = creator

    def names(self, category: str):
        return sorted(name for cat, name in self._creators if cat == category)

    def create(self, category: str, type_name: str, *args, **kwargs):
        key = (category, type_name)
        if key not in self._creators:
            raise UnknownTypeError(
                f"unknown {category} type {type_name!r}; registered: "
                f"{', '.join(self.names(category)) or '(none)'}"
            )
        return self._creators[key](*args, **kwargs)


# ----------------------------------------------------------------------
# built-in creators

def _pose_blocks_from(server, prefix, default_fixed=True):
    state = server.get(f"{prefix}.state", [0.0, 0.0, 0.0])
    fixed = bool(server.get(f"{prefix}.fixed", default_fixed))
    state = [float(v) for v in state]
    if len(state) != 3:
        raise ConfigError(f"{prefix}.state must be [x, y, theta]")
    blocks = {
        "ext_p": StateBlock(np.array(state[:2]), fixed=fixed),
        "ext_o": StateBlock(np.array([state[2]]), ANGLE, fixed=fixed),
    }
    sigma = server.get(f"{prefix}.sigma", None)
    if sigma is not None:
        if np.isscalar(sigma):
            sigma = (float(sigma), float(sigma))
        else:
            sigma = (float(sigma[0]), float(sigma[1]))
    return blocks, sigma


def _create_diff_drive(tree, server, prefix):
    name = server.require(f"{prefix}.name")
    blocks, ext_sigma = _pose_blocks_from(server, f"{prefix}.extrinsic")
    intrinsic = server.require(f"{prefix}.intrinsic.state")
    if len(intrinsic) != 3:
        raise ConfigError(f"{prefix}.intrinsic.state must be [r_left, r_right, separation]")
    blocks["intrinsic"] = StateBlock(
        np.array([float(v) for v in intrinsic]),
        fixed=bool(server.get(f"{prefix}.intrinsic.fixed", True)),
    )
    noise = {"tick_std": float(server.require(f"{prefix}.noise.tick_std"))}
    sigma = server.get(f"{prefix}.intrinsic.sigma", None)
    info = SensorInfo(name, "diff_drive", noise,
                      intrinsic_prior_sigma=None if sigma is None else float(sigma),
                      extrinsic_prior_sigma=ext_sigma)
    return tree.emplace(T.SENSOR, tree.hardware_id, payload=info, state_blocks=blocks), info


def _create_range_bearing(tree, server, prefix):
    name = server.require(f"{prefix}.name")
    blocks, ext_sigma = _pose_blocks_from(server, f"{prefix}.extrinsic")
    noise = {
        "range_std": float(server.require(f"{prefix}.noise.range_std")),
        "bearing_std": float(server.require(f"{prefix}.noise.bearing_std")),
    }
    info = SensorInfo(name, "range_bearing_2d", noise, extrinsic_prior_sigma=ext_sigma)
    return tree.emplace(T.SENSOR, tree.hardware_id, payload=info, state_blocks=blocks), info


def _bound_sensor(server, prefix, sensors):
    sensor_name = server.require(f"{prefix}.sensor")
    if sensor_name not in sensors:
        raise BindingError(
            f"{prefix}.sensor references unknown sensor {sensor_name!r}"
        )
    return sensor_name, sensors[sensor_name]


def _create_motion_processor(tree, server, prefix, sensors):
    name = server.require(f"{prefix}.name")
    sensor_name, (sensor_id, info) = _bound_sensor(server, prefix, sensors)
    policy = KeyframePolicy(
        max_dist=server.get(f"{prefix}.keyframe.max_dist", None),
        max_angle=server.get(f"{prefix}.keyframe.max_angle", None),
        max_time=server.get(f"{prefix}.keyframe.max_time", None),
    )
    proc = MotionProcessor(
        name, sensor_id, sensor_name, policy,
        time_tolerance=float(server.require(f"{prefix}.time_tolerance")),
        tick_std=info.noise["tick_std"],
    )
    proc.node_id = tree.emplace(T.PROCESSOR, tree.hardware_id,
                                payload=ProcessorInfo(name, "motion_diff_drive", sensor_id))
    return proc


def _create_tracker(tree, server, prefix, sensors):
    name = server.require(f"{prefix}.name")
    sensor_name, (sensor_id, info) = _bound_sensor(server, prefix, sensors)
    policy = KeyframePolicy(min_tracks=server.get(f"{prefix}.keyframe.min_tracks", None))
    max_unseen = server.get(f"{prefix}.assoc_max_unseen", None)
    proc = LandmarkTracker(
        name, sensor_id, sensor_name, policy,
        time_tolerance=float(server.require(f"{prefix}.time_tolerance")),
        range_std=info.noise["range_std"],
        bearing_std=info.noise["bearing_std"],
        gate=float(server.get(f"{prefix}.gate", 0.5)),
        association=server.get(f"{prefix}.association", "gate"),
        max_unseen_frames=None if max_unseen is None else int(max_unseen),
    )
    proc.node_id = tree.emplace(T.PROCESSOR, tree.hardware_id,
                                payload=ProcessorInfo(name, "tracker_landmark_2d", sensor_id))
    return proc


def _create_loop_closer(tree, server, prefix, sensors):
    name = server.require(f"{prefix}.name")
    sensor_name, (sensor_id, _info) = _bound_sensor(server, prefix, sensors)
    policy = LoopPolicy(
        radius=float(server.require(f"{prefix}.loop.radius")),
        min_frame_gap=int(server.require(f"{prefix}.loop.min_frame_gap")),
        min_shared_landmarks=int(server.require(f"{prefix}.loop.min_shared_landmarks")),
    )
    proc = LoopCloser(
        name, sensor_id, sensor_name, policy,
        sigma_p=float(server.get(f"{prefix}.loop.sigma_p", 0.05)),
        sigma_o=float(server.get(f"{prefix}.loop.sigma_o", 0.02)),
        time_tolerance=float(server.get(f"{prefix}.time_tolerance", 0.01)),
    )
    proc.node_id = tree.emplace(T.PROCESSOR, tree.hardware_id,
                                payload=ProcessorInfo(name, "loop_closure_2d", sensor_id))
    return proc


def _manager_fix_oldest(server, prefix):
    return T.WindowPolicy(T.FIX_OLDEST, int(server.require(f"{prefix}.n_frames")))


def _manager_remove_with_prior(server, prefix):
    return T.WindowPolicy(T.REMOVE_WITH_PRIOR, int(server.require(f"{prefix}.n_frames")))


def _manager_none(server, prefix):
    return None


def default_registry() -> CreatorRegistry:
    reg = CreatorRegistry()
    reg.register("sensor", "diff_drive", _create_diff_drive)
    reg.register("sensor", "range_bearing_2d", _create_range_bearing)
    reg.register("processor", "motion_diff_drive", _create_motion_processor)
    reg.register("processor", "tracker_landmark_2d", _create_tracker)
    reg.register("processor", "loop_closure_2d", _create_loop_closer)
    reg.register("tree_manager", "fix_oldest", _manager_fix_oldest)
    reg.register("tree_manager", "remove_with_prior", _manager_remove_with_prior)
    reg.register("tree_manager", "none", _manager_none)
    return reg


# ----------------------------------------------------------------------
# auto-setup

@dataclass
class Application:
    """Everything auto-setup produces, ready for the runner."""

    tree: T.ProblemTree
    pipeline: Pipeline
    processors: list
    sensors: dict          # name -> (NodeId, SensorInfo)
    solver_options: SolverOptions
    window_policy: Optional[T.WindowPolicy]
    first_frame: T.NodeId


def auto_setup(server: ParameterServer, registry: CreatorRegistry | None = None) -> Application:
    """Build the configured problem from a parameter server.

    Creates sensors and processor nodes under Hardware, the first frame with
    its pose prior under Trajectory, optional initial landmarks under Map,
    wires the processor pipeline, and returns the solver options and window
    policy.  The resulting tree always passes the consistency check.
    """
    registry = registry or default_registry()
    dimension = int(server.require("problem.dimension"))
    if dimension != 2:
        raise ConfigError(f"problem.dimension must be 2, got {dimension}")

    tree = T.ProblemTree()

    n_sensors = server.count("sensors")
    if n_sensors == 0:
        raise ConfigError("missing mandatory config key: sensors.0.type")
    sensors: dict = {}
    sensor_order = []
    for i in range(n_sensors):
        prefix = f"sensors.{i}"
        type_name = server.require(f"{prefix}.type")
        sensor_id, info = registry.create("sensor", type_name, tree, server, prefix)
        if info.name in sensors:
            raise ConfigError(f"duplicate sensor name {info.name!r}")
        sensors[info.name] = (sensor_id, info)
        sensor_order.append(sensor_id)

    n_procs = server.count("processors")
    if n_procs == 0:
        raise ConfigError("missing mandatory config key: processors.0.type")
    processors = []
    for i in range(n_procs):
        prefix = f"processors.{i}"
        type_name = server.require(f"{prefix}.type")
        processors.append(registry.create("processor", type_name,
                                          tree, server, prefix, sensors))

    manager_type = server.get("problem.tree_manager.type", "none")
    window_policy = registry.create("tree_manager", manager_type,
                                    server, "problem.tree_manager")

    options = SolverOptions(
        max_iterations=int(server.require("solver.max_iterations")),
        lambda_init=float(server.get("solver.lambda_init", 1e-4)),
        tol_dx=float(server.get("solver.tol_dx", 1e-10)),
        tol_grad=float(server.get("solver.tol_grad", 1e-12)),
    )

    p0 = [float(v) for v in server.require("problem.first_frame.p")]
    o0 = float(server.require("problem.first_frame.o"))
    sigma_p = float(server.require("problem.first_frame.sigma_p"))
    sigma_o = float(server.require("problem.first_frame.sigma_o"))
    first = tree.emplace(T.FRAME, tree.trajectory_id, timestamp=0.0, state_blocks={
        "p": StateBlock(np.array(p0)),
        "o": StateBlock(np.array([o0]), ANGLE),
    })
    capture = tree.emplace(T.CAPTURE, first, timestamp=0.0,
                           cross_refs=[(T.CAPTURE_SENSOR, sensor_order[0])])
    feature = tree.emplace(T.FEATURE, capture)
    prior = Factor(
        kind=PRIOR_POSE,
        z=np.array([p0[0], p0[1], o0]),
        sqrt_info=np.diag([1.0 / sigma_p, 1.0 / sigma_p, 1.0 / sigma_o]),
        constrained=[(first, "p"), (first, "o")],
    )
    tree.emplace(T.FACTOR, feature, payload=prior)

    for name, (sensor_id, info) in sensors.items():
        sigma = info.intrinsic_prior_sigma
        if sigma is not None and not tree.block(sensor_id, "intrinsic").fixed:
            block = tree.block(sensor_id, "intrinsic")
            feat = tree.emplace(T.FEATURE, capture)
            calib_prior = Factor(
                kind=PRIOR_BLOCK,
                z=block.values.copy(),
                sqrt_info=np.eye(block.tangent_dim) / sigma,
                constrained=[(sensor_id, "intrinsic")],
            )
            tree.emplace(T.FACTOR, feat, payload=calib_prior)
        ext_sigma = info.extrinsic_prior_sigma
        if ext_sigma is not None and not tree.block(sensor_id, "ext_p").fixed:
            ext_p = tree.block(sensor_id, "ext_p")
            ext_o = tree.block(sensor_id, "ext_o")
            s_p, s_o = ext_sigma
            feat = tree.emplace(T.FEATURE, capture)
            ext_prior = Factor(
                kind=PRIOR_POSE,
                z=np.array([ext_p.values[0], ext_p.values[1], ext_o.values[0]]),
                sqrt_info=np.diag([1.0 / s_p, 1.0 / s_p, 1.0 / s_o]),
                constrained=[(sensor_id, "ext_p"), (sensor_id, "ext_o")],
            )
            tree.emplace(T.FACTOR, feat, payload=ext_prior)

    n_landmarks = server.count("map.landmarks")
    for i in range(n_landmarks):
        prefix = f"map.landmarks.{i}"
        raw_id = server.get(f"{prefix}.id", None)
        p = [float(v) for v in server.require(f"{prefix}.p")]
        fixed = bool(server.get(f"{prefix}.fixed", False))
        lm = tree.emplace(T.LANDMARK, tree.map_id,
                          payload=LandmarkInfo(None if raw_id is None else int(raw_id)),
                          state_blocks={"p": StateBlock(np.array(p), fixed=fixed)})
        if raw_id is not None:
            for proc in processors:
                if isinstance(proc, LandmarkTracker):
                    proc._by_raw_id[int(raw_id)] = lm

    pipeline = Pipeline(tree, processors)
    pipeline.initialize(first)

    for key in server.unconsumed():
        warnings.warn(f"unknown config key ignored: {key}", ConfigWarning, stacklevel=2)

    violations = tree.check_consistency()
    if violations:
        raise ConfigError(f"auto-setup produced an inconsistent tree: {violations}")

    return Application(
        tree=tree,
        pipeline=pipeline,
        processors=processors,
        sensors=sensors,
        solver_options=options,
        window_policy=window_policy,
        first_frame=first,
    )
