"""The problem tree: node hierarchy, cross-branch references, notifications.

The tree has a fixed top layout (Problem with Hardware, Trajectory, and Map
branches) under which processors grow the estimation problem: sensors and
processors under Hardware, frames/captures/features/factors under
Trajectory, landmarks under Map.  Parent/child links are bidirectional, and
two kinds of cross-branch references knit the tree into a factor graph:
captures point at the sensor that produced them, factors point at every
node whose state blocks appear in their residual.

Structural changes are queued as notifications so a solver can mirror the
set of live state blocks and factors without walking the tree.  A window
manager bounds the number of active frames by fixing or removing the oldest
ones.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import factors as factors_mod
from .errors import (
    ConflictError,
    ContractError,
    CrossRefError,
    NotFoundError,
    StructureError,
)
from .manifold import Pose2, StateBlock

PROBLEM = "Problem"
HARDWARE = "Hardware"
TRAJECTORY = "Trajectory"
MAP = "Map"
SENSOR = "Sensor"
PROCESSOR = "Processor"
FRAME = "Frame"
CAPTURE = "Capture"
FEATURE = "Feature"
FACTOR = "Factor"
LANDMARK = "Landmark"

_BRANCH_ROOTS = (PROBLEM, HARDWARE, TRAJECTORY, MAP)

_LEGAL_PARENT = {
    SENSOR: HARDWARE,
    PROCESSOR: HARDWARE,
    FRAME: TRAJECTORY,
    CAPTURE: FRAME,
    FEATURE: CAPTURE,
    FACTOR: FEATURE,
    LANDMARK: MAP,
}

_TIMESTAMPED = (FRAME, CAPTURE)

CAPTURE_SENSOR = "capture_sensor"
FACTOR_CONSTRAINS = "factor_constrains"

ADD_BLOCK = "add_block"
REMOVE_BLOCK = "remove_block"
ADD_FACTOR = "add_factor"
REMOVE_FACTOR = "remove_factor"

FIX_OLDEST = "fix_oldest"
REMOVE_WITH_PRIOR = "remove_with_prior"


@dataclass(frozen=True)
class NodeId:
    kind: str
    index: int

    def __post_init__(self):
        # hashed on every tree lookup; cache it
        object.__setattr__(self, "_hash", hash((self.kind, self.index)))

    def __hash__(self):
        return self._hash

    def __str__(self):
        return f"{self.kind}#{self.index}"


@dataclass(frozen=True)
class CrossRef:
    src: NodeId
    dst: NodeId
    role: str


@dataclass(frozen=True)
class Notification:
    action: str
    target: object  # (NodeId, block name) for blocks, NodeId for factors


@dataclass
class WindowPolicy:
    """Sliding-window policy over trajectory frames.

    ``fix_oldest`` freezes frames beyond the newest n as constants;
    ``remove_with_prior`` removes them and pins the oldest survivor with a
    unary prior at its current estimate.  ``n_frames`` must stay above the
    number of frames a processor may lag behind the newest keyframe, or the
    removal variant can pull a pre-integration origin out from under it.
    """

    variant: str
    n_frames: int
    default_sigma_p: float = 1.0
    default_sigma_o: float = 1.0

    def __post_init__(self):
        if self.variant not in (FIX_OLDEST, REMOVE_WITH_PRIOR):
            raise ContractError(f"unknown window variant {self.variant!r}")
        if self.n_frames < 2:
            raise ContractError("window needs n_frames >= 2")


@dataclass
class TreeNode:
    id: NodeId
    parent: Optional[NodeId]
    children: list = field(default_factory=list)
    state_blocks: dict = field(default_factory=dict)
    timestamp: Optional[float] = None
    payload: object = None
    cross_refs: list = field(default_factory=list)


class ProblemTree:
    """Mutable problem tree with notification queue and consistency checks."""

    def __init__(self):
        self._nodes: dict[NodeId, TreeNode] = {}
        self._next_index = 0
        self._notifications: list[Notification] = []
        self._incoming: dict[NodeId, set] = {}
        # held by a solving context around (a) sync + value reads and
        # (b) write-back; mutations happen from a single processing context
        self.lock = threading.RLock()
        self.problem_id = self._new_node(PROBLEM, None)
        self.hardware_id = self._new_node(HARDWARE, self.problem_id)
        self.trajectory_id = self._new_node(TRAJECTORY, self.problem_id)
        self.map_id = self._new_node(MAP, self.problem_id)

    # ------------------------------------------------------------------
    # construction

    def _new_node(self, kind, parent_id, **kw) -> NodeId:
        node_id = NodeId(kind, self._next_index)
        self._next_index += 1
        node = TreeNode(id=node_id, parent=parent_id, **kw)
        self._nodes[node_id] = node
        if parent_id is not None:
            self._nodes[parent_id].children.append(node_id)
        return node_id

    def emplace(self, kind, parent, timestamp=None, payload=None,
                state_blocks=None, cross_refs=None) -> NodeId:
        """Create a node under ``parent`` and queue its notifications.

        ``state_blocks`` maps names to StateBlock; ``cross_refs`` is a list
        of (role, target id) pairs.  Factor nodes whose payload carries a
        ``constrained`` list get their references derived from it when none
        are given.
        """
        if parent not in self._nodes:
            raise NotFoundError(f"unknown parent {parent}")
        expected = _LEGAL_PARENT.get(kind)
        if expected is None or self._nodes[parent].id.kind != expected:
            raise StructureError(f"{kind} cannot be emplaced under {parent}")
        if kind in _TIMESTAMPED and timestamp is None:
            raise StructureError(f"{kind} requires a timestamp")

        if kind == FACTOR and cross_refs is None and hasattr(payload, "constrained"):
            seen, cross_refs = set(), []
            for node_id, _name in payload.constrained:
                if node_id not in seen:
                    seen.add(node_id)
                    cross_refs.append((FACTOR_CONSTRAINS, node_id))

        refs = []
        for role, target in cross_refs or []:
            if target not in self._nodes:
                raise CrossRefError(f"cross-reference target {target} does not exist")
            if role == CAPTURE_SENSOR:
                if kind != CAPTURE or target.kind != SENSOR:
                    raise CrossRefError("capture_sensor must link a Capture to a Sensor")
            elif role == FACTOR_CONSTRAINS:
                if kind != FACTOR:
                    raise CrossRefError("factor_constrains must start at a Factor")
                if not self._nodes[target].state_blocks:
                    raise CrossRefError(f"factor references block-less node {target}")
            else:
                raise CrossRefError(f"unknown cross-reference role {role!r}")
            refs.append(target)

        node_id = self._new_node(
            kind, parent,
            timestamp=timestamp,
            payload=payload,
            state_blocks=dict(state_blocks or {}),
        )
        node = self._nodes[node_id]
        for role, target in cross_refs or []:
            node.cross_refs.append(CrossRef(node_id, target, role))
            self._incoming.setdefault(target, set()).add(node_id)

        for name in node.state_blocks:
            self._notifications.append(Notification(ADD_BLOCK, (node_id, name)))
        if kind == FACTOR:
            self._notifications.append(Notification(ADD_FACTOR, node_id))
        return node_id

    def add_block_to_frame(self, frame: NodeId, name: str, block: StateBlock):
        """Attach a state block to an existing frame (dynamic block growth)."""
        node = self.node(frame)
        if node.id.kind != FRAME:
            raise StructureError(f"{frame} is not a Frame")
        if name in node.state_blocks:
            raise ConflictError(f"frame {frame} already has a block named {name!r}")
        node.state_blocks[name] = block
        self._notifications.append(Notification(ADD_BLOCK, (frame, name)))

    # ------------------------------------------------------------------
    # access

    def node(self, node_id: NodeId) -> TreeNode:
        try:
            return self._nodes[node_id]
        except KeyError:
            raise NotFoundError(f"unknown node {node_id}") from None

    def __contains__(self, node_id: NodeId) -> bool:
        return node_id in self._nodes

    def children(self, node_id: NodeId, kind=None) -> list:
        out = self.node(node_id).children
        if kind is None:
            return list(out)
        return [c for c in out if c.kind == kind]

    def frames(self) -> list:
        return self.children(self.trajectory_id, FRAME)

    def sensors(self) -> list:
        return self.children(self.hardware_id, SENSOR)

    def block(self, node_id: NodeId, name: str) -> StateBlock:
        node = self.node(node_id)
        try:
            return node.state_blocks[name]
        except KeyError:
            raise NotFoundError(f"{node_id} has no block named {name!r}") from None

    def frame_pose(self, frame: NodeId) -> Pose2:
        node = self.node(frame)
        return Pose2(node.state_blocks["p"].values.copy(),
                     float(node.state_blocks["o"].values[0]))

    def set_frame_pose(self, frame: NodeId, pose: Pose2):
        node = self.node(frame)
        node.state_blocks["p"].values = pose.p.copy()
        node.state_blocks["o"].values = np.array([pose.theta])

    def find_frame_near(self, t: float, tol: float):
        """Frame whose timestamp is nearest t within tol, or None."""
        best, best_gap = None, tol
        for fid in self.frames():
            gap = abs(self._nodes[fid].timestamp - t)
            if gap <= best_gap:
                best, best_gap = fid, gap
        return best

    def state_at(self, t: Optional[float] = None) -> dict:
        """Block values of the frame with the largest timestamp <= t.

        With t omitted the last frame wins.  Values are copies.
        """
        frames = self.frames()
        if not frames:
            raise NotFoundError("tree has no frames")
        if t is None:
            chosen = max(frames, key=lambda f: self._nodes[f].timestamp)
        else:
            eligible = [f for f in frames if self._nodes[f].timestamp <= t]
            if not eligible:
                raise NotFoundError(f"no frame at or before t={t}")
            chosen = max(eligible, key=lambda f: self._nodes[f].timestamp)
        return {name: b.values.copy() for name, b in self._nodes[chosen].state_blocks.items()}

    def factors_referencing(self, node_id: NodeId) -> list:
        """Live factor nodes with a constraining reference into node_id."""
        return [src for src in self._incoming.get(node_id, ())
                if src.kind == FACTOR and src in self._nodes]

    # ------------------------------------------------------------------
    # removal

    def _subtree(self, node_id: NodeId) -> list:
        out = [node_id]
        for child in self._nodes[node_id].children:
            out.extend(self._subtree(child))
        return out

    def remove(self, node_id: NodeId):
        """Remove a node, its subtree, and any factor left dangling by it.

        Branch roots are protected.  Factors elsewhere in the tree that
        cross-reference a removed node go too, as do captures referencing a
        removed sensor, so no reference can dangle.
        """
        node = self.node(node_id)
        if node.id.kind in _BRANCH_ROOTS:
            raise StructureError(f"cannot remove branch root {node_id}")

        doomed = set(self._subtree(node_id))
        while True:
            extra = set()
            for target in doomed:
                for src in self._incoming.get(target, ()):
                    if src in doomed or src not in self._nodes:
                        continue
                    extra.update(self._subtree(src))
            if extra <= doomed:
                break
            doomed |= extra

        # deterministic order: by node index
        for nid in sorted(doomed, key=lambda n: n.index):
            victim = self._nodes[nid]
            if nid.kind == FACTOR:
                self._notifications.append(Notification(REMOVE_FACTOR, nid))
            for name in victim.state_blocks:
                self._notifications.append(Notification(REMOVE_BLOCK, (nid, name)))

        for nid in doomed:
            victim = self._nodes[nid]
            for ref in victim.cross_refs:
                peers = self._incoming.get(ref.dst)
                if peers is not None:
                    peers.discard(nid)
            parent = victim.parent
            if parent is not None and parent in self._nodes and parent not in doomed:
                self._nodes[parent].children.remove(nid)
            del self._nodes[nid]
            self._incoming.pop(nid, None)

    # ------------------------------------------------------------------
    # notifications

    def drain_notifications(self) -> list:
        """Pending notifications in order; an add cancelled by a later
        remove of the same target drops out entirely."""
        out = []
        for n in self._notifications:
            if n.action in (REMOVE_BLOCK, REMOVE_FACTOR):
                paired = ADD_BLOCK if n.action == REMOVE_BLOCK else ADD_FACTOR
                for i in range(len(out) - 1, -1, -1):
                    if out[i].action == paired and out[i].target == n.target:
                        del out[i]
                        break
                else:
                    out.append(n)
            else:
                out.append(n)
        self._notifications = []
        return out

    # ------------------------------------------------------------------
    # consistency

    def check_consistency(self) -> list:
        """Structural violations as strings; empty means healthy."""
        violations = []
        seen_children = set()
        for nid, node in self._nodes.items():
            if node.parent is not None:
                parent = self._nodes.get(node.parent)
                if parent is None:
                    violations.append(f"{nid} has unknown parent {node.parent}")
                elif nid not in parent.children:
                    violations.append(f"{nid} not listed by its parent {node.parent}")
            for child in node.children:
                if child in seen_children:
                    violations.append(f"{child} appears under two parents")
                seen_children.add(child)
                child_node = self._nodes.get(child)
                if child_node is None:
                    violations.append(f"{nid} lists unknown child {child}")
                elif child_node.parent != nid:
                    violations.append(f"{child} does not point back to {nid}")
            if nid.kind == CAPTURE:
                refs = [r for r in node.cross_refs if r.role == CAPTURE_SENSOR]
                if not refs:
                    violations.append(f"{nid} has no sensor reference")
                for r in refs:
                    if r.dst not in self._nodes:
                        violations.append(f"{nid} references removed sensor {r.dst}")
            if nid.kind == FACTOR:
                for r in node.cross_refs:
                    dst = self._nodes.get(r.dst)
                    if dst is None:
                        violations.append(f"{nid} references removed node {r.dst}")
                    elif not dst.state_blocks:
                        violations.append(f"{nid} references block-less node {r.dst}")
                if hasattr(node.payload, "constrained"):
                    for target, name in node.payload.constrained:
                        owner = self._nodes.get(target)
                        if owner is None or name not in owner.state_blocks:
                            violations.append(f"{nid} constrains missing block {target}.{name}")
        return violations

    # ------------------------------------------------------------------
    # window manager

    def enforce_window(self, policy: WindowPolicy):
        """Apply the sliding-window policy; call after each new keyframe."""
        frames = self.frames()
        if len(frames) <= policy.n_frames:
            return
        stale = frames[: len(frames) - policy.n_frames]
        if policy.variant == FIX_OLDEST:
            for fid in stale:
                for block in self._nodes[fid].state_blocks.values():
                    block.fixed = True
            return

        inherited_sqrt_info = None
        for fid in stale:
            for factor_id in self.factors_referencing(fid):
                payload = self._nodes[factor_id].payload
                if getattr(payload, "kind", None) == factors_mod.PRIOR_POSE:
                    inherited_sqrt_info = payload.sqrt_info.copy()
        for fid in stale:
            self.remove(fid)

        survivor = self.frames()[0]
        for factor_id in self.factors_referencing(survivor):
            if getattr(self._nodes[factor_id].payload, "kind", None) == factors_mod.PRIOR_POSE:
                return  # already pinned
        if inherited_sqrt_info is None:
            s_p, s_o = policy.default_sigma_p, policy.default_sigma_o
            inherited_sqrt_info = np.diag([1.0 / s_p, 1.0 / s_p, 1.0 / s_o])
        sensors = self.sensors()
        if not sensors:
            raise StructureError("window prior needs at least one sensor for its capture")
        pose = self.frame_pose(survivor)
        t = self._nodes[survivor].timestamp
        capture = self.emplace(CAPTURE, survivor, timestamp=t,
                               cross_refs=[(CAPTURE_SENSOR, sensors[0])])
        feature = self.emplace(FEATURE, capture, payload=None)
        prior = factors_mod.Factor(
            kind=factors_mod.PRIOR_POSE,
            z=pose.as_array(),
            sqrt_info=inherited_sqrt_info,
            constrained=[(survivor, "p"), (survivor, "o")],
        )
        self.emplace(FACTOR, feature, payload=prior)

    # ------------------------------------------------------------------
    # diagnostics

    def print_tree(self) -> str:
        """Deterministic indented listing of the whole tree."""
        lines = []
        self._print_node(self.problem_id, 0, lines)
        return "\n".join(lines) + "\n"

    def _print_node(self, node_id: NodeId, depth: int, lines: list):
        node = self._nodes[node_id]
        parts = [f"{'  ' * depth}{node_id}"]
        label = getattr(node.payload, "tree_label", None)
        if callable(label):
            label = label()
        if label:
            parts.append(str(label))
        elif isinstance(node.payload, factors_mod.Factor):
            parts.append(f"[{node.payload.kind}]")
        if node.timestamp is not None:
            parts.append(f"t={node.timestamp:.6f}")
        if node.state_blocks:
            blocks = ", ".join(
                name + ("(fixed)" if b.fixed else "")
                for name, b in node.state_blocks.items()
            )
            parts.append(f"blk: {blocks}")
        refs = []
        for ref in node.cross_refs:
            refs.append(str(ref.dst))
        if isinstance(node.payload, factors_mod.Factor):
            refs = [f"{nid}.{name}" for nid, name in node.payload.constrained]
        if refs:
            parts.append("-> " + ", ".join(refs))
        lines.append(" ".join(parts))
        for child in node.children:
            self._print_node(child, depth + 1, lines)
