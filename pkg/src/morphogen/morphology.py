"""Rooted-tree morphology model: limbs, joints, topology actions, paths, serde.

Graphs are value objects: action application copies, mutates the copy, and
revalidates. Child slots count up from 1 per parent and are never reused
after a deletion, so a limb's root path stays stable while unrelated parts
of the tree change.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .config import AttrRanges, MorphConfig


class MorphologyError(ValueError):
    pass


class ParseError(MorphologyError):
    pass


class TopoAction(IntEnum):
    ADD = 0
    DELETE = 1
    NO_CHANGE = 2


@dataclass
class LimbAttr:
    length: float
    radius: float


@dataclass
class JointAttr:
    rotation_range: float  # symmetric: limits are +-rotation_range/2
    max_torque: float


@dataclass
class Limb:
    id: int
    parent: int | None
    slot: int  # child_slot within the parent; root carries 0
    attr: LimbAttr
    joint: JointAttr | None  # None exactly for the root


def default_limb_attr(r: AttrRanges) -> LimbAttr:
    return LimbAttr(length=(r.length_min + r.length_max) / 2.0,
                    radius=(r.radius_min + r.radius_max) / 2.0)


def default_joint_attr(r: AttrRanges) -> JointAttr:
    return JointAttr(rotation_range=(r.rot_range_min + r.rot_range_max) / 2.0,
                     max_torque=(r.torque_min + r.torque_max) / 2.0)


class MorphologyGraph:
    def __init__(self, ranges: AttrRanges | None = None):
        self.ranges = ranges if ranges is not None else AttrRanges()
        root = Limb(id=0, parent=None, slot=0,
                    attr=default_limb_attr(self.ranges), joint=None)
        self.limbs: dict[int, Limb] = {0: root}
        self.root = 0
        self._next_id = 1
        self._next_slot: dict[int, int] = {0: 1}

    # -- structure queries ---------------------------------------------------

    def children(self, limb_id: int) -> list[int]:
        kids = [l.id for l in self.limbs.values() if l.parent == limb_id]
        kids.sort(key=lambda i: self.limbs[i].slot)
        return kids

    def _child_map(self) -> dict[int, list[int]]:
        kids: dict[int, list[int]] = {}
        for limb in self.limbs.values():
            if limb.parent is not None:
                kids.setdefault(limb.parent, []).append(limb.id)
        for lst in kids.values():
            lst.sort(key=lambda i: self.limbs[i].slot)
        return kids

    def preorder(self) -> list[int]:
        """Depth-first preorder, siblings by slot; root first."""
        kids = self._child_map()
        order = []
        stack = [self.root]
        while stack:
            i = stack.pop()
            order.append(i)
            stack.extend(reversed(kids.get(i, [])))
        return order

    def depth(self, limb_id: int) -> int:
        d = 0
        limb = self._get(limb_id)
        while limb.parent is not None:
            limb = self.limbs[limb.parent]
            d += 1
        return d

    def max_depth(self) -> int:
        return max(self.depth(i) for i in self.limbs)

    def n_limbs(self) -> int:
        return len(self.limbs)

    def is_leaf(self, limb_id: int) -> bool:
        return not any(l.parent == limb_id for l in self.limbs.values())

    def _get(self, limb_id: int) -> Limb:
        try:
            return self.limbs[limb_id]
        except KeyError:
            raise MorphologyError(f"unknown limb id {limb_id}") from None

    def copy(self) -> "MorphologyGraph":
        g = MorphologyGraph.__new__(MorphologyGraph)
        g.ranges = self.ranges  # ranges are read-only configuration
        g.root = self.root
        g._next_id = self._next_id
        g._next_slot = dict(self._next_slot)
        g.limbs = {
            i: Limb(id=l.id, parent=l.parent, slot=l.slot,
                    attr=LimbAttr(l.attr.length, l.attr.radius),
                    joint=None if l.joint is None else
                    JointAttr(l.joint.rotation_range, l.joint.max_torque))
            for i, l in self.limbs.items()}
        return g

    def add_child(self, parent_id: int, attr: LimbAttr | None = None,
                  joint: JointAttr | None = None) -> int:
        parent = self._get(parent_id)
        slot = self._next_slot.setdefault(parent.id, 1)
        self._next_slot[parent.id] = slot + 1
        new_id = self._next_id
        self._next_id += 1
        self.limbs[new_id] = Limb(
            id=new_id, parent=parent.id, slot=slot,
            attr=attr if attr is not None else default_limb_attr(self.ranges),
            joint=joint if joint is not None else default_joint_attr(self.ranges))
        self._next_slot.setdefault(new_id, 1)
        return new_id

    def structural_key(self):
        """Hashable identity over topology + attributes (ids, slots, attrs)."""
        items = []
        for i in sorted(self.limbs):
            l = self.limbs[i]
            j = (None if l.joint is None
                 else (l.joint.rotation_range, l.joint.max_torque))
            items.append((l.id, l.parent, l.slot, l.attr.length, l.attr.radius, j))
        return (self.root, tuple(items))

    def __eq__(self, other):
        return isinstance(other, MorphologyGraph) and self.structural_key() == other.structural_key()


def initial_design(name: str, ranges: AttrRanges | None = None) -> MorphologyGraph:
    """Seed morphologies: short chains the design policy grows from."""
    n_extra = {"type2_chain": 1, "type3_chain": 1, "type4_chain": 2}.get(name)
    if n_extra is None:
        raise MorphologyError(f"unknown initial design {name!r}")
    g = MorphologyGraph(ranges)
    tip = g.root
    for _ in range(n_extra):
        tip = g.add_child(tip)
    return g


# ---------------------------------------------------------------------------
# Topology paths
# ---------------------------------------------------------------------------

def topo_path(g: MorphologyGraph, limb_id: int) -> tuple[int, ...]:
    """Child-slot sequence from the root's child down to the limb; () for root."""
    slots = []
    limb = g._get(limb_id)
    while limb.parent is not None:
        slots.append(limb.slot)
        limb = g.limbs[limb.parent]
    return tuple(reversed(slots))


def all_paths(g: MorphologyGraph, order: list[int] | None = None) -> list[tuple[int, ...]]:
    order = order if order is not None else g.preorder()
    return [topo_path(g, i) for i in order]


# ---------------------------------------------------------------------------
# Action application
# ---------------------------------------------------------------------------

def apply_topo_actions(g: MorphologyGraph, actions, cfg: MorphConfig):
    """Apply one topology action per existing limb, preorder, demoting illegal ones.

    `actions` aligns with g.preorder(). Returns (new graph, demoted count).
    """
    order = g.preorder()
    if len(actions) != len(order):
        raise MorphologyError(f"expected {len(order)} actions, got {len(actions)}")
    out = g.copy()
    demoted = 0
    # incremental child counts and depths keep each action O(1)
    n_kids = {i: 0 for i in out.limbs}
    depth = {}
    for i in order:
        limb = out.limbs[i]
        if limb.parent is not None:
            n_kids[limb.parent] += 1
            depth[i] = depth[limb.parent] + 1
        else:
            depth[i] = 0
    for limb_id, act in zip(order, (TopoAction(int(a)) for a in actions)):
        if act == TopoAction.NO_CHANGE:
            continue
        if act == TopoAction.DELETE:
            limb = out.limbs.get(limb_id)
            if limb is None or limb.parent is None or n_kids[limb_id] != 0:
                demoted += 1
                continue
            del out.limbs[limb_id]
            n_kids[limb.parent] -= 1
        else:  # ADD
            cap = cfg.root_child_cap if limb_id == out.root else cfg.child_cap
            if (len(out.limbs) >= cfg.max_limbs
                    or n_kids[limb_id] >= cap
                    or depth[limb_id] + 1 > cfg.max_depth):
                demoted += 1
                continue
            new_id = out.add_child(limb_id)
            n_kids[limb_id] += 1
            n_kids[new_id] = 0
            depth[new_id] = depth[limb_id] + 1
    validate(out, cfg)
    return out, demoted


def _affine(raw: float, lo: float, hi: float) -> float:
    return float(np.clip(lo + (raw + 1.0) * 0.5 * (hi - lo), lo, hi))


def apply_attr_actions(g: MorphologyGraph, raw) -> MorphologyGraph:
    """Map per-limb raw [-1,1]^4 vectors onto attribute ranges; topology unchanged.

    Vector layout: [length, radius, rotation_range, max_torque], preorder rows.
    Root joint entries are ignored. Out-of-band raws clamp to the range edge.
    """
    raw = np.asarray(raw, dtype=np.float64)
    order = g.preorder()
    if raw.shape != (len(order), 4):
        raise MorphologyError(f"expected raw shape {(len(order), 4)}, got {raw.shape}")
    out = g.copy()
    r = out.ranges
    for row, limb_id in enumerate(order):
        limb = out.limbs[limb_id]
        limb.attr.length = _affine(raw[row, 0], r.length_min, r.length_max)
        limb.attr.radius = _affine(raw[row, 1], r.radius_min, r.radius_max)
        if limb.joint is not None:
            limb.joint.rotation_range = _affine(raw[row, 2], r.rot_range_min, r.rot_range_max)
            limb.joint.max_torque = _affine(raw[row, 3], r.torque_min, r.torque_max)
    return out


def attrs_to_raw(g: MorphologyGraph) -> np.ndarray:
    """Inverse of apply_attr_actions for in-range attributes (preorder rows)."""
    r = g.ranges

    def inv(x, lo, hi):
        return 2.0 * (x - lo) / (hi - lo) - 1.0

    rows = []
    for limb_id in g.preorder():
        limb = g.limbs[limb_id]
        j = limb.joint
        rows.append([
            inv(limb.attr.length, r.length_min, r.length_max),
            inv(limb.attr.radius, r.radius_min, r.radius_max),
            inv(j.rotation_range, r.rot_range_min, r.rot_range_max) if j else 0.0,
            inv(j.max_torque, r.torque_min, r.torque_max) if j else 0.0,
        ])
    return np.asarray(rows, dtype=np.float64)


def validate(g: MorphologyGraph, cfg: MorphConfig | None = None) -> None:
    """Raise MorphologyError unless g is a rooted tree within caps."""
    if g.root not in g.limbs:
        raise MorphologyError("root limb missing")
    if g.limbs[g.root].parent is not None or g.limbs[g.root].joint is not None:
        raise MorphologyError("root must have no parent and no joint")
    kids: dict[int, list[int]] = {}
    n_joints = 0
    for limb in g.limbs.values():
        if limb.id == g.root:
            continue
        if limb.joint is None:
            raise MorphologyError(f"non-root limb {limb.id} missing joint attributes")
        n_joints += 1
        if limb.parent not in g.limbs:
            raise MorphologyError(f"limb {limb.id} has unknown parent {limb.parent}")
        kids.setdefault(limb.parent, []).append(limb.id)
    if n_joints != len(g.limbs) - 1:
        raise MorphologyError("joint count must be limb count - 1")
    # single traversal covers connectivity and (with the unique-parent map)
    # rules out cycles: any parent cycle is unreachable from the root
    seen = 0
    max_depth = 0
    stack = [(g.root, 0)]
    while stack:
        limb_id, d = stack.pop()
        seen += 1
        max_depth = max(max_depth, d)
        here = kids.get(limb_id, [])
        slots = [g.limbs[c].slot for c in here]
        if len(slots) != len(set(slots)):
            raise MorphologyError(f"duplicate child slots under limb {limb_id}")
        if any(s < 1 for s in slots):
            raise MorphologyError("child slots must be >= 1")
        stack.extend((c, d + 1) for c in here)
    if seen != len(g.limbs):
        raise MorphologyError("graph is not connected to the root (or has a cycle)")
    if cfg is not None:
        if len(g.limbs) > cfg.max_limbs:
            raise MorphologyError(f"limb count {len(g.limbs)} exceeds cap {cfg.max_limbs}")
        if max_depth > cfg.max_depth:
            raise MorphologyError(f"depth {max_depth} exceeds cap {cfg.max_depth}")


# ---------------------------------------------------------------------------
# Serialization (morph_v1)
# ---------------------------------------------------------------------------

def serialize(g: MorphologyGraph) -> str:
    limbs = []
    for i in sorted(g.limbs):
        l = g.limbs[i]
        limbs.append({
            "id": l.id,
            "parent": l.parent,
            "slot": l.slot,
            "length": l.attr.length,
            "radius": l.attr.radius,
            "rot_range": l.joint.rotation_range if l.joint else None,
            "max_torque": l.joint.max_torque if l.joint else None,
        })
    return json.dumps({"version": "morph_v1", "root": g.root, "limbs": limbs},
                      indent=2, sort_keys=True)


_LIMB_FIELDS = ("id", "parent", "slot", "length", "radius", "rot_range", "max_torque")


def deserialize(text: str, ranges: AttrRanges | None = None) -> MorphologyGraph:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ParseError("document root must be an object")
    if doc.get("version") != "morph_v1":
        raise ParseError(f"unsupported document version {doc.get('version')!r}")
    for key in ("root", "limbs"):
        if key not in doc:
            raise ParseError(f"missing field {key!r}")

    g = MorphologyGraph.__new__(MorphologyGraph)
    g.ranges = ranges if ranges is not None else AttrRanges()
    g.limbs = {}
    g.root = doc["root"]
    for n, rec in enumerate(doc["limbs"]):
        for f in _LIMB_FIELDS:
            if f not in rec:
                raise ParseError(f"limb record {n}: missing field {f!r}")
        is_root = rec["parent"] is None
        if is_root != (rec["id"] == g.root):
            raise ParseError(f"limb record {n}: parent/root mismatch")
        if rec["id"] in g.limbs:
            raise ParseError(f"limb record {n}: duplicate id {rec['id']}")
        joint = None
        if not is_root:
            if rec["rot_range"] is None or rec["max_torque"] is None:
                raise ParseError(f"limb record {n}: missing field 'rot_range'/'max_torque'")
            joint = JointAttr(rotation_range=float(rec["rot_range"]),
                              max_torque=float(rec["max_torque"]))
        g.limbs[rec["id"]] = Limb(
            id=rec["id"], parent=rec["parent"],
            slot=int(rec["slot"]) if not is_root else 0,
            attr=LimbAttr(length=float(rec["length"]), radius=float(rec["radius"])),
            joint=joint)
    g._next_id = max(g.limbs, default=0) + 1
    g._next_slot = {}
    for limb_id in g.limbs:
        kids = g.children(limb_id)
        g._next_slot[limb_id] = max((g.limbs[c].slot for c in kids), default=0) + 1
    try:
        validate(g)
    except MorphologyError as exc:
        raise ParseError(str(exc)) from exc
    return g
