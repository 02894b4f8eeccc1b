"""Static SVG rendering of morphologies: capsules for limbs, circles for joints.

Children fan out around their parent's direction so branches stay visible.
Output is deterministic: fixed float formatting, stable element order.
"""

from __future__ import annotations

import math

from .morphology import MorphologyGraph

SCALE = 100.0          # px per meter
FAN_SPREAD = 0.5       # radians between adjacent sibling branches


def _limb_geometry(g: MorphologyGraph):
    """World segments per limb: id -> (x0, y0, x1, y1, radius)."""
    geo = {}

    def walk(limb_id, x, y, angle):
        limb = g.limbs[limb_id]
        x1 = x + math.cos(angle) * limb.attr.length
        y1 = y + math.sin(angle) * limb.attr.length
        geo[limb_id] = (x, y, x1, y1, limb.attr.radius)
        kids = g.children(limb_id)
        base = -(len(kids) - 1) / 2.0
        for k, child in enumerate(kids):
            walk(child, x1, y1, angle + (base + k) * FAN_SPREAD)

    walk(g.root, 0.0, 0.0, 0.0)
    return geo


def _f(x: float) -> str:
    return f"{x:.2f}"


def render_svg(g: MorphologyGraph, attention: dict[int, float] | None = None) -> str:
    """Build the SVG document; attention maps limb id -> [0,1] shade."""
    geo = _limb_geometry(g)
    pad = 30.0
    xs = [v for s in geo.values() for v in (s[0], s[2])]
    ys = [v for s in geo.values() for v in (s[1], s[3])]
    min_x, max_x = min(xs) * SCALE - pad, max(xs) * SCALE + pad
    min_y, max_y = min(ys) * SCALE - pad, max(ys) * SCALE + pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" '
        f'viewBox="{_f(min_x)} {_f(min_y)} {_f(max_x - min_x)} {_f(max_y - min_y)}">'
    ]
    for limb_id in sorted(geo):
        x0, y0, x1, y1, radius = geo[limb_id]
        length = math.hypot(x1 - x0, y1 - y0)
        angle = math.degrees(math.atan2(y1 - y0, x1 - x0))
        r_px = radius * SCALE
        fill = "#8fa8c9"
        if attention is not None:
            w = min(1.0, max(0.0, attention.get(limb_id, 0.0)))
            red = 255
            other = int(round(235 * (1.0 - w)))
            fill = f"#{red:02x}{other:02x}{other:02x}"
        parts.append(
            f'<rect class="capsule" x="{_f(x0 * SCALE)}" y="{_f(y0 * SCALE - r_px)}" '
            f'width="{_f(length * SCALE)}" height="{_f(2 * r_px)}" rx="{_f(r_px)}" '
            f'fill="{fill}" stroke="#2f3e51" stroke-width="1.5" '
            f'transform="rotate({_f(angle)} {_f(x0 * SCALE)} {_f(y0 * SCALE)})"/>')
    for limb_id in sorted(geo):
        limb = g.limbs[limb_id]
        if limb.joint is None:
            continue
        x0, y0 = geo[limb_id][0], geo[limb_id][1]
        parts.append(
            f'<circle class="joint" cx="{_f(x0 * SCALE)}" cy="{_f(y0 * SCALE)}" '
            f'r="4.00" fill="#2f3e51"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
