"""Top-down raster of the world and the text that accompanies it in queries."""
from __future__ import annotations

import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image, ImageDraw

from .gateway import GRAPH_EVOLUTION, SCHEDULING
from .world import Occupancy, WorldState

log = logging.getLogger(__name__)

BACKGROUND = (30, 30, 30)
ROAD = (85, 85, 85)
BOUNDARY = (235, 235, 235)
LANE_MARK = (140, 140, 200)
FREE = (0, 200, 0)
OCCUPIED = (255, 215, 0)
REQUEST = (220, 0, 0)
LABEL = (255, 255, 255)

VEHICLE_LENGTH = 4.5
VEHICLE_WIDTH = 2.0
REQUEST_SIZE = 3.0

# 3x5 bitmap digits, one string per row
_DIGITS = {
    "0": ("111", "101", "101", "101", "111"),
    "1": ("010", "110", "010", "010", "111"),
    "2": ("111", "001", "111", "100", "111"),
    "3": ("111", "001", "111", "001", "111"),
    "4": ("101", "101", "111", "001", "001"),
    "5": ("111", "100", "111", "001", "111"),
    "6": ("111", "100", "111", "101", "111"),
    "7": ("111", "001", "010", "010", "010"),
    "8": ("111", "101", "111", "101", "111"),
    "9": ("111", "101", "111", "001", "111"),
}


@dataclass
class BevImage:
    pixels: np.ndarray                      # (H, W, 3) uint8
    scale: float                            # meters per pixel
    origin: tuple                           # world (x_min, y_max) at pixel (0, 0)
    variant: str

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def world_to_pixel(self, xy):
        x, y = float(xy[0]), float(xy[1])
        return (x - self.origin[0]) / self.scale, (self.origin[1] - y) / self.scale

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, "RGB").save(buf, format="PNG", optimize=False)
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_png())


def _draw_text(draw: ImageDraw.ImageDraw, x: int, y: int, text: str, color, size: int = 1) -> None:
    for k, ch in enumerate(text):
        rows = _DIGITS.get(ch)
        if rows is None:
            continue
        ox = x + k * 4 * size
        for r, row in enumerate(rows):
            for c, bit in enumerate(row):
                if bit == "1":
                    px, py = ox + c * size, y + r * size
                    draw.rectangle([px, py, px + size - 1, py + size - 1], fill=color)


def _rect(center, heading, length, width):
    c, s = math.cos(heading), math.sin(heading)
    hl, hw = 0.5 * length, 0.5 * width
    corners = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)]
    return [(center[0] + c * a - s * b, center[1] + s * a + c * b) for a, b in corners]


def render_bev(world: WorldState, variant: str = SCHEDULING, size: int = 512,
               scale: float | None = None) -> BevImage:
    """Rasterize roads, vehicles and (scheduling variant only) request markers.

    ``scale`` defaults to 0.5 m/px, or coarser if the map would not fit.
    """
    if variant not in (SCHEDULING, GRAPH_EVOLUTION):
        raise ValueError(f"unknown variant {variant!r}")
    x0, y0, x1, y1 = world.graph.bounds(pad=6.0)
    extent = max(x1 - x0, y1 - y0)
    if scale is None:
        scale = max(0.5, extent / size)
    if scale <= 0:
        raise ValueError("scale must be positive")
    if extent / scale > size + 1e-9:
        raise ValueError(f"map extent {extent:.1f} m does not fit {size} px at {scale} m/px")
    # centre the map in the frame
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    origin = (cx - 0.5 * size * scale, cy + 0.5 * size * scale)
    img = BevImage(np.zeros((size, size, 3), dtype=np.uint8), scale, origin, variant)
    canvas = Image.new("RGB", (size, size), BACKGROUND)
    draw = ImageDraw.Draw(canvas)
    px = img.world_to_pixel
    half = world.graph.lane_width
    for P, Q in world.graph.roads:
        lo = np.minimum(P, Q) - half
        hi = np.maximum(P, Q) + half
        a, b = px((lo[0], hi[1])), px((hi[0], lo[1]))
        draw.rectangle([round(a[0]), round(a[1]), round(b[0]), round(b[1])], fill=ROAD)
    for line in world.graph.boundary_polylines:
        draw.line([tuple(round(v) for v in px(p)) for p in line], fill=BOUNDARY, width=1)
    for P, Q in world.graph.roads:
        # dashed divider between the two directions
        P, Q = np.asarray(P), np.asarray(Q)
        L = float(np.linalg.norm(Q - P))
        d = (Q - P) / L
        s = half
        while s + 2.0 < L - half:
            a, b = px(P + d * s), px(P + d * (s + 2.0))
            draw.line([(round(a[0]), round(a[1])), (round(b[0]), round(b[1]))], fill=LANE_MARK, width=1)
            s += 4.0
    if variant == SCHEDULING:
        for r in world.pending():
            corners = _rect(r.pickup, 0.0, REQUEST_SIZE, REQUEST_SIZE)
            draw.polygon([tuple(round(v, 3) for v in px(p)) for p in corners], fill=REQUEST)
            u, v = px(r.pickup)
            _draw_text(draw, int(round(u)) + 4, int(round(v)) + 3, str(r.id), REQUEST)
    for veh in world.vehicles:
        u, v = px(veh.z[:2])
        if not (0 <= u < size and 0 <= v < size):
            log.warning("vehicle %d outside the image; drawn clipped", veh.id)
        color = FREE if veh.occupancy is Occupancy.FREE else OCCUPIED
        corners = _rect(veh.z[:2], float(veh.z[2]), VEHICLE_LENGTH, VEHICLE_WIDTH)
        draw.polygon([tuple(round(c, 3) for c in px(p)) for p in corners], fill=color)
        _draw_text(draw, int(round(u)) + 5, int(round(v)) - 9, str(veh.id), LABEL)
    img.pixels = np.asarray(canvas, dtype=np.uint8).copy()
    return img


# ---------------------------------------------------------------------------
# prompt text

SYSTEM_TEMPLATE = (
    "You coordinate a fleet of autonomous vehicles in a grid city seen from above. "
    "Traffic drives on the {side} side of the road ({flag}). Grey areas are roads, white lines are "
    "road boundaries and the dashed lines separate the two travel directions. "
    "Green rectangles are free vehicles and yellow rectangles are vehicles carrying or fetching a "
    "passenger; the number beside each rectangle is the vehicle id. Red squares are waiting "
    "passenger requests labelled with the request id."
)

SCHEDULING_TASK = (
    "Assign waiting requests to free vehicles so that passengers are served quickly and no passenger "
    "waits much longer than the others. Each vehicle takes at most one request.\n"
    "Pending requests (id: pickup x, y -> dropoff x, y, waiting s):\n{requests}\n"
    "Free vehicles (id: x, y):\n{vehicles}\n"
    'Answer with a JSON object {{"assign": [[request_id, vehicle_id], ...]}}.'
)

EVOLUTION_TASK = (
    "Group the vehicles that are at risk of colliding with each other within the next few seconds. "
    "Vehicles that cannot interact should be in separate groups.\n"
    "Vehicles (id: x, y, heading deg, speed m/s):\n{vehicles}\n"
    'Answer with a JSON object {{"groups": [[vehicle_id, ...], ...]}}.'
)


@dataclass
class PromptBundle:
    system_message: str
    task_message: str
    image: BevImage | None
    exemplars: list = field(default_factory=list)
    variant: str = SCHEDULING
    # snapshot data for offline responders; never sent to a live endpoint
    context: dict = field(default_factory=dict)


def system_message(drive_side: str) -> str:
    side = "right" if drive_side == "LHD" else "left"
    return SYSTEM_TEMPLATE.format(side=side, flag=drive_side)


def compose_prompt(image: BevImage | None, task: str, world: WorldState, exemplars=(),
                   max_exemplars: int | None = None) -> PromptBundle:
    """Bundle the system text, task text, image and retrieved exemplars (oldest first)."""
    ex = sorted(exemplars, key=lambda e: e.insert_index)
    if max_exemplars is not None and len(ex) > max_exemplars:
        raise ValueError(f"{len(ex)} exemplars exceed the limit of {max_exemplars}")
    if task == SCHEDULING:
        pending = world.pending()
        free = world.free_vehicles()
        req_lines = "\n".join(
            f"  {r.id}: {r.pickup[0]:.1f}, {r.pickup[1]:.1f} -> {r.dropoff[0]:.1f}, {r.dropoff[1]:.1f}, "
            f"{world.time - r.spawn_time:.1f}" for r in pending) or "  none"
        veh_lines = "\n".join(f"  {v.id}: {v.z[0]:.1f}, {v.z[1]:.1f}" for v in free) or "  none"
        text = SCHEDULING_TASK.format(requests=req_lines, vehicles=veh_lines)
        context = {
            "time": world.time,
            "requests": [(r.id, tuple(r.pickup), r.spawn_time) for r in pending],
            "vehicles": [(v.id, (float(v.z[0]), float(v.z[1]))) for v in free],
        }
    elif task == GRAPH_EVOLUTION:
        veh_lines = "\n".join(
            f"  {v.id}: {v.z[0]:.1f}, {v.z[1]:.1f}, {math.degrees(v.z[2]):.0f}, {v.z[3]:.1f}"
            for v in world.vehicles) or "  none"
        text = EVOLUTION_TASK.format(vehicles=veh_lines)
        context = {"vehicles": [(v.id, tuple(float(c) for c in v.z)) for v in world.vehicles]}
    else:
        raise ValueError(f"unknown task {task!r}")
    return PromptBundle(system_message(world.graph.drive_side), text, image, ex, task, context)
