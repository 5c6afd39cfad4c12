import io
import math

import numpy as np
import pytest
from PIL import Image

from amodsim import bev
from amodsim.bev import compose_prompt, render_bev
from amodsim.gateway import GRAPH_EVOLUTION, SCHEDULING
from amodsim.memory import MemoryEntry
from amodsim.world import Occupancy


def _colors(img):
    return {tuple(c) for c in img.pixels.reshape(-1, 3)}


def _mask(img, color):
    return np.all(img.pixels == np.array(color, dtype=np.uint8), axis=2)


def test_empty_world_only_roads(make_world):
    img = render_bev(make_world())
    assert _colors(img) <= {bev.BACKGROUND, bev.ROAD, bev.BOUNDARY, bev.LANE_MARK}
    assert img.width == img.height == 512
    assert img.scale == 0.5


def test_evolution_view_has_no_request_markers(make_world):
    w = make_world([(1, (10, 10))], [(1, (30, 2), 0.0), (2, (60, 40), 0.0), (3, (90, 118), 0.0)])
    assert _mask(render_bev(w, GRAPH_EVOLUTION), bev.REQUEST).sum() == 0
    assert _mask(render_bev(w, SCHEDULING), bev.REQUEST).sum() > 0


def test_render_is_deterministic(make_world):
    w = make_world([(1, (10, 10)), (2, (50, 60))], [(1, (30, 2), 0.0)])
    a, b = render_bev(w).to_png(), render_bev(w).to_png()
    assert a == b
    assert Image.open(io.BytesIO(a)).size == (512, 512)


def test_vehicle_colors(make_world):
    w = make_world([(1, (10, 10)), (2, (90, 90))], busy={2})
    img = render_bev(w)
    assert _mask(img, bev.FREE).sum() > 0 and _mask(img, bev.OCCUPIED).sum() > 0


@pytest.mark.parametrize("pos,heading", [((20.0, 30.0), 0.0), ((61.3, 44.7), 0.7), ((100.0, 5.5), -2.0)])
def test_vehicle_centroid_recoverable(make_world, pos, heading):
    w = make_world([(4, pos)])
    w.vehicles[0].z[2] = heading
    img = render_bev(w)
    rows, cols = np.nonzero(_mask(img, bev.FREE))
    u, v = img.world_to_pixel(pos)
    assert math.hypot(cols.mean() - u, rows.mean() - v) <= 1.0


def test_labels_drawn(make_world):
    w = make_world([(7, (30, 30))])
    img = render_bev(w)
    u, v = (int(round(c)) for c in img.world_to_pixel((30, 30)))
    patch = _mask(img, bev.LABEL)[v - 12:v, u + 3:u + 12]
    assert patch.sum() > 0


def test_scale_and_bounds_checked(make_world):
    w = make_world()
    with pytest.raises(ValueError):
        render_bev(w, scale=0.05)
    with pytest.raises(ValueError):
        render_bev(w, variant="photo")


def test_vehicle_outside_map_is_clipped(make_world, caplog):
    w = make_world([(1, (1000.0, 1000.0))])
    with caplog.at_level("WARNING"):
        render_bev(w)
    assert "outside" in caplog.text


def test_zero_shot_prompt_is_schema_complete(make_world):
    w = make_world([(1, (0, 0))], [(1, (5, 5), 0.0)])
    b = compose_prompt(render_bev(w), SCHEDULING, w)
    assert b.exemplars == [] and '"assign"' in b.task_message
    g = compose_prompt(render_bev(w, GRAPH_EVOLUTION), GRAPH_EVOLUTION, w)
    assert '"groups"' in g.task_message


def _entry(idx):
    return MemoryEntry(None, f"prompt {idx}", f"answer {idx}", np.ones(4) / 2, insert_index=idx)


def test_exemplars_oldest_first(make_world):
    w = make_world()
    b = compose_prompt(None, SCHEDULING, w, [_entry(9), _entry(2)])
    assert [e.insert_index for e in b.exemplars] == [2, 9]
    with pytest.raises(ValueError):
        compose_prompt(None, SCHEDULING, w, [_entry(1), _entry(2)], max_exemplars=1)


def test_scheduling_text_lists_pending_and_free(make_world):
    w = make_world([(1, (0, 0)), (2, (9, 9)), (5, (3, 3))],
                   [(11, (5, 5), 0.0), (12, (6, 6), 1.0), (13, (7, 7), 2.0)], busy={2})
    w.requests[12].advance(w.requests[12].status.__class__.ASSIGNED)
    b = compose_prompt(None, SCHEDULING, w)
    assert {r[0] for r in b.context["requests"]} == {r.id for r in w.pending()} == {11, 13}
    assert {v[0] for v in b.context["vehicles"]} == {1, 5}
    lines = b.task_message.splitlines()
    assert any(line.strip().startswith("11:") for line in lines)
    assert not any(line.strip().startswith("12:") for line in lines)


def test_evolution_text_lists_all_vehicles(make_world):
    w = make_world([(1, (0, 0)), (2, (9, 9))], busy={2})
    b = compose_prompt(None, GRAPH_EVOLUTION, w)
    assert [v[0] for v in b.context["vehicles"]] == [1, 2]


@pytest.mark.parametrize("side,word", [("LHD", "right"), ("RHD", "left")])
def test_system_message_states_drive_side(side, word):
    text = bev.system_message(side)
    assert side in text and f"{word} side" in text and "dashed" in text


def test_save_png(tmp_path, make_world):
    img = render_bev(make_world([(1, (0, 0))]))
    img.save(tmp_path / "f.png")
    assert (tmp_path / "f.png").read_bytes() == img.to_png()


def test_occupancy_enum_is_used(make_world):
    w = make_world([(1, (0, 0))])
    w.vehicles[0].occupancy = Occupancy.EN_ROUTE
    assert _mask(render_bev(w), bev.OCCUPIED).sum() > 0
