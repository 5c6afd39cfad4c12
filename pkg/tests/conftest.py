import numpy as np
import pytest

from amodsim.world import Occupancy, Request, VehicleState, WorldState, build_grid_city


@pytest.fixture(scope="session")
def small_city():
    return build_grid_city((2, 2), 60.0)


@pytest.fixture
def make_world(small_city):
    """World with vehicles at given (x, y) and pending requests with given pickups."""
    def make(vehicles=(), requests=(), busy=()):
        vs = []
        for vid, (x, y) in vehicles:
            v = VehicleState(id=vid, z=np.array([x, y, 0.0, 0.0]))
            if vid in busy:
                v.occupancy = Occupancy.OCCUPIED
            vs.append(v)
        w = WorldState(small_city, vs)
        for rid, (px, py), t in requests:
            w.requests[rid] = Request(id=rid, pickup=(px, py), dropoff=(px + 30.0, py), spawn_time=t)
        w.next_request_id = max([r[0] for r in requests], default=0) + 1
        return w
    return make
