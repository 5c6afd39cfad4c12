import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from amodsim.gateway import GatewayUnavailable, MockGateway
from amodsim.memory import (REFLECTION_KIND, BlockMeanEmbedder, MemoryEntry, MemoryStore, cosine_similarity,
                            reflect_on_collision, retrieve_top_k, store_memory)

vectors = st.lists(st.floats(-100, 100), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 1e-3)


def _img(seed, size=8):
    return np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8)


def _store(capacity=50, grid=4, size=8):
    return MemoryStore(capacity, BlockMeanEmbedder(grid, (size, size)))


# ---------------------------------------------------------------------------
# embedding

def test_same_image_same_vector():
    e = BlockMeanEmbedder(4, (8, 8))
    img = _img(0)
    assert np.array_equal(e(img), e(img))


def test_black_and_white_differ():
    e = BlockMeanEmbedder(4, (8, 8))
    black = np.zeros((8, 8, 3), dtype=np.uint8)
    white = np.full((8, 8, 3), 255, dtype=np.uint8)
    assert cosine_similarity(e(black), e(white)) < 1


def test_block_mean_oracle():
    img = _img(1).astype(float)
    gray = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    blocks = []
    for by in range(4):
        for bx in range(4):
            blocks.append(sum(gray[2 * by + a, 2 * bx + b] for a in range(2) for b in range(2)) / 4)
    v = np.array(blocks) / 255 - 0.5
    out = BlockMeanEmbedder(4, (8, 8))(_img(1))
    np.testing.assert_allclose(out, v / np.linalg.norm(v), atol=1e-12)
    assert abs(np.linalg.norm(out) - 1) <= 1e-9


def test_default_dimension():
    e = BlockMeanEmbedder()
    out = e(np.zeros((512, 512, 3), dtype=np.uint8))
    assert out.shape == (256,) and abs(np.linalg.norm(out) - 1) <= 1e-9


def test_uniform_gray_maps_to_constant():
    e = BlockMeanEmbedder(4, (8, 8))
    out = e(np.full((8, 8), 127.5))
    np.testing.assert_allclose(out, 0.25)


def test_size_mismatch_names_expected_size():
    with pytest.raises(ValueError, match="8x8"):
        BlockMeanEmbedder(4, (8, 8))(np.zeros((16, 16, 3)))


# ---------------------------------------------------------------------------
# cosine similarity

def test_cosine_cases():
    e = np.array([0.3, -0.2, 0.9])
    assert cosine_similarity(e, e) == pytest.approx(1.0)
    assert cosine_similarity([1, 0], [0, 1]) == 0.0
    assert abs(cosine_similarity([1, 2, 3], [4, 5, 6]) - 0.974631846) <= 1e-9


def test_cosine_arithmetic_oracle():
    assert cosine_similarity([1, 2, 3], [4, 5, 6]) == pytest.approx(32 / (14 ** 0.5 * 77 ** 0.5), abs=1e-15)


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine_similarity([0, 0], [1, 0])
    with pytest.raises(ValueError):
        cosine_similarity([1, 0], [1, 0, 0])


@settings(max_examples=200, deadline=None)
@given(a=vectors, b=vectors, c=st.floats(1e-3, 1e3))
def test_cosine_symmetry_and_scale(a, b, c):
    s = cosine_similarity(a, b)
    assert -1 <= s <= 1
    assert s == pytest.approx(cosine_similarity(b, a), abs=1e-12)
    assert s == pytest.approx(cosine_similarity(a, c * np.asarray(b)), abs=1e-9)


# ---------------------------------------------------------------------------
# store and retrieval

def test_empty_store_and_zero_k():
    s = _store()
    assert retrieve_top_k(s, _img(0), 3) == []
    s.add(_img(1), "p", "r")
    assert retrieve_top_k(s, _img(0), 0) == []


def test_top_k_matches_full_sort():
    s = _store()
    for k in range(20):
        s.add(_img(k), f"p{k}", f"r{k}")
    q = _img(99)
    qe = s.embedder(q)
    oracle = sorted(s.entries, key=lambda e: (-float(qe @ e.embedding), -e.insert_index))[:3]
    assert [e.insert_index for e in retrieve_top_k(s, q, 3)] == [e.insert_index for e in oracle]
    assert len(retrieve_top_k(s, q, 50)) == 20


def test_ties_prefer_recent():
    s = _store()
    for _ in range(3):
        s.add(_img(5), "same", "same")
    assert [e.insert_index for e in retrieve_top_k(s, _img(5), 2)] == [2, 1]


def test_fifo_eviction():
    s = _store(capacity=2)
    first = s.add(_img(0), "a", "a")
    s.add(_img(1), "b", "b")
    s.add(_img(2), "c", "c")
    assert len(s) == 2 and all(e is not first for e in s.entries)
    assert [e.insert_index for e in s.entries] == [1, 2]
    assert all(e is not first for e in retrieve_top_k(s, _img(0), 5))


def test_store_memory_requires_embedding():
    with pytest.raises(ValueError):
        store_memory(_store(), MemoryEntry(None, "p", "r", None))


def test_variant_filter():
    s = _store()
    s.add(_img(0), "p", "r", variant="scheduling")
    s.add(_img(0), "p", "r", variant="graph_evolution")
    assert [e.variant for e in retrieve_top_k(s, _img(0), 5, "scheduling")] == ["scheduling"]


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 15), cap=st.integers(1, 8), k=st.integers(0, 10), seed=st.integers(0, 1000))
def test_store_bounds_and_prefix(n, cap, k, seed):
    s = _store(capacity=cap)
    last = -1
    for j in range(n):
        e = s.add(_img(seed + j), "p", "r")
        assert len(s) <= cap
        assert e.insert_index > last
        last = e.insert_index
    q = _img(seed + 1000)
    a = [e.insert_index for e in retrieve_top_k(s, q, k)]
    b = [e.insert_index for e in retrieve_top_k(s, q, k + 1)]
    assert b[:len(a)] == a


def test_save_layout(tmp_path):
    s = _store()
    s.add(_img(0), "p", "r")
    s.save(tmp_path)
    rec = json.loads((tmp_path / "entries.jsonl").read_text())
    assert rec["prompt"] == "p" and np.load(tmp_path / "embeddings.npy").shape == (1, 16)


# ---------------------------------------------------------------------------
# reflection

def _episode(md, image=None):
    return {"image": image if image is not None else _img(3), "min_distance": md, "d_safe": 3.0,
            "time": 12.0, "decisions": "[[1, 2]]", "variant": "graph_evolution"}


def test_reflection_stored():
    s = _store()
    e = reflect_on_collision(s, MockGateway(script=["vehicles 1 and 2 should have been grouped"]), _episode(2.5))
    assert e.kind == REFLECTION_KIND and e.response.startswith("vehicles 1")
    assert "what went wrong" in e.prompt.lower()


def test_no_collision_no_reflection():
    s = _store()
    gw = MockGateway(script=["x"])
    assert reflect_on_collision(s, gw, _episode(3.4)) is None
    assert len(s) == 0 and gw.log == []


def test_reflection_skipped_when_gateway_down():
    s = _store()
    assert reflect_on_collision(s, MockGateway(script=["x"], failures=3, max_retries=1), _episode(1.0)) is None
    assert len(s) == 0


def test_reflection_retrievable_from_similar_image():
    s = _store()
    for k in range(10):
        s.add(_img(k + 10), "p", "r", variant="graph_evolution")
    img = _img(3)
    reflect_on_collision(s, MockGateway(script=["lesson"]), _episode(2.0, img))
    near = img.copy()
    near[0, 0] = 255 - near[0, 0]
    top = retrieve_top_k(s, near, 1, "scheduling")
    assert top[0].kind == REFLECTION_KIND
