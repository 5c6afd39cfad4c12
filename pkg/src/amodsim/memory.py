"""Bounded exemplar memory with image embeddings and cosine Top-K retrieval."""
from __future__ import annotations

import base64
import json
import logging
import math
import os
from collections import deque
from dataclasses import dataclass

import httpx
import numpy as np

from .bev import PromptBundle
from .gateway import REFLECTION, GatewayError

log = logging.getLogger(__name__)

PLAIN = "plain"
REFLECTION_KIND = "reflection"

_LUMA = np.array([0.299, 0.587, 0.114])


def _pixels(image) -> np.ndarray:
    arr = getattr(image, "pixels", image)
    return np.asarray(arr)


class BlockMeanEmbedder:
    """Grayscale, ``grid x grid`` block means, centred and L2-normalized.

    Gray levels are mapped to [-0.5, 0.5] before normalizing so that uniform
    black and uniform white images point in opposite directions. A vector
    with zero norm (uniform mid-gray) maps to the constant unit vector.
    """

    def __init__(self, grid: int = 16, expected_size=(512, 512)):
        self.grid = grid
        self.expected_size = tuple(expected_size)   # (height, width)
        h, w = self.expected_size
        if h % grid or w % grid:
            raise ValueError(f"image size {self.expected_size} not divisible by grid {grid}")

    @property
    def dim(self) -> int:
        return self.grid * self.grid

    def __call__(self, image) -> np.ndarray:
        px = _pixels(image).astype(float)
        if px.shape[:2] != self.expected_size:
            raise ValueError(f"embedder expects {self.expected_size[0]}x{self.expected_size[1]} images, "
                             f"got {px.shape[0]}x{px.shape[1]}")
        gray = px @ _LUMA if px.ndim == 3 else px
        h, w = self.expected_size
        g = self.grid
        blocks = gray.reshape(g, h // g, g, w // g).mean(axis=(1, 3)).ravel()
        v = blocks / 255.0 - 0.5
        norm = float(np.linalg.norm(v))
        if norm < 1e-12:
            return np.full(self.dim, 1.0 / math.sqrt(self.dim))
        return v / norm


class HttpEmbedder:
    """External embedding service: POST ``{"image_b64": ...}``, expects ``{"embedding": [...]}``."""

    def __init__(self, url: str, timeout: float = 30.0, client: httpx.Client | None = None):
        self.url = url
        self._client = client or httpx.Client(timeout=timeout)

    def __call__(self, image) -> np.ndarray:
        data = image.to_png() if hasattr(image, "to_png") else bytes(image)
        resp = self._client.post(self.url, json={"image_b64": base64.b64encode(data).decode("ascii")})
        resp.raise_for_status()
        v = np.asarray(resp.json()["embedding"], dtype=float)
        norm = float(np.linalg.norm(v))
        if norm == 0.0:
            raise ValueError("embedding service returned a zero vector")
        return v / norm


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


@dataclass
class MemoryEntry:
    image: object
    prompt: str
    response: str
    embedding: np.ndarray
    kind: str = PLAIN
    variant: str = ""
    insert_index: int = -1


class MemoryStore:
    def __init__(self, capacity: int = 50, embedder=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.embedder = embedder or BlockMeanEmbedder()
        self.entries = deque()
        self._counter = 0

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, image, prompt: str, response: str, kind: str = PLAIN, variant: str = "") -> MemoryEntry:
        entry = MemoryEntry(image, prompt, response, self.embedder(image), kind, variant)
        store_memory(self, entry)
        return entry

    def save(self, directory) -> None:
        """One PNG, one text record and one embedding row per entry."""
        os.makedirs(directory, exist_ok=True)
        rows = []
        with open(os.path.join(directory, "entries.jsonl"), "w") as fh:
            for e in self.entries:
                name = f"entry_{e.insert_index:05d}.png"
                if hasattr(e.image, "save"):
                    e.image.save(os.path.join(directory, name))
                fh.write(json.dumps({"index": e.insert_index, "kind": e.kind, "variant": e.variant,
                                     "image": name, "prompt": e.prompt, "response": e.response}) + "\n")
                rows.append(e.embedding)
        np.save(os.path.join(directory, "embeddings.npy"),
                np.array(rows) if rows else np.zeros((0, getattr(self.embedder, "dim", 0))))


def store_memory(store: MemoryStore, entry: MemoryEntry) -> MemoryStore:
    if entry.embedding is None:
        raise ValueError("entry has no embedding")
    entry.insert_index = store._counter
    store._counter += 1
    store.entries.append(entry)
    while len(store.entries) > store.capacity:
        store.entries.popleft()
    return store


def retrieve_top_k(store: MemoryStore, query_image, k: int = 3, variant: str | None = None) -> list:
    """Entries most similar to the query image, best first; recency breaks ties."""
    if k <= 0 or not store.entries:
        return []
    q = store.embedder(query_image)
    pool = [e for e in store.entries if variant is None or e.variant == variant or e.kind == REFLECTION_KIND]
    scored = sorted(pool, key=lambda e: (-cosine_similarity(q, e.embedding), -e.insert_index))
    return scored[:k]


REFLECTION_TASK = (
    "The vehicles came closer than the safety distance ({min_distance:.2f} m < {d_safe:.2f} m) at "
    "t = {time:.1f} s. Decisions taken before the event:\n{decisions}\n"
    "What went wrong, and what should be done differently in a similar scene?"
)


def reflect_on_collision(store: MemoryStore, gateway, episode: dict):
    """Ask the gateway to explain a safety violation and keep the answer as a reflection entry.

    ``episode`` carries ``image``, ``min_distance``, ``d_safe``, ``time``,
    ``decisions`` and ``system_message``. Returns None when there was no
    violation or the gateway failed.
    """
    if episode.get("min_distance", math.inf) >= episode.get("d_safe", 0.0):
        return None
    text = REFLECTION_TASK.format(min_distance=episode["min_distance"], d_safe=episode["d_safe"],
                                  time=episode.get("time", 0.0), decisions=episode.get("decisions", ""))
    bundle = PromptBundle(episode.get("system_message", ""), text, episode.get("image"), [], REFLECTION)
    try:
        ex = gateway.query(bundle, REFLECTION)
    except GatewayError as exc:
        log.warning("reflection skipped: %s", exc)
        return None
    return store.add(episode.get("image"), text, ex.response, kind=REFLECTION_KIND,
                     variant=episode.get("variant", ""))
