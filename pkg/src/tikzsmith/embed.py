"""Image embedding gateway: a wire-protocol client plus a deterministic mock.

The mock embedder works on a 16x16 grid of grayscale block means. The pooled
embedding is that grid flattened and mean-centered (so a uniform image embeds
to the zero vector). Patch embeddings place each patch's local block means at
the region's cells in the shared grid frame, scaled by the patch count, which
makes the mean of the patch embeddings reconstruct the pooled embedding
exactly: a cheap cross-check between the two endpoints.
"""

from __future__ import annotations

import hashlib
import io
import threading
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
import requests
from PIL import Image

from .errors import GatewayError, ProtocolError

ImageInput = Union[bytes, Image.Image]


@dataclass(frozen=True, eq=False)
class Embedding:
    values: np.ndarray
    dim: int

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=float)
        if arr.ndim != 1 or arr.shape[0] != self.dim:
            raise ValueError("embedding length must equal dim")
        if not np.isfinite(arr).all():
            raise ValueError("embedding entries must be finite")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True, eq=False)
class PatchEmbeddings:
    patches: np.ndarray
    layer_index: Optional[int] = None

    def __post_init__(self):
        arr = np.asarray(self.patches, dtype=float)
        if arr.ndim != 2 or arr.shape[0] < 1:
            raise ValueError("patches must be a 2-d matrix with at least one row")
        if not np.isfinite(arr).all():
            raise ValueError("patch entries must be finite")
        object.__setattr__(self, "patches", arr)

    @property
    def num_patches(self) -> int:
        return int(self.patches.shape[0])

    @property
    def dim(self) -> int:
        return int(self.patches.shape[1])


def _to_pil(image: ImageInput) -> Image.Image:
    if isinstance(image, Image.Image):
        return image
    if isinstance(image, (bytes, bytearray)):
        if not image:
            raise ValueError("empty image bytes")
        return Image.open(io.BytesIO(image)).copy()
    raise TypeError(f"unsupported image input: {type(image)!r}")


def image_sha256(image: ImageInput) -> str:
    if isinstance(image, Image.Image):
        buf = io.BytesIO()
        image.save(buf, format="PNG")
        data = buf.getvalue()
    else:
        data = bytes(image)
    return hashlib.sha256(data).hexdigest()


def _block_means(arr: np.ndarray, grid: int) -> np.ndarray:
    """Grid x grid means over rectangular pixel blocks (floor-split bounds)."""
    h, w = arr.shape
    out = np.empty((grid, grid), dtype=float)
    for r in range(grid):
        lo_r = (r * h) // grid
        hi_r = max(((r + 1) * h) // grid, lo_r + 1)
        for c in range(grid):
            lo_c = (c * w) // grid
            hi_c = max(((c + 1) * w) // grid, lo_c + 1)
            out[r, c] = arr[lo_r:hi_r, lo_c:hi_c].mean()
    return out


class MockEmbedder:
    """Deterministic grayscale-downsample embedder for offline runs.

    ``cell_grid`` controls the per-patch feature grid (16 -> dim 256) and
    ``patch_grid`` the patch layout (4 -> 16 patches).
    """

    def __init__(self, cell_grid: int = 16, patch_grid: int = 4):
        if cell_grid < 1 or patch_grid < 1:
            raise ValueError("grids must be positive")
        self.cell_grid = cell_grid
        self.patch_grid = patch_grid

    @property
    def dim(self) -> int:
        return self.cell_grid * self.cell_grid

    def _global_grid(self, image: ImageInput) -> np.ndarray:
        pil = _to_pil(image).convert("L")
        arr = np.asarray(pil, dtype=float) / 255.0
        if arr.size == 0:
            raise ValueError("empty image")
        return _block_means(arr, self.cell_grid)

    def embed_image(self, image: ImageInput) -> Embedding:
        grid = self._global_grid(image).ravel()
        return Embedding(values=grid - grid.mean(), dim=self.dim)

    def embed_patches(self, image: ImageInput, layer_index: Optional[int] = None) -> PatchEmbeddings:
        grid = self._global_grid(image)
        center = grid.mean()
        n = self.patch_grid
        cg = self.cell_grid
        row_owner = (np.arange(cg) * n) // cg
        col_owner = (np.arange(cg) * n) // cg
        scale = float(n * n)
        rows = []
        for pi in range(n):
            for pj in range(n):
                mask = np.outer(row_owner == pi, col_owner == pj).astype(float)
                rows.append((scale * grid * mask).ravel() - center)
        return PatchEmbeddings(patches=np.stack(rows), layer_index=layer_index)


class _LruCache:
    def __init__(self, capacity: int):
        self.capacity = capacity
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key):
        with self._lock:
            if key not in self._data:
                return None
            self._data.move_to_end(key)
            return self._data[key]

    def put(self, key, value):
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)


class HttpEmbedClient:
    """Wire-protocol embedding client; responses cached by image content hash."""

    def __init__(
        self,
        base_url: str,
        *,
        expected_dim: Optional[int] = None,
        timeout_s: float = 30.0,
        max_retries: int = 2,
        cache_size: int = 256,
        session: Optional[requests.Session] = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.expected_dim = expected_dim
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self._cache = _LruCache(cache_size)
        self._session = session or requests.Session()

    def _post(self, path: str, *, json_body=None, data=None):
        url = self.base_url + path
        last_exc = None
        for attempt in range(self.max_retries + 1):
            try:
                resp = self._session.post(url, json=json_body, data=data, timeout=self.timeout_s)
            except requests.RequestException as exc:
                last_exc = exc
                continue
            if resp.status_code != 200:
                raise GatewayError(f"{url} returned {resp.status_code}", retries=attempt)
            try:
                return resp.json()
            except ValueError as exc:
                raise ProtocolError(f"{url} returned non-JSON body") from exc
        raise GatewayError(f"{url} unreachable: {last_exc}", retries=self.max_retries)

    def register_image(self, image: ImageInput) -> str:
        if isinstance(image, Image.Image):
            buf = io.BytesIO()
            image.save(buf, format="PNG")
            data = buf.getvalue()
        else:
            data = bytes(image)
        payload = self._post("/v1/images", data=data)
        image_id = payload.get("image_id")
        if not isinstance(image_id, str):
            raise ProtocolError("image upload response missing image_id")
        return image_id

    def embed_image(self, image: ImageInput) -> Embedding:
        key = (image_sha256(image), "pooled", None)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        image_id = self.register_image(image)
        payload = self._post(
            "/v1/embed", json_body={"image_id": image_id, "mode": "pooled", "layer_index": None}
        )
        try:
            dim = int(payload["dim"])
            values = np.asarray(payload["values"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed pooled embed response: {exc}") from exc
        if self.expected_dim is not None and dim != self.expected_dim:
            raise ProtocolError(f"embed dim {dim} != configured {self.expected_dim}")
        emb = Embedding(values=values, dim=dim)
        self._cache.put(key, emb)
        return emb

    def embed_patches(self, image: ImageInput, layer_index: Optional[int] = None) -> PatchEmbeddings:
        key = (image_sha256(image), "patches", layer_index)
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        image_id = self.register_image(image)
        payload = self._post(
            "/v1/embed",
            json_body={"image_id": image_id, "mode": "patches", "layer_index": layer_index},
        )
        try:
            num = int(payload["num_patches"])
            dim = int(payload["dim"])
            patches = np.asarray(payload["patches"], dtype=float)
        except (KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(f"malformed patch embed response: {exc}") from exc
        if patches.shape != (num, dim):
            raise ProtocolError(f"patch matrix shape {patches.shape} != ({num}, {dim})")
        if self.expected_dim is not None and dim != self.expected_dim:
            raise ProtocolError(f"embed dim {dim} != configured {self.expected_dim}")
        pe = PatchEmbeddings(patches=patches, layer_index=layer_index)
        self._cache.put(key, pe)
        return pe


def load_mock_embedder(spec: Optional[dict] = None) -> MockEmbedder:
    spec = spec or {}
    return MockEmbedder(
        cell_grid=int(spec.get("cell_grid", 16)),
        patch_grid=int(spec.get("patch_grid", 4)),
    )
