"""
Embedding module with pluggable providers.
Maps a rendered image to a unit feature vector for the embedding-similarity
loss and the evaluation score.
"""

import hashlib
import io
import logging
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import Future
from dataclasses import dataclass
from typing import Callable, Dict, Optional

import numpy as np

from config import (
    CLIP_MODEL,
    EMBED_BACKOFF,
    EMBED_CACHE_DIR,
    EMBED_ENDPOINT,
    EMBED_RETRIES,
    EMBED_TIMEOUT,
    STUB_GRID,
)
from core.cache import ArrayCache
from core.errors import (
    EmbeddingHTTPError,
    EmbeddingTimeoutError,
    EmptyImageError,
    MalformedResponseError,
    ProviderError,
)

logger = logging.getLogger(__name__)

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class EmbeddingVector:
    values: np.ndarray
    provider_id: str

    @property
    def dimension(self) -> int:
        return len(self.values)


def encode_png(image: np.ndarray) -> bytes:
    """8-bit PNG bytes of an (H,W,3) or (H,W) float image in [0,1]."""
    from PIL import Image

    array = np.clip(np.round(np.asarray(image, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(array).save(buf, format="PNG")
    return buf.getvalue()


def decode_png(data: bytes) -> np.ndarray:
    from PIL import Image

    with Image.open(io.BytesIO(data)) as img:
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def _check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.size == 0 or image.ndim not in (2, 3) or min(image.shape[:2]) == 0:
        raise EmptyImageError(f"cannot embed an empty image (shape {image.shape})")
    if image.ndim == 3 and image.shape[2] != 3:
        raise EmptyImageError(f"expected an RGB image, got {image.shape[2]} channels")
    return image


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a, b) / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-300))


class EmbeddingProvider(ABC):
    """Abstract base class for embedding providers."""

    @abstractmethod
    def embed(self, image: np.ndarray) -> EmbeddingVector:
        """Embed one (H,W,3) image in [0,1] into a unit vector."""
        pass

    @abstractmethod
    def dimension(self) -> int:
        pass

    @property
    @abstractmethod
    def provider_id(self) -> str:
        pass

    @property
    def differentiable(self) -> bool:
        return False

    def vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        """Pull an embedding-space cotangent back to image space."""
        raise ProviderError(f"provider '{self.provider_id}' is not differentiable")


# ── Stub provider ─────────────────────────────────────────────────────────

def _area_resample_matrix(n_out: int, n_in: int) -> np.ndarray:
    """(n_out, n_in) box-filter weights; rows sum to 1."""
    edges_out = np.arange(n_out + 1) * (n_in / n_out)
    lo = np.maximum(edges_out[:-1, None], np.arange(n_in)[None, :])
    hi = np.minimum(edges_out[1:, None], np.arange(n_in)[None, :] + 1)
    overlap = np.clip(hi - lo, 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


class StubEmbeddingProvider(EmbeddingProvider):
    """
    Deterministic local provider: box-downsample to a grid x grid grayscale
    image, subtract the mean, L2-normalize. A constant image has no direction
    and maps to the first basis vector.
    """

    def __init__(self, grid: int = STUB_GRID):
        self._grid = grid
        self._matrices: Dict[tuple, tuple] = {}
        self._lock = threading.Lock()

    def _resamplers(self, h: int, w: int):
        key = (h, w)
        with self._lock:
            if key not in self._matrices:
                self._matrices[key] = (
                    _area_resample_matrix(self._grid, h),
                    _area_resample_matrix(self._grid, w),
                )
            return self._matrices[key]

    def _features(self, image: np.ndarray):
        image = _check_image(image)
        gray = image @ LUMA if image.ndim == 3 else image
        ry, rx = self._resamplers(*gray.shape)
        small = ry @ gray @ rx.T
        centered = small.ravel() - small.mean()
        return centered, float(np.linalg.norm(centered))

    def embed(self, image: np.ndarray) -> EmbeddingVector:
        centered, norm = self._features(image)
        if norm < 1e-12:
            values = np.zeros(self.dimension())
            values[0] = 1.0
        else:
            values = centered / norm
        return EmbeddingVector(values, self.provider_id)

    def dimension(self) -> int:
        return self._grid * self._grid

    @property
    def provider_id(self) -> str:
        return f"stub-{self._grid}"

    @property
    def differentiable(self) -> bool:
        return True

    def vjp(self, image: np.ndarray, cotangent: np.ndarray) -> np.ndarray:
        image = _check_image(image)
        centered, norm = self._features(image)
        if norm < 1e-12:
            return np.zeros_like(image)
        v = centered / norm
        c = np.asarray(cotangent, dtype=np.float64)
        g = (c - v * np.dot(v, c)) / norm
        g = (g - g.mean()).reshape(self._grid, self._grid)
        ry, rx = self._resamplers(*image.shape[:2])
        g_gray = ry.T @ g @ rx
        if image.ndim == 2:
            return g_gray
        return g_gray[..., None] * LUMA[None, None, :]


# ── Remote provider ───────────────────────────────────────────────────────

class RemoteEmbeddingProvider(EmbeddingProvider):
    """
    HTTP client for an embedding service: POST {endpoint}/embed with PNG
    bytes, reply {"embedding": [...]} (a bare JSON list is accepted too).
    Results are cached by SHA-256 of the provider id and the PNG bytes;
    concurrent requests for the same bytes share one network call.
    """

    RETRY_STATUS = {429, 500, 502, 503, 504}

    def __init__(
        self,
        endpoint: str = EMBED_ENDPOINT,
        timeout: float = EMBED_TIMEOUT,
        retries: int = EMBED_RETRIES,
        backoff: float = EMBED_BACKOFF,
        dimension: Optional[int] = None,
        cache: Optional[ArrayCache] = None,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self._endpoint = endpoint.rstrip("/")
        self._timeout = timeout
        self._retries = retries
        self._backoff = backoff
        self._dimension = dimension
        self._cache = cache if cache is not None else ArrayCache(EMBED_CACHE_DIR)
        self._session = session
        self._sleep = sleep
        self._inflight: Dict[str, Future] = {}
        self._lock = threading.Lock()
        self.network_calls = 0

    def _get_session(self):
        if self._session is None:
            import requests
            self._session = requests.Session()
        return self._session

    @property
    def provider_id(self) -> str:
        return f"remote:{self._endpoint}"

    def dimension(self) -> int:
        if self._dimension is None:
            raise ProviderError("remote provider dimension is unknown until the first response")
        return self._dimension

    def embed(self, image: np.ndarray) -> EmbeddingVector:
        png = encode_png(_check_image(image))
        # one cache directory may serve several endpoints
        key = hashlib.sha256(self.provider_id.encode("utf-8") + b"\0" + png).hexdigest()

        cached = self._cache.get(key)
        if cached is not None:
            return EmbeddingVector(cached["embedding"], self.provider_id)

        with self._lock:
            future = self._inflight.get(key)
            owner = future is None
            if owner:
                future = Future()
                self._inflight[key] = future

        if not owner:
            return EmbeddingVector(future.result(), self.provider_id)

        try:
            values = self._request_with_retries(png)
            self._cache.put(key, embedding=values)
            future.set_result(values)
        except BaseException as e:
            future.set_exception(e)
            raise
        finally:
            with self._lock:
                self._inflight.pop(key, None)
        return EmbeddingVector(values, self.provider_id)

    def _request_with_retries(self, png: bytes) -> np.ndarray:
        last_error: Optional[ProviderError] = None
        for attempt in range(self._retries + 1):
            try:
                return self._request(png)
            except EmbeddingTimeoutError as e:
                last_error = e
            except EmbeddingHTTPError as e:
                if e.status_code not in self.RETRY_STATUS:
                    raise
                last_error = e
            if attempt < self._retries:
                delay = self._backoff * (2 ** attempt)
                logger.warning("Embedding request failed (%s); retry %d/%d in %.2fs",
                               last_error, attempt + 1, self._retries, delay)
                self._sleep(delay)
        raise last_error

    def _request(self, png: bytes) -> np.ndarray:
        import requests

        self.network_calls += 1
        try:
            response = self._get_session().post(
                f"{self._endpoint}/embed",
                data=png,
                headers={"Content-Type": "image/png"},
                timeout=self._timeout,
            )
        except requests.Timeout as e:
            raise EmbeddingTimeoutError(f"embedding request timed out after {self._timeout}s") from e
        except requests.ConnectionError as e:
            raise EmbeddingHTTPError(f"cannot reach embedding service: {e}", status_code=503) from e

        if response.status_code != 200:
            raise EmbeddingHTTPError(
                f"embedding service returned HTTP {response.status_code}", status_code=response.status_code
            )
        try:
            payload = response.json()
        except ValueError as e:
            raise MalformedResponseError("embedding response is not JSON") from e
        return self._parse(payload)

    def _parse(self, payload) -> np.ndarray:
        if isinstance(payload, dict):
            payload = payload.get("embedding")
        if not isinstance(payload, list) or not payload:
            raise MalformedResponseError("embedding response must be a non-empty list of floats")
        try:
            values = np.asarray(payload, dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise MalformedResponseError("embedding response contains non-numeric values") from e
        if values.ndim != 1:
            raise MalformedResponseError(f"embedding must be a flat list, got shape {values.shape}")
        if self._dimension is None:
            self._dimension = len(values)
        elif len(values) != self._dimension:
            raise MalformedResponseError(f"expected {self._dimension} dimensions, got {len(values)}")
        norm = np.linalg.norm(values)
        if not np.isfinite(norm) or norm == 0.0:
            raise MalformedResponseError("embedding has zero or non-finite norm")
        return values / norm


# ── CLIP provider (service side) ──────────────────────────────────────────

class ClipEmbeddingProvider(EmbeddingProvider):
    """
    CLIP image embeddings through Sentence Transformers.
    Loaded lazily; used by the embedding service, not differentiable.
    """

    def __init__(self, model_name: str = CLIP_MODEL):
        self._model_name = model_name
        self._model = None  # lazy load to save memory
        self._lock = threading.Lock()

    def _load_model(self):
        with self._lock:
            if self._model is None:
                logger.info("Loading CLIP model: %s", self._model_name)
                from sentence_transformers import SentenceTransformer
                self._model = SentenceTransformer(self._model_name)

    def embed(self, image: np.ndarray) -> EmbeddingVector:
        from PIL import Image

        self._load_model()
        image = _check_image(image)
        pil = Image.fromarray(np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8))
        values = self._model.encode([pil], show_progress_bar=False, normalize_embeddings=True)[0]
        return EmbeddingVector(np.asarray(values, dtype=np.float64), self.provider_id)

    def dimension(self) -> int:
        self._load_model()
        return int(self._model.get_sentence_embedding_dimension() or 512)

    @property
    def provider_id(self) -> str:
        return f"clip:{self._model_name}"


def get_embedding_provider(name: str = "stub", **kwargs) -> EmbeddingProvider:
    """Factory to create an embedding provider by name."""
    providers = {
        "stub": StubEmbeddingProvider,
        "remote": RemoteEmbeddingProvider,
        "clip": ClipEmbeddingProvider,
    }
    if name not in providers:
        raise ValueError(f"Unknown embedding provider: {name}. Available: {list(providers.keys())}")
    return providers[name](**kwargs)
