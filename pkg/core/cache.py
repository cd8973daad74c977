"""
On-disk array cache.
Content-addressed .npz files under a directory, with an in-memory layer and
a lock so concurrent providers and texture passes can share one instance.
"""

import logging
import threading
from pathlib import Path
from typing import Dict, Optional

import numpy as np

logger = logging.getLogger(__name__)


class ArrayCache:
    """Key -> dict of named arrays, persisted as <dir>/<key>.npz."""

    def __init__(self, cache_dir: Optional[Path] = None):
        self._cache_dir = Path(cache_dir) if cache_dir is not None else None
        self._memory: Dict[str, Dict[str, np.ndarray]] = {}
        self._lock = threading.Lock()
        self.hits = 0
        self.misses = 0

    @property
    def cache_dir(self) -> Optional[Path]:
        return self._cache_dir

    def path_for(self, key: str) -> Optional[Path]:
        if self._cache_dir is None:
            return None
        return self._cache_dir / f"{key}.npz"

    def get(self, key: str) -> Optional[Dict[str, np.ndarray]]:
        with self._lock:
            if key in self._memory:
                self.hits += 1
                return self._memory[key]

        path = self.path_for(key)
        if path is not None and path.exists():
            try:
                with np.load(path, allow_pickle=False) as data:
                    arrays = {name: data[name] for name in data.files}
            except (OSError, ValueError) as e:
                logger.warning("Ignoring unreadable cache entry %s: %s", path.name, e)
                arrays = None
            if arrays is not None:
                with self._lock:
                    self._memory[key] = arrays
                    self.hits += 1
                return arrays

        with self._lock:
            self.misses += 1
        return None

    def put(self, key: str, **arrays: np.ndarray) -> None:
        arrays = {name: np.asarray(value) for name, value in arrays.items()}
        with self._lock:
            self._memory[key] = arrays

        path = self.path_for(key)
        if path is None:
            return
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "wb") as f:
            np.savez(f, **arrays)
        tmp.replace(path)

    def __contains__(self, key: str) -> bool:
        with self._lock:
            if key in self._memory:
                return True
        path = self.path_for(key)
        return path is not None and path.exists()

    def __len__(self) -> int:
        with self._lock:
            return len(self._memory)
