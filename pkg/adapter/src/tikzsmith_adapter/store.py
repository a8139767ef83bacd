"""Content-addressed image store, bounded and safe for concurrent reads."""

from __future__ import annotations

import hashlib
import threading
from collections import OrderedDict
from typing import Optional


class ImageStore:
    def __init__(self, capacity: int = 64):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._data: OrderedDict[str, bytes] = OrderedDict()
        self._lock = threading.Lock()

    def put(self, data: bytes) -> str:
        image_id = hashlib.sha256(data).hexdigest()
        with self._lock:
            self._data[image_id] = data
            self._data.move_to_end(image_id)
            while len(self._data) > self.capacity:
                self._data.popitem(last=False)
        return image_id

    def get(self, image_id: str) -> Optional[bytes]:
        with self._lock:
            data = self._data.get(image_id)
            if data is not None:
                self._data.move_to_end(image_id)
            return data

    def __len__(self) -> int:
        with self._lock:
            return len(self._data)
