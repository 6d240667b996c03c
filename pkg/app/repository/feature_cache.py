import json
import os
import tempfile
import threading
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from app.core.exceptions import DataException, StorageException
from app.core.logger import get_logger

logger = get_logger(__name__)

MAGIC = b"DFC1"
INDEX_FILE = "index.jsonl"


def encode_tensor(tensor: torch.Tensor) -> bytes:
    """Magic, uint32 ndim, uint32 dims, then little-endian float32 values"""
    array = tensor.detach().cpu().numpy().astype("<f4", copy=False)
    header = np.array([array.ndim, *array.shape], dtype="<u4")
    return MAGIC + header.tobytes() + np.ascontiguousarray(array).tobytes()


def decode_tensor(payload: bytes) -> torch.Tensor:
    if payload[:4] != MAGIC:
        raise DataException("Feature cache entry has an unknown format")
    ndim = int(np.frombuffer(payload, dtype="<u4", count=1, offset=4)[0])
    shape = tuple(int(d) for d in np.frombuffer(payload, dtype="<u4", count=ndim, offset=8))
    offset = 8 + 4 * ndim
    values = np.frombuffer(payload, dtype="<f4", offset=offset)
    if values.size != int(np.prod(shape)):
        raise DataException("Feature cache entry is truncated")
    return torch.from_numpy(values.reshape(shape).astype(np.float32))


def _atomic_write(path: Path, payload: bytes) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class FeatureCache:
    """
    Immutable on-disk cache of stacked (pre-fusion) diffusion features

    One file per key plus an append-only index with one JSON line per key.
    Writing a key that already exists is a no-op.
    """

    def __init__(self, directory: str):
        self.directory = Path(directory)
        try:
            self.directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise StorageException(f"Cannot create feature cache directory {directory}", errors=str(e))
        self._lock = threading.Lock()
        self._index: Dict[str, str] = self._read_index()

    def _read_index(self) -> Dict[str, str]:
        index_path = self.directory / INDEX_FILE
        if not index_path.exists():
            return {}
        text = index_path.read_text(encoding="utf-8")
        if text and not text.endswith("\n"):
            # an interrupted append leaves a partial last line; later appends start fresh
            with index_path.open("a", encoding="utf-8") as handle:
                handle.write("\n")
        index: Dict[str, str] = {}
        for number, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                index.setdefault(entry["key"], entry["file"])
            except (ValueError, KeyError, TypeError):
                logger.warning(f"Skipping unreadable feature cache index line {number}")
        return index

    def __contains__(self, key: str) -> bool:
        return key in self._index

    def __len__(self) -> int:
        return len(self._index)

    def get(self, key: str) -> Optional[torch.Tensor]:
        filename = self._index.get(key)
        if filename is None:
            return None
        path = self.directory / filename
        if not path.exists():
            logger.warning(f"Feature cache index points at missing file {filename}")
            return None
        return decode_tensor(path.read_bytes())

    def put(self, key: str, tensor: torch.Tensor) -> None:
        with self._lock:
            if key in self._index:
                return
            filename = f"{key}.bin"
            try:
                _atomic_write(self.directory / filename, encode_tensor(tensor))
                with (self.directory / INDEX_FILE).open("a", encoding="utf-8") as handle:
                    handle.write(json.dumps({"key": key, "file": filename}) + "\n")
                self._index[key] = filename
            except OSError as e:
                raise StorageException(f"Cannot write feature cache entry {key}", errors=str(e))
