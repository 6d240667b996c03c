import hashlib
from typing import Iterable, Tuple

import numpy as np
import torch


def tensor_digest(tensor: torch.Tensor) -> str:
    """SHA-256 over dtype, shape and raw bytes of a tensor"""
    array = tensor.detach().cpu().contiguous().numpy()
    digest = hashlib.sha256()
    digest.update(str(array.dtype).encode())
    digest.update(str(tuple(array.shape)).encode())
    digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def named_tensors_checksum(named: Iterable[Tuple[str, torch.Tensor]]) -> str:
    """Order-independent checksum over (name, tensor) pairs"""
    digest = hashlib.sha256()
    for name, tensor in sorted(named, key=lambda item: item[0]):
        digest.update(name.encode())
        digest.update(tensor_digest(tensor).encode())
    return digest.hexdigest()


def module_checksum(module: torch.nn.Module) -> str:
    return named_tensors_checksum(module.state_dict().items())


def make_run_id(config_hash: str, checkpoint_digest: str, targets: Iterable[str] = ()) -> str:
    """Short git-style identifier of (config, checkpoint, evaluated datasets)"""
    digest = hashlib.sha1()
    for part in (config_hash, checkpoint_digest, *sorted(targets)):
        digest.update(part.encode("utf-8"))
        digest.update(b"\0")
    return digest.hexdigest()[:12]


def file_digest(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()
