"""Small file and seeding helpers shared by the pipeline stages."""

from __future__ import annotations

import contextlib
import json
import os
import tempfile
import zlib
from pathlib import Path
from typing import Any, Iterator

import numpy as np


def stage_seed(root_seed: int, stage: str) -> int:
    """Derive a deterministic 32-bit seed for a named stage from the root seed."""
    seq = np.random.SeedSequence([int(root_seed) & 0xFFFFFFFF, zlib.crc32(stage.encode())])
    return int(seq.generate_state(1)[0])


@contextlib.contextmanager
def atomic_open(path: str | os.PathLike, mode: str = "w") -> Iterator[Any]:
    """Write to a temp file beside ``path`` and rename it into place on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, mode, **({} if "b" in mode else {"encoding": "utf-8", "newline": ""})) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


def write_json(path: str | os.PathLike, payload: Any) -> None:
    with atomic_open(path) as fh:
        json.dump(payload, fh, indent=2, sort_keys=False)
        fh.write("\n")


def array_digest(*arrays: np.ndarray) -> str:
    """Hex digest of the raw bytes of one or more arrays (dtype and shape included)."""
    import hashlib

    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
