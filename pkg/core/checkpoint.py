"""Checkpoint files: one JSON header line followed by little-endian float64 parameters."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Dict, Mapping, Tuple

import numpy as np

from core.diffcore import MlpSpec, ParamVector
from core.errors import DataError
from core.logger import get_logger
from core.utils import atomic_write_bytes

log = get_logger(__name__)

FORMAT = "instalign-checkpoint"
FORMAT_VERSION = 1
DTYPE = np.dtype("<f8")

NetworkState = Dict[str, Tuple[ParamVector, MlpSpec]]


def save_checkpoint(path: Path, networks: Mapping[str, Tuple[ParamVector, MlpSpec]], meta: Dict[str, Any]) -> Path:
    entries = []
    chunks = []
    offset = 0
    for name in sorted(networks):
        params, spec = networks[name]
        if not params.matches(spec):
            raise DataError(f"checkpoint entry {name!r}: parameters do not match their spec")
        entries.append({
            "name": name,
            "spec": spec.to_dict(),
            "offset": offset,
            "size": params.size,
            "rng_seed": int(params.rng_seed),
        })
        chunks.append(params.values.astype(DTYPE).tobytes())
        offset += params.size
    header = {"format": FORMAT, "version": FORMAT_VERSION, "entries": entries, "meta": meta}
    blob = json.dumps(header, sort_keys=True).encode("utf-8") + b"\n" + b"".join(chunks)
    path = atomic_write_bytes(Path(path), blob)
    log.debug("Checkpoint written: %s (%d parameters)", path, offset)
    return path


def load_checkpoint(path: Path) -> Tuple[NetworkState, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    head, sep, body = raw.partition(b"\n")
    if not sep:
        raise DataError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: unreadable checkpoint header: {exc}") from exc
    if header.get("format") != FORMAT or header.get("version") != FORMAT_VERSION:
        raise DataError(f"{path}: not an {FORMAT} v{FORMAT_VERSION} file")
    total = sum(int(e["size"]) for e in header["entries"])
    if len(body) != total * DTYPE.itemsize:
        raise DataError(f"{path}: expected {total} parameters, found {len(body) / DTYPE.itemsize:g}")
    values = np.frombuffer(body, dtype=DTYPE)
    networks: NetworkState = {}
    for e in header["entries"]:
        spec = MlpSpec.from_dict(e["spec"])
        chunk = values[e["offset"] : e["offset"] + e["size"]].astype(np.float64)
        networks[e["name"]] = (ParamVector(chunk, spec.layer_shapes(), int(e["rng_seed"])), spec)
    return networks, header.get("meta", {})
