"""
NTV1 text checkpoints.

    ntv1 <n_tensors>
    tensor <name> <rank> <dim...>
    <space-separated values, 17 significant digits>

Tensors are written in ParameterSet order; 17 significant digits make the round trip exact.
A JSON sidecar with the same stem carries everything that is not a tensor.
"""
import json
import logging
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

import numpy as np

from advspeech.errors import FormatError
from advspeech.tensorgrad import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = "ntv1"


def _error(path, message: str) -> FormatError:
    return FormatError(f"{path}: {message}", module="checkpoint")


def dumps(params: ParameterSet) -> str:
    lines = [f"{MAGIC} {len(params)}"]
    for name, tensor in params.items():
        dims = " ".join(str(d) for d in tensor.shape)
        lines.append(f"tensor {name} {tensor.data.ndim} {dims}".rstrip())
        lines.append(" ".join(f"{v:.17g}" for v in tensor.data.reshape(-1)))
    return "\n".join(lines) + "\n"


def loads(text: str, path="<string>") -> ParameterSet:
    lines = text.splitlines()
    if not lines:
        raise _error(path, "empty checkpoint")
    header = lines[0].split()
    if len(header) != 2 or header[0] != MAGIC or not header[1].isdigit():
        raise _error(path, f"bad header line {lines[0]!r}")
    count = int(header[1])
    if len(lines) < 1 + 2 * count:
        raise _error(path, f"header declares {count} tensors but the file is truncated")
    tensors: Dict[str, np.ndarray] = {}
    for i in range(count):
        meta = lines[1 + 2 * i].split()
        if len(meta) < 3 or meta[0] != "tensor":
            raise _error(path, f"bad tensor line {lines[1 + 2 * i]!r}")
        name, rank = meta[1], int(meta[2])
        dims = tuple(int(d) for d in meta[3:])
        if len(dims) != rank:
            raise _error(path, f"tensor {name} declares rank {rank} with dims {dims}")
        values = np.array([float(v) for v in lines[2 + 2 * i].split()], dtype=np.float64)
        expected = int(np.prod(dims)) if dims else 1
        if values.size != expected:
            raise _error(path, f"tensor {name} holds {values.size} values, expected {expected}")
        tensors[name] = values.reshape(dims)
    return ParameterSet(tensors)


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".json")


def write_checkpoint(
    params: ParameterSet, path: Union[str, Path], sidecar: Optional[dict] = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(params))
    if sidecar is not None:
        sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True))
    logger.info(f"Wrote {len(params)} tensors ({params.count()} values) to {path}")
    return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[ParameterSet, dict]:
    path = Path(path)
    if not path.exists():
        raise _error(path, "checkpoint does not exist")
    params = loads(path.read_text(), path)
    side = sidecar_path(path)
    sidecar = json.loads(side.read_text()) if side.exists() else {}
    return params, sidecar
