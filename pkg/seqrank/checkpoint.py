"""
DSQ1 checkpoint format

Layout::

    DSQ1\\n
    <count>\\n
    <name> <dtype> <extent>x<extent>...\\n      (count lines, sorted by name)
    <payload bytes>                          (little-endian, row-major, same order)

``dtype`` is ``f4`` or ``f8``. Round-trips are bit-exact.
"""

import logging
from pathlib import Path
from typing import Dict, Mapping, Union

import numpy as np

from .exceptions import CheckpointError
from .numerics import ParameterSet

logger = logging.getLogger(__name__)

MAGIC = b"DSQ1"

_DTYPES = {'f4': np.dtype('<f4'), 'f8': np.dtype('<f8')}


def _code_for(array: np.ndarray) -> str:
    if array.dtype == np.float32:
        return 'f4'
    if array.dtype == np.float64:
        return 'f8'
    raise CheckpointError(f"unsupported dtype {array.dtype} in checkpoint")


def save_checkpoint(path: Union[str, Path], params: Union[ParameterSet, Mapping[str, np.ndarray]]) -> Path:
    state = params.state_dict() if isinstance(params, ParameterSet) else dict(params)
    names = sorted(state)
    header = [f"{len(names)}"]
    for name in names:
        array = state[name]
        if not array.shape:
            raise CheckpointError(f"parameter '{name}' is a scalar; checkpoints hold arrays")
        header.append(f"{name} {_code_for(array)} {'x'.join(str(n) for n in array.shape)}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as handle:
        handle.write(MAGIC + b"\n")
        handle.write(("\n".join(header) + "\n").encode('ascii'))
        for name in names:
            array = state[name]
            handle.write(np.ascontiguousarray(array, dtype=_DTYPES[_code_for(array)]).tobytes(order='C'))
    logger.info(f"Wrote checkpoint {path} ({len(names)} parameters)")
    return path


def load_checkpoint(path: Union[str, Path]) -> Dict[str, np.ndarray]:
    """Read a DSQ1 file into a name -> array mapping (native byte order)."""
    path = Path(path)
    with open(path, 'rb') as handle:
        blob = handle.read()
    if not blob.startswith(MAGIC + b"\n"):
        raise CheckpointError(f"{path}: missing DSQ1 magic")
    offset = len(MAGIC) + 1

    def next_line() -> str:
        nonlocal offset
        end = blob.find(b"\n", offset)
        if end < 0:
            raise CheckpointError(f"{path}: truncated header")
        line = blob[offset:end].decode('ascii')
        offset = end + 1
        return line

    try:
        count = int(next_line())
    except ValueError:
        raise CheckpointError(f"{path}: malformed parameter count") from None
    entries = []
    for _ in range(count):
        fields = next_line().split(' ')
        if len(fields) != 3 or fields[1] not in _DTYPES:
            raise CheckpointError(f"{path}: malformed header line {' '.join(fields)!r}")
        shape = tuple(int(n) for n in fields[2].split('x'))
        entries.append((fields[0], _DTYPES[fields[1]], shape))

    state: Dict[str, np.ndarray] = {}
    for name, dtype, shape in entries:
        nbytes = dtype.itemsize * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path}: payload for '{name}' is truncated")
        array = np.frombuffer(blob, dtype=dtype, count=int(np.prod(shape)), offset=offset)
        state[name] = array.reshape(shape).astype(dtype.newbyteorder('='))
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes after payload")
    return state
