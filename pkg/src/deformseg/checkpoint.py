"""Binary checkpoint archive.

Layout (little-endian): magic "ADSM", version u32 = 1, tensor count u32,
then per tensor: name (u16 length + UTF-8 bytes), rank u8, dims u32 each,
raw float32 data.  The remainder of the file is a UTF-8 config echo.
"""

from __future__ import annotations

import struct

import numpy as np

from .config import load_config, parse_config_text, serialize_config
from .errors import DataError

MAGIC = b"ADSM"
VERSION = 1


def save_checkpoint(path, tensors, config_echo=""):
    """tensors: ordered mapping name -> numpy array (stored as float32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            data = np.asarray(arr, dtype="<f4", order="C")
            nbytes = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nbytes)))
            fh.write(nbytes)
            fh.write(struct.pack("<B", data.ndim))
            for d in data.shape:
                fh.write(struct.pack("<I", d))
            fh.write(data.tobytes())
        fh.write(config_echo.encode("utf-8"))


def load_checkpoint(path):
    """Returns (ordered name -> float32 array, config echo string)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}I", blob, off)
        off += 4 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        tensors[name] = arr.copy()
    echo = blob[off:].decode("utf-8")
    return tensors, echo


def save_model(path, model, bundle=None):
    """Write a model's named tensors plus a config echo."""
    from .config import ConfigBundle, TrainConfig, SceneConfig

    if bundle is None:
        bundle = ConfigBundle(model.cfg, TrainConfig(), SceneConfig())
    save_checkpoint(path, model.state_arrays(), serialize_config(bundle))


def load_model(path):
    """Rebuild a SegModel from a checkpoint; returns (model, bundle)."""
    from .model import SegModel
    from .tensor import default_dtype

    tensors, echo = load_checkpoint(path)
    bundle = parse_config_text(echo)
    model = SegModel(bundle.model)
    expected = dict(model.named_parameters())
    if set(expected) != set(tensors):
        missing = sorted(set(expected) - set(tensors))
        extra = sorted(set(tensors) - set(expected))
        raise DataError(f"{path}: tensor names mismatch (missing {missing[:3]}, extra {extra[:3]})")
    for name, param in expected.items():
        arr = tensors[name].astype(default_dtype())
        if arr.shape != param.data.shape:
            raise DataError(f"{path}: tensor {name} has shape {arr.shape}, "
                            f"expected {param.data.shape}")
        param.data = arr
    return model, bundle
