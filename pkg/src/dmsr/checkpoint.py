"""Binary checkpoint files.

Layout: magic "DMSR", u16 format version, u32 entry count, then per entry a
length-prefixed name, dtype code, shape and little-endian payload; a UTF-8
`key = value` metadata block trails the table. Writes are atomic and the
byte stream is a pure function of (parameters, optimizer state, metadata),
so identical runs produce identical files.
"""

import struct

import numpy as np

from .imageio import atomic_write

MAGIC = b"DMSR"
VERSION = 1
_DTYPES = {0: "<f8", 1: "<f4"}
_DTYPE_CODES = {"float64": 0, "float32": 1}


class CheckpointError(ValueError):
    pass


def _pack_entry(name, arr):
    nb = name.encode()
    code = _DTYPE_CODES[str(arr.dtype)]
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    head += struct.pack("<Q", len(payload))
    return head + payload


def save_checkpoint(path, arrays, metadata):
    """arrays: ordered {name: ndarray}; metadata: {str: str|int|float}."""
    blob = [MAGIC, struct.pack("<HI", VERSION, len(arrays))]
    for name, arr in arrays.items():
        blob.append(_pack_entry(name, np.asarray(arr)))
    meta = "".join(f"{k} = {_fmt(v)}\n" for k, v in metadata.items()).encode()
    blob.append(struct.pack("<I", len(meta)))
    blob.append(meta)
    atomic_write(path, b"".join(blob))


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what} "
                                  f"at byte {self.pos}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path):
    """Returns (arrays: {name: ndarray}, metadata: {str: str})."""
    r = _Reader(open(path, "rb").read())
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"{path}: not a DMSR checkpoint")
    version, count = r.unpack("<HI", "version/count")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    arrays = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H", "name length")
        name = r.take(nlen, "name").decode()
        code, ndim = r.unpack("<BB", "dtype/ndim")
        if code not in _DTYPES:
            raise CheckpointError(f"{path}: unknown dtype code {code}")
        shape = r.unpack(f"<{ndim}I", "shape") if ndim else ()
        (nbytes,) = r.unpack("<Q", "payload size")
        payload = r.take(nbytes, f"payload of {name}")
        arrays[name] = np.frombuffer(payload, dtype=_DTYPES[code]).reshape(shape).copy()
    (mlen,) = r.unpack("<I", "metadata length")
    metadata = {}
    for line in r.take(mlen, "metadata").decode().splitlines():
        if not line.strip():
            continue
        if " = " not in line:
            raise CheckpointError(f"{path}: bad metadata line {line!r}")
        k, v = line.split(" = ", 1)
        metadata[k] = v
    return arrays, metadata


# ---------------------------------------------------------------------------
# model-level helpers


def pack_state(model, optimizer=None, metadata=None):
    """Flatten model parameters (and optimizer moments) into the entry table."""
    arrays = {name: p.data for name, p in model.named_parameters()}
    meta = dict(metadata or {})
    meta.update({k: v for k, v in model.cfg.to_flat_dict().items()})
    if optimizer is not None:
        for name, _ in optimizer.named_params:
            arrays[f"optim.m.{name}"] = optimizer.m[name]
            arrays[f"optim.v.{name}"] = optimizer.v[name]
        meta["optim.step"] = optimizer.step_count
        meta["optim.lr"] = repr(optimizer.lr)
        meta["optim.beta1"] = repr(optimizer.beta1)
        meta["optim.beta2"] = repr(optimizer.beta2)
        meta["optim.eps"] = repr(optimizer.eps)
    return arrays, meta


def config_from_metadata(metadata):
    from .model import ModelConfig
    kwargs = {}
    for f in ("backbone",):
        kwargs[f] = metadata[f"model.{f}"]
    for f in ("num_blocks", "embed_dim", "window", "heads", "layers_per_block",
              "k", "scale", "resample_factor"):
        kwargs[f] = int(metadata[f"model.{f}"])
    kwargs["mlp_ratio"] = float(metadata["model.mlp_ratio"])
    kwargs["position_bias"] = metadata.get("model.position_bias", "False") == "True"
    return ModelConfig(**kwargs)


def restore_model(path):
    """Rebuild (model, arrays, metadata) from a checkpoint file."""
    from .model import DmsrModel
    arrays, metadata = load_checkpoint(path)
    cfg = config_from_metadata(metadata)
    model = DmsrModel(cfg, seed=0)
    for name, p in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        if arrays[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: parameter {name} has shape "
                                  f"{arrays[name].shape}, expected {p.data.shape}")
        p.data = arrays[name].astype(np.float64)
    return model, arrays, metadata


def restore_optimizer(model, arrays, metadata):
    from .train import Adam
    opt = Adam(model.named_parameters(),
               lr=float(metadata.get("optim.lr", "0.001")),
               beta1=float(metadata.get("optim.beta1", "0.9")),
               beta2=float(metadata.get("optim.beta2", "0.999")),
               eps=float(metadata.get("optim.eps", "1e-08")))
    opt.step_count = int(metadata.get("optim.step", "0"))
    for name, p in opt.named_params:
        m = arrays.get(f"optim.m.{name}")
        v = arrays.get(f"optim.v.{name}")
        if m is not None:
            opt.m[name] = m.astype(np.float64)
        if v is not None:
            opt.v[name] = v.astype(np.float64)
    return opt
