"""Binary parameter checkpoint container.

Layout: 8-byte magic, u32 format version, u64 header length, a UTF-8
JSON header, then raw little-endian parameter blobs. The header lists
every parameter (name, shape, dtype, byte offset into the data section)
and echoes the network architecture plus the resolved pipeline config
and its SHA-256 hash, so loading can reject mismatched geometry.
"""

import hashlib
import json
import struct

import numpy as np

from .errors import CorruptFile, GeometryError, IoError, UnsupportedFormat
from .unet import CascadeModel, UNet, UNetConfig

MAGIC = b"KSEGCKPT"
VERSION = 1


def config_hash(text):
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def save_checkpoint(path, named_arrays, arch, config_text=""):
    """Write named float arrays plus an architecture/config header."""
    entries = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        arr = np.asarray(arr)
        blob = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes(order="C")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": arr.dtype.name,
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "format_version": VERSION,
            "arch": arch,
            "config_text": config_text,
            "config_hash": config_hash(config_text),
            "params": entries,
        }
    ).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<IQ", VERSION, len(header)))
            fh.write(header)
            for blob in blobs:
                fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write checkpoint {path}: {exc}") from exc


class Checkpoint:
    def __init__(self, arch, config_text, cfg_hash, params):
        self.arch = arch
        self.config_text = config_text
        self.config_hash = cfg_hash
        self.params = params  # name -> ndarray


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 20 or raw[:8] != MAGIC:
        raise UnsupportedFormat(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise UnsupportedFormat(f"{path}: unknown checkpoint version {version}")
    header_end = 20 + header_len
    if len(raw) < header_end:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(raw[20:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header: {exc}") from exc

    data = raw[header_end:]
    params = {}
    for entry in header["params"]:
        dtype = np.dtype(entry["dtype"]).newbyteorder("<")
        end = entry["offset"] + entry["nbytes"]
        if end > len(data):
            raise CorruptFile(f"{path}: parameter {entry['name']} extends past the file")
        arr = np.frombuffer(data[entry["offset"] : end], dtype=dtype)
        params[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return Checkpoint(header["arch"], header["config_text"], header["config_hash"], params)


# ------------------------------------------------------- model adapters


def _cfg_dict(cfg: UNetConfig):
    return {
        "base_filters": cfg.base_filters,
        "levels": cfg.levels,
        "in_channels": cfg.in_channels,
        "out_classes": cfg.out_classes,
        "input_size": cfg.input_size,
        "dropout_rate": cfg.dropout_rate,
    }


def model_arch(model):
    if isinstance(model, CascadeModel):
        return {
            "kind": "cascade",
            "ratio": model.ratio,
            "lowres": _cfg_dict(model.lowres.cfg),
            "highres": _cfg_dict(model.highres.cfg),
        }
    return {"kind": "unet", **_cfg_dict(model.cfg)}


def _named_arrays(model):
    if isinstance(model, CascadeModel):
        return [(name, p.data) for name, p in model.named_parameters()]
    return [(p.name, p.data) for p in model.parameters()]


def save_model(path, model, config_text=""):
    save_checkpoint(path, _named_arrays(model), model_arch(model), config_text)


def build_from_checkpoint(source):
    """Reconstruct a model from a checkpoint path or object."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    arch = ckpt.arch
    rng = np.random.default_rng(0)  # placeholder init, overwritten below
    if arch.get("kind") == "cascade":
        model = CascadeModel(
            UNetConfig(**arch["lowres"]), UNetConfig(**arch["highres"]), arch["ratio"], rng
        )
        named = model.named_parameters()
    elif arch.get("kind") == "unet":
        cfg = {k: v for k, v in arch.items() if k != "kind"}
        model = UNet(UNetConfig(**cfg), rng)
        named = [(p.name, p) for p in model.parameters()]
    else:
        raise GeometryError(f"checkpoint architecture kind {arch.get('kind')!r} unknown")

    for name, tensor in named:
        if name not in ckpt.params:
            raise GeometryError(f"checkpoint is missing parameter {name}")
        stored = ckpt.params[name]
        if tuple(stored.shape) != tensor.data.shape:
            raise GeometryError(
                f"parameter {name}: checkpoint shape {tuple(stored.shape)} "
                f"vs model {tensor.data.shape}"
            )
        tensor.data = stored.astype(tensor.data.dtype)
    return model, ckpt


def check_same_arch(ckpt: Checkpoint, expected_arch):
    if ckpt.arch != expected_arch:
        raise GeometryError(
            f"checkpoint architecture {ckpt.arch} does not match expected {expected_arch}"
        )
