"""Binary file formats and atomic writes.

Two little-endian binary formats:

SPEB embedding container (one stimulus):
    magic "SPEB" | u32 version=1 | u32 n_layers | u32 n_frames | u32 dim
    then n_layers*n_frames*dim float32 values, layer-major, frame-second,
    feature-innermost. Exact length is enforced; partial files are rejected.

SPFM model checkpoint:
    magic "SPFM" | u32 version=1 | u32 header_len | header JSON
    then the sections the header's table points at: "weights" (every
    parameter as float32 in declared order) and "masks" (every boolean mask
    buffer bit-packed in declared order). The header records the config and
    the ordered (name, shape) list for both sections.

Prune-event logs are JSON lines, one event per line. All writers go through
a temp-file + rename so readers never observe partial files.
"""

import json
import os
from pathlib import Path
import struct
import tempfile

import numpy as np
import torch

from speatforge.compression import PruneEvent
from speatforge.model import ModelConfig, TransformerModel, resolve_dtype

SPEB_MAGIC = b"SPEB"
SPFM_MAGIC = b"SPFM"
SPEB_VERSION = 1
SPFM_VERSION = 1
_SPEB_HEADER = struct.Struct("<4sIIII")


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via temp file + rename in the destination directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# SPEB embedding containers
# ---------------------------------------------------------------------------

def write_embedding(path, layers) -> None:
    """Write per-layer (n_frames x dim) matrices as one SPEB container."""
    tensor = np.asarray(layers, dtype=np.float32)
    if tensor.ndim == 2:
        tensor = tensor[None, :, :]
    if tensor.ndim != 3:
        raise ValueError(f"expected (n_layers, n_frames, dim), got shape {tensor.shape}")
    n_layers, n_frames, dim = tensor.shape
    if max(n_layers, n_frames, dim) >= 2**32:
        raise ValueError("dimension overflow: shape does not fit in u32 fields")
    header = _SPEB_HEADER.pack(SPEB_MAGIC, SPEB_VERSION, n_layers, n_frames, dim)
    payload = np.ascontiguousarray(tensor, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_embedding(path) -> np.ndarray:
    """Read a SPEB container into a (n_layers, n_frames, dim) float32 array."""
    data = Path(path).read_bytes()
    if len(data) < _SPEB_HEADER.size:
        raise ValueError(f"truncated_container: {path} is shorter than the header")
    magic, version, n_layers, n_frames, dim = _SPEB_HEADER.unpack_from(data)
    if magic != SPEB_MAGIC:
        raise ValueError(f"bad_magic: {path} does not start with {SPEB_MAGIC!r}")
    if version != SPEB_VERSION:
        raise ValueError(f"unsupported_version: {version}")
    expected = _SPEB_HEADER.size + 4 * n_layers * n_frames * dim
    if len(data) != expected:
        raise ValueError(
            f"truncated_container: expected {expected} bytes, found {len(data)}"
        )
    flat = np.frombuffer(data, dtype="<f4", offset=_SPEB_HEADER.size)
    return flat.reshape(n_layers, n_frames, dim).copy()


# ---------------------------------------------------------------------------
# SPFM model checkpoints
# ---------------------------------------------------------------------------

def _mask_buffers(model: TransformerModel):
    for name, buf in model.named_buffers():
        if buf.dtype == torch.bool:
            yield name, buf


def save_checkpoint(path, model: TransformerModel) -> None:
    params = list(model.named_parameters())
    masks = list(_mask_buffers(model))
    weights_blob = b"".join(
        np.ascontiguousarray(p.detach().numpy(), dtype="<f4").tobytes()
        for _, p in params
    )
    mask_bits = np.concatenate(
        [m.numpy().astype(np.uint8).reshape(-1) for _, m in masks]
    )
    masks_blob = np.packbits(mask_bits).tobytes()
    header = {
        "config": model.config.to_dict(),
        "params": [[name, list(p.shape)] for name, p in params],
        "masks": [[name, list(m.shape)] for name, m in masks],
        "sections": {
            "weights": [0, len(weights_blob)],
            "masks": [len(weights_blob), len(masks_blob)],
        },
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    prefix = SPFM_MAGIC + struct.pack("<II", SPFM_VERSION, len(header_bytes))
    atomic_write_bytes(path, prefix + header_bytes + weights_blob + masks_blob)


def load_checkpoint(path, dtype=None) -> TransformerModel:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != SPFM_MAGIC:
        raise ValueError(f"bad_magic: {path} is not an SPFM checkpoint")
    version, header_len = struct.unpack_from("<II", data, 4)
    if version != SPFM_VERSION:
        raise ValueError(f"unsupported_version: {version}")
    header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    body = data[12 + header_len :]
    w_off, w_len = header["sections"]["weights"]
    m_off, m_len = header["sections"]["masks"]
    if len(body) != w_len + m_len:
        raise ValueError("truncated_checkpoint: section table does not match file size")
    model = TransformerModel(ModelConfig.from_dict(header["config"]))
    weights = np.frombuffer(body, dtype="<f4", count=w_len // 4, offset=w_off)
    cursor = 0
    state = dict(model.named_parameters())
    with torch.no_grad():
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            chunk = weights[cursor : cursor + n].reshape(shape)
            state[name].copy_(torch.as_tensor(chunk.copy()))
            cursor += n
    bits = np.unpackbits(
        np.frombuffer(body, dtype=np.uint8, count=m_len, offset=m_off)
    )
    cursor = 0
    buffers = dict(_mask_buffers(model))
    for name, shape in header["masks"]:
        n = int(np.prod(shape)) if shape else 1
        chunk = bits[cursor : cursor + n].reshape(shape).astype(bool)
        buffers[name].copy_(torch.as_tensor(chunk))
        cursor += n
    model.apply_masks()
    return model.to(resolve_dtype(dtype))


# ---------------------------------------------------------------------------
# prune-event logs
# ---------------------------------------------------------------------------

def write_event_log(path, events) -> None:
    lines = "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in events)
    atomic_write_text(path, lines)


def read_event_log(path) -> list:
    events = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            events.append(PruneEvent.from_dict(json.loads(line)))
    return events
