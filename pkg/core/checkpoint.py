"""Self-describing checkpoint container.

Layout: magic line, 8-byte little-endian header length, JSON header, then the
raw little-endian tensor blocks in the order the header lists them.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ChecksumError, DataIntegrityError, FormatVersionError, ProvenanceError
from .models import ModelBundle, build_model

MAGIC = b"CRITCKPT\n"
FORMAT_VERSION = 1
DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
}
TORCH_DTYPES = {v: k for k, v in DTYPES.items()}


def _blocks(model: torch.nn.Module) -> tuple[list[dict], bytes]:
    entries, chunks = [], []
    for name, tensor in model.state_dict().items():
        code = DTYPES.get(tensor.dtype)
        if code is None:
            raise DataIntegrityError(f"unsupported tensor dtype {tensor.dtype} for {name}")
        array = tensor.detach().cpu().numpy().astype(code, copy=False)
        entries.append({"name": name, "shape": list(array.shape), "dtype": code})
        chunks.append(array.tobytes(order="C"))
    return entries, b"".join(chunks)


def checkpoint_save(bundle: ModelBundle, path: str | Path) -> Path:
    """Write ``bundle``; equal bundles produce byte-identical files."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries, payload = _blocks(bundle.model)
    header = {
        "format_version": FORMAT_VERSION,
        "stage": bundle.stage,
        "arch": bundle.arch,
        "config_hash": bundle.config_hash,
        "metrics": bundle.metrics,
        "extra": bundle.extra,
        "tensors": entries,
        "checksum": hashlib.sha256(payload).hexdigest(),
    }
    encoded = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(encoded)))
        f.write(encoded)
        f.write(payload)
    return path


def read_header(path: str | Path) -> tuple[dict, bytes]:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatVersionError(f"{path} is not a checkpoint")
    offset = len(MAGIC)
    (length,) = struct.unpack("<Q", raw[offset : offset + 8])
    offset += 8
    try:
        header = json.loads(raw[offset : offset + length])
    except ValueError as e:
        raise ChecksumError(f"corrupted checkpoint header in {path}") from e
    return header, raw[offset + length :]


def checkpoint_load(
    path: str | Path,
    expected_config_hash: str | None = None,
    expected_stage: str | None = None,
    force: bool = False,
) -> ModelBundle:
    """Rebuild a bundle; version, stage or hash mismatch is refused unless ``force``."""
    header, payload = read_header(path)
    if hashlib.sha256(payload).hexdigest() != header.get("checksum"):
        raise ChecksumError(f"parameter blocks of {path} fail their checksum")
    if header.get("format_version") != FORMAT_VERSION and not force:
        raise FormatVersionError(f"checkpoint format {header.get('format_version')} != {FORMAT_VERSION}")
    if expected_config_hash is not None and header["config_hash"] != expected_config_hash and not force:
        raise ProvenanceError(
            f"{path} was produced by config {header['config_hash'][:12]}, expected {expected_config_hash[:12]}"
        )
    if expected_stage is not None and header["stage"] != expected_stage and not force:
        raise ProvenanceError(f"{path} holds a {header['stage']} model, expected {expected_stage}")

    model = build_model(header["arch"])
    state, offset = {}, 0
    for entry in header["tensors"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        array = np.frombuffer(payload, dtype=dtype, count=count, offset=offset).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(dtype.newbyteorder("="), copy=True))
        offset += count * dtype.itemsize
    model.load_state_dict(state)
    model.eval()
    return ModelBundle(
        model=model,
        stage=header["stage"],
        config_hash=header["config_hash"],
        metrics=header.get("metrics", {}),
        extra=header.get("extra", {}),
    )
