"""Binary checkpoints: config snapshot, weights, optimizer moments, RNG state."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"DSFC"
FORMAT_VERSION = 1


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    iteration: int
    params_state: dict[str, np.ndarray]
    opt_state: dict[str, np.ndarray]
    rng_state: tuple[int, int]  # (seed, counter)


def _write_records(buf: io.BytesIO, state: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        encoded = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        buf.write(struct.pack("<I", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise CheckpointFormatError(f"truncated checkpoint while reading {what}")
    return data


def _read_records(f) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(f, 4, "record count"))
    state: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", _read_exact(f, 4, "name length"))
        name = _read_exact(f, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<I", _read_exact(f, 4, "rank"))
        dims = struct.unpack(f"<{rank}I", _read_exact(f, 4 * rank, "dims")) if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(_read_exact(f, 4 * size, f"data of {name!r}"), dtype="<f4")
        state[name] = data.reshape(dims).copy()
    return state


def save_checkpoint(path: str | Path, ckpt: Checkpoint) -> None:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg = ckpt.config_text.encode("utf-8")
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<Q", ckpt.iteration))
    _write_records(buf, ckpt.params_state)
    _write_records(buf, ckpt.opt_state)
    buf.write(struct.pack("<QQ", *ckpt.rng_state))
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> Checkpoint:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise CheckpointFormatError(f"bad magic in {path}")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        config_text = _read_exact(f, cfg_len, "config").decode("utf-8")
        (iteration,) = struct.unpack("<Q", _read_exact(f, 8, "iteration"))
        params_state = _read_records(f)
        opt_state = _read_records(f)
        seed, counter = struct.unpack("<QQ", _read_exact(f, 16, "rng state"))
        if f.read(1):
            raise CheckpointFormatError(f"trailing bytes in {path}")
    return Checkpoint(config_text=config_text, iteration=int(iteration),
                      params_state=params_state, opt_state=opt_state,
                      rng_state=(int(seed), int(counter)))
