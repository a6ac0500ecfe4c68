"""Checkpoints, metrics CSV and run directories.

A checkpoint is a single binary file::

    b"CASTERCK" | u32 format version | u32 header length | JSON header | npz payload

The header carries the resolved config text, its hash and the step counters;
the payload holds every network parameter in a fixed order (encoder, actor,
explorer). Checkpoints are for evaluation: replay buffers and optimiser
moments are not stored.
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import time
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from caster import numerics as nx
from caster.agents import SacAgent
from caster.config import TrainConfig, parse_config_text
from caster.encoder import EncoderParams
from caster.rollout import Model
from caster.tasks import ProtocolError

MAGIC = b"CASTERCK"
FORMAT_VERSION = 1
RUNS_ENV = "CASTER_RUNS_DIR"


class CheckpointError(ProtocolError):
    """Unreadable, corrupted or mismatched checkpoint."""


@dataclass
class Checkpoint:
    config: TrainConfig
    encoder: EncoderParams
    actor: SacAgent
    explorer: SacAgent | None
    env_steps: int
    train_steps: int
    path: Path | None = None

    def model(self) -> Model:
        cfg = self.config
        return Model(cfg.family, self.encoder, self.actor.policy,
                     None if self.explorer is None else self.explorer.policy,
                     cfg.explorer, cfg.latent_dim, cfg.horizon, cfg.actor_z)


def _tensors(encoder, actor, explorer) -> list[nx.Tensor]:
    out = encoder.tensors() + actor.tensors()
    if explorer is not None:
        out += explorer.tensors()
    return out


def save_checkpoint(path: str | Path, state) -> Path:
    """Write ``state`` (a TrainerState) atomically to ``path``."""
    path = Path(path)
    tensors = _tensors(state.encoder, state.actor, state.explorer)
    header = json.dumps({
        "config": state.config.to_text(),
        "config_hash": state.config.hash(),
        "env_steps": state.env_steps,
        "train_steps": state.step,
        "num_arrays": len(tensors),
        "checksum": nx.checksum(tensors),
    }, sort_keys=True).encode()
    payload = io.BytesIO()
    np.savez(payload, *[t.data for t in tensors])
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", FORMAT_VERSION, len(header)) + header + payload.getvalue())
    os.replace(tmp, path)
    return path


def _decode(path: Path, blob: bytes):
    from caster.trainer import build_networks

    version, header_len = struct.unpack("<II", blob[len(MAGIC):len(MAGIC) + 8])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: checkpoint format {version} unsupported (expected {FORMAT_VERSION})")
    start = len(MAGIC) + 8
    header = json.loads(blob[start:start + header_len])
    config = parse_config_text(header["config"])
    if config.hash() != header["config_hash"]:
        raise CheckpointError(f"{path}: embedded config hash does not match its config")
    encoder, actor, explorer = build_networks(config, np.random.default_rng(0))
    tensors = _tensors(encoder, actor, explorer)
    with np.load(io.BytesIO(blob[start + header_len:])) as arrays:
        if len(arrays.files) != len(tensors) or header["num_arrays"] != len(tensors):
            raise CheckpointError(f"{path}: parameter count does not match the config")
        for i, t in enumerate(tensors):
            data = arrays[f"arr_{i}"]
            if data.shape != t.data.shape:
                raise CheckpointError(f"{path}: array {i} has shape {data.shape}, expected {t.data.shape}")
            t.data[...] = data
    return (encoder, actor, explorer, tensors), config, header


def load_checkpoint(path: str | Path) -> Checkpoint:
    """Rebuild the networks of a saved run; any damage raises ``CheckpointError``."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    try:
        (encoder, actor, explorer, tensors), config, header = _decode(path, blob)
    except CheckpointError:
        raise
    except (ValueError, KeyError, OSError, struct.error, zipfile.BadZipFile) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint ({type(exc).__name__}: {exc})") from None
    if nx.checksum(tensors) != header["checksum"]:
        raise CheckpointError(f"{path}: parameter checksum mismatch")
    return Checkpoint(config, encoder, actor, explorer, header["env_steps"], header["train_steps"], path)


def format_value(value) -> str:
    """Stable text for CSV cells: shortest round-trip repr for floats."""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return "" if value is None else str(value)


class CsvWriter:
    """Append-only CSV with a fixed header, flushed after every row."""

    def __init__(self, path: str | Path, columns: list[str]):
        self.path = Path(path)
        self.columns = list(columns)
        self._fh = open(self.path, "w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._fh.flush()

    def write(self, row: dict) -> None:
        self._writer.writerow([format_value(row.get(c)) for c in self.columns])
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_csv(path: str | Path, rows: list[dict], columns: list[str] | None = None) -> Path:
    columns = columns or list(dict.fromkeys(k for row in rows for k in row))
    with CsvWriter(path, columns) as writer:
        for row in rows:
            writer.write(row)
    return Path(path)


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def runs_root() -> Path:
    return Path(os.environ.get(RUNS_ENV, "runs"))


def new_run_dir(verb: str, tag: str = "", root: str | Path | None = None) -> Path:
    """Fresh ``<root>/<UTC timestamp>-<verb>[-tag]`` directory, suffixed on collision."""
    root = runs_root() if root is None else Path(root)
    stamp = time.strftime("%Y%m%d-%H%M%S", time.gmtime())
    base = f"{stamp}-{verb}" + (f"-{tag}" if tag else "")
    for attempt in range(1000):
        path = root / (base if attempt == 0 else f"{base}-{attempt}")
        try:
            path.mkdir(parents=True, exist_ok=False)
            return path
        except FileExistsError:
            continue
    raise OSError(f"could not create a unique run directory under {root}")
