import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from pathflow.core.errors import ConfigError, ParseError, UsageError
from pathflow.core.flow import FlowModel
from pathflow.core.schemas import FlowArchitecture, RunConfig
from pathflow.utils.constants import (
    CHECKPOINT_MAGIC,
    RESOLVED_CONFIG_NAME,
    SAMPLE_MAGIC,
    SAMPLE_VERSION,
    SEED_ENV_VAR,
)

SAMPLE_HEADER = np.dtype([
    ("magic", "S8"),
    ("version", "<u4"),
    ("pad", "<u4"),
    ("rows", "<u8"),
    ("cols", "<u8"),
])


# Run configuration
def parse_override(text: str) -> tuple[list[str], object]:
    """Split `section.key=value`; the value is parsed as YAML so numbers and lists type naturally."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(text, "override must look like section.key=value")
    return key.strip().split("."), yaml.safe_load(raw)


def apply_overrides(raw: dict, overrides: list[str]) -> dict:
    for text in overrides:
        keys, value = parse_override(text)
        node = raw
        for k in keys[:-1]:
            child = node.setdefault(k, {})
            if not isinstance(child, dict):
                raise ConfigError(".".join(keys), f"'{k}' is not a section")
            node = child
        node[keys[-1]] = value
    return raw


def load_run_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """
    Load a YAML run config, apply `--set` overrides and validate it.

    Args:
        path: Config file, or None for all defaults
        overrides: `section.key=value` strings applied in order

    Returns:
        RunConfig: Validated configuration (seeds not yet resolved)

    Raises:
        UsageError: Config file missing
        ConfigError: Unknown key or invalid value, naming the dotted key
    """
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as e:
            raise ConfigError(str(path), f"invalid YAML: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigError(str(path), "top level must be a mapping")
    raw = apply_overrides(raw, overrides or [])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        key = ".".join(str(part) for part in first["loc"]) or "config"
        raise ConfigError(key, first["msg"]) from e


def master_seed(cfg: RunConfig) -> int:
    """Config seed, else NF_SEED (a .env file is honored), else 0."""
    if cfg.seed is not None:
        return cfg.seed
    load_dotenv()
    env = os.getenv(SEED_ENV_VAR)
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError as e:
        raise ConfigError(SEED_ENV_VAR, f"not an integer: {env!r}") from e


def resolve_seeds(cfg: RunConfig) -> RunConfig:
    """Fill every unset section seed from the master seed."""
    seed = master_seed(cfg)
    sections = ("flow", "train", "hmc", "eval", "diagnostics")
    children = np.random.SeedSequence(seed).spawn(len(sections))
    resolved = cfg.model_copy(deep=True)
    resolved.seed = seed
    for name, child in zip(sections, children):
        section = getattr(resolved, name)
        if section.seed is None:
            section.seed = int(child.generate_state(1)[0])
    return resolved


def write_resolved_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / RESOLVED_CONFIG_NAME
    write_yaml(path, cfg.model_dump(mode="json"))
    return path


def write_yaml(path: str | Path, data: dict) -> None:
    Path(path).write_text(yaml.safe_dump(data, sort_keys=False))


def write_csv(df: pd.DataFrame, path: str | Path) -> None:
    df.to_csv(path, index=False, float_format="%.17g")


def read_csv(path: str | Path) -> pd.DataFrame:
    """Inverse of write_csv: floats parse back to the same bits."""
    return pd.read_csv(path, float_precision="round_trip")


# Checkpoints
@dataclass
class Checkpoint:
    model: FlowModel
    target: dict | None = None
    optimizer: dict | None = None
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def save_checkpoint(path: str | Path, model: FlowModel, target: dict | None = None,
                    optimizer: dict | None = None, moments: tuple[np.ndarray, np.ndarray] | None = None) -> Path:
    """
    Write magic line, u64 header length, YAML header, then little-endian f64
    parameters and, with an optimizer section, the Adam moments m and v.
    """
    header = {"arch": model.arch.model_dump(mode="json"), "n_params": model.n_params}
    if target is not None:
        header["target"] = target
    if optimizer is not None:
        if moments is None:
            raise UsageError("optimizer state needs the Adam moments")
        header["optimizer"] = optimizer
    encoded = yaml.safe_dump(header, sort_keys=False).encode()

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)
        fh.write(model.theta.astype("<f8").tobytes())
        if optimizer is not None:
            for moment in moments:
                fh.write(np.asarray(moment, dtype="<f8").tobytes())
    return path


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Read a checkpoint written by `save_checkpoint`.

    Raises:
        UsageError: File missing
        ParseError: Wrong magic, truncated body or malformed header
    """
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"checkpoint not found: {path}")
    blob = path.read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise ParseError(f"{path} is not a checkpoint (bad magic)", line=1)
    offset = len(CHECKPOINT_MAGIC)
    if len(blob) < offset + 8:
        raise ParseError(f"{path}: truncated header")
    (header_len,) = struct.unpack_from("<Q", blob, offset)
    offset += 8
    try:
        header = yaml.safe_load(blob[offset:offset + header_len].decode())
        arch = FlowArchitecture.model_validate(header["arch"])
        n_params = int(header["n_params"])
    except (yaml.YAMLError, UnicodeDecodeError, KeyError, TypeError, ValidationError) as e:
        raise ParseError(f"{path}: malformed header ({e})") from e
    offset += header_len

    optimizer = header.get("optimizer")
    n_vectors = 3 if optimizer is not None else 1
    if len(blob) != offset + 8 * n_params * n_vectors:
        raise ParseError(f"{path}: expected {n_vectors} x {n_params} parameters, body has "
                         f"{len(blob) - offset} bytes")
    vectors = np.frombuffer(blob, dtype="<f8", offset=offset).reshape(n_vectors, n_params).astype(np.float64)
    try:
        model = FlowModel(arch, vectors[0].copy())
    except ValueError as e:
        raise ParseError(f"{path}: {e}") from e
    if optimizer is None:
        return Checkpoint(model=model, target=header.get("target"))
    return Checkpoint(model=model, target=header.get("target"), optimizer=optimizer,
                      m=vectors[1].copy(), v=vectors[2].copy())


# Sample dumps
def save_samples(path: str | Path, samples: np.ndarray) -> Path:
    """32-byte header (magic, version, pad, rows, cols) then a row-major f64 matrix."""
    samples = np.atleast_2d(np.asarray(samples, dtype="<f8"))
    header = np.zeros(1, dtype=SAMPLE_HEADER)
    header[0] = (SAMPLE_MAGIC, SAMPLE_VERSION, 0, samples.shape[0], samples.shape[1])
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header.tobytes())
        fh.write(np.ascontiguousarray(samples).tobytes())
    return path


def load_samples(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"sample dump not found: {path}")
    blob = path.read_bytes()
    if len(blob) < SAMPLE_HEADER.itemsize:
        raise ParseError(f"{path}: truncated header")
    header = np.frombuffer(blob, dtype=SAMPLE_HEADER, count=1)[0]
    if header["magic"] != SAMPLE_MAGIC:
        raise ParseError(f"{path} is not a sample dump (bad magic)")
    if header["version"] != SAMPLE_VERSION:
        raise ParseError(f"{path}: unsupported version {header['version']}")
    rows, cols = int(header["rows"]), int(header["cols"])
    if len(blob) != SAMPLE_HEADER.itemsize + 8 * rows * cols:
        raise ParseError(f"{path}: body does not hold {rows} x {cols} values")
    return np.frombuffer(blob, dtype="<f8", offset=SAMPLE_HEADER.itemsize).reshape(rows, cols).astype(np.float64)
