"""Versioned model checkpoints and config files.

A checkpoint bundles the weight tensors with a snapshot of the network
configuration; loading against a different expected configuration is an
explicit error. Config files are flat YAML documents with ``network``
and ``train`` sections mirroring the config dataclass fields.
"""

from __future__ import annotations

import os
from pathlib import Path

import torch
import yaml

from .network import FANet, NetworkConfig

__all__ = [
    "CheckpointConfigError",
    "save_checkpoint",
    "load_checkpoint",
    "load_config_file",
    "save_config_file",
    "apply_overrides",
    "build_configs",
]

CHECKPOINT_VERSION = 1
CONFIG_SECTIONS = ("network", "train")


class CheckpointConfigError(ValueError):
    """Checkpoint contents do not match the expected configuration."""


def save_checkpoint(
    path: str | os.PathLike,
    model: FANet,
    net_cfg: NetworkConfig,
    extra: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "network": net_cfg.to_dict(),
        "state_dict": model.state_dict(),
        "extra": extra or {},
    }
    torch.save(payload, path)


def load_checkpoint(
    path: str | os.PathLike,
    expected: NetworkConfig | None = None,
    device: str = "cpu",
) -> tuple[FANet, NetworkConfig, dict]:
    """Rebuild the model from a checkpoint; returns (model, config, extra).

    The model comes back in evaluation mode on the requested device.
    """
    try:
        payload = torch.load(path, map_location=device, weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise CheckpointConfigError(f"{path}: not a readable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointConfigError(
            f"{path}: unsupported checkpoint format "
            f"(version {payload.get('format_version') if isinstance(payload, dict) else '?'})"
        )
    cfg = NetworkConfig.from_dict(payload["network"])
    if expected is not None and cfg != expected:
        diffs = [
            f"{k}: checkpoint={getattr(cfg, k)!r} expected={getattr(expected, k)!r}"
            for k in cfg.__dataclass_fields__  # type: ignore[attr-defined]
            if getattr(cfg, k) != getattr(expected, k)
        ]
        raise CheckpointConfigError(f"{path}: config mismatch: " + "; ".join(diffs))
    model = FANet(cfg)
    model.load_state_dict(payload["state_dict"])
    model.to(device).eval()
    return model, cfg, payload.get("extra", {})


def load_config_file(path: str | os.PathLike) -> dict:
    """Read a YAML config with optional ``network`` and ``train`` sections."""
    with open(path) as fh:
        doc = yaml.safe_load(fh) or {}
    if not isinstance(doc, dict):
        raise ValueError(f"{path}: config must be a mapping")
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")
    for section in CONFIG_SECTIONS:
        doc.setdefault(section, {})
        if not isinstance(doc[section], dict):
            raise ValueError(f"{path}: section {section!r} must be a mapping")
    return doc


def save_config_file(path: str | os.PathLike, net_cfg, train_cfg) -> None:
    doc = {"network": net_cfg.to_dict(), "train": train_cfg.to_dict()}
    Path(path).write_text(yaml.safe_dump(doc, sort_keys=False))


def apply_overrides(doc: dict, overrides: list[str]) -> dict:
    """Apply ``section.key=value`` strings onto a config document.

    Values are parsed as YAML, so lists and booleans work:
    ``network.base_widths=[16,32,64,128]``.
    """
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ValueError(f"override {item!r} is not of the form key=value")
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in CONFIG_SECTIONS:
            raise ValueError(
                f"override key {key!r} must look like "
                f"{{{'|'.join(CONFIG_SECTIONS)}}}.<field>"
            )
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ValueError(f"override {item!r}: unparseable value ({exc})") from exc
        if isinstance(value, str):
            # YAML leaves scientific notation like 1e-3 as a string.
            for cast in (int, float):
                try:
                    value = cast(value)
                    break
                except ValueError:
                    continue
        doc.setdefault(parts[0], {})[parts[1]] = value
    return doc


def build_configs(doc: dict):
    """Instantiate (NetworkConfig, TrainConfig) from a config document."""
    from .training import TrainConfig

    net = NetworkConfig.from_dict(dict(doc.get("network", {})))
    train = TrainConfig.from_dict(dict(doc.get("train", {})))
    return net, train
