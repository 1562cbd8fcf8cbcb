"""Save/load of TinyUNet parameters and optimizer state.

Parameter tensors are stored under ``param/<name>``, optimizer state under
``opt/<name>``, and the epoch counter under ``train/epoch`` so interrupted
trainings can resume bit-exactly (per-epoch RNG streams are derived from the
seed, not serialized).
"""

from __future__ import annotations

import json
from dataclasses import asdict

import numpy as np

from .imgio import FormatError, load_checkpoint, save_checkpoint
from .nn.unet import ArchConfig, TinyUNet


class CheckpointError(Exception):
    pass


def arch_json(config: ArchConfig) -> str:
    return json.dumps(asdict(config), sort_keys=True)


def save_unet(path, net: TinyUNet, opt_state: dict[str, np.ndarray] | None = None,
              epoch: int = 0) -> None:
    tensors = {f"param/{k}": v for k, v in net.named_params().items()}
    if opt_state is not None:
        tensors.update({f"opt/{k}": v for k, v in opt_state.items()})
    tensors["train/epoch"] = np.array([epoch], dtype=np.float32)
    save_checkpoint(path, arch_json(net.config), tensors)


def load_unet(path, expect: ArchConfig | None = None
              ) -> tuple[TinyUNet, dict[str, np.ndarray], int]:
    """Rebuild the network from a checkpoint.

    Returns (net, optimizer_state, epoch). If ``expect`` is given, its
    architecture hash must match the stored one.
    """
    try:
        blob, _, tensors = load_checkpoint(path)
    except FormatError as e:
        raise CheckpointError(str(e)) from e
    stored = json.loads(blob)
    stored["channel_mult"] = tuple(stored["channel_mult"])
    config = ArchConfig(**stored)
    if expect is not None and expect.arch_hash() != config.arch_hash():
        raise CheckpointError(
            f"architecture hash mismatch: expected {expect.arch_hash()[:12]}..., "
            f"checkpoint has {config.arch_hash()[:12]}...")
    net = TinyUNet(config, np.random.default_rng(0))
    params = net.named_params()
    for name, arr in params.items():
        key = f"param/{name}"
        if key not in tensors:
            raise CheckpointError(f"missing tensor {key}")
        if tensors[key].shape != arr.shape:
            raise CheckpointError(
                f"shape mismatch for {key}: {tensors[key].shape} vs {arr.shape}")
        arr[...] = tensors[key]
    opt_state = {k[4:]: v for k, v in tensors.items() if k.startswith("opt/")}
    epoch = int(tensors.get("train/epoch", np.zeros(1))[0])
    return net, opt_state, epoch
