"""Versioned, endian-fixed checkpoints of a group's full search state."""

import json
import logging
import os
import zipfile
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from src.arch_optimizers import AdamState
from src.autodiff import ParamVector
from src.config import config
from src.datasets import MinibatchSampler
from src.exceptions import CheckpointError
from src.learner import LearnerState, NetworkSpec
from src.sgl_engine import GroupState

logger = logging.getLogger(__name__)

META_KEY = "__meta__"


def _little_endian(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array)
    return array.astype(array.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(group: GroupState, path: Union[str, Path], config_hash: str) -> Path:
    """Write `group` atomically; arrays are stored little-endian next to a JSON header."""
    path = Path(path)
    arrays: Dict[str, np.ndarray] = {}
    learners = []
    for learner in group.learners:
        k = learner.index
        arrays[f"learner{k}.arch"] = learner.arch.values
        arrays[f"learner{k}.v"] = learner.v.values
        arrays[f"learner{k}.w"] = learner.w.values
        learners.append({"index": k, "seed": learner.seed, "rng": learner.rng.bit_generator.state})

    arch_states = []
    for k, state in enumerate(group.arch_states):
        if state is None:
            arch_states.append(None)
            continue
        arrays[f"adam{k}.m"] = state.m
        arrays[f"adam{k}.v"] = state.v
        arch_states.append({"t": state.t})

    samplers = {}
    for name, sampler in group.samplers.items():
        state = sampler.state_dict()
        arrays[f"sampler.{name}.order"] = np.asarray(state.pop("order"), dtype=np.int64)
        samplers[name] = state

    meta = {
        "version": config.CHECKPOINT_VERSION,
        "config_hash": config_hash,
        "step": group.step,
        "best_val": group.best_val,
        "stale_evals": group.stale_evals,
        "dtype": str(group.learners[0].v.dtype),
        "learners": learners,
        "arch_states": arch_states,
        "samplers": samplers,
    }
    payload = {name: _little_endian(array) for name, array in arrays.items()}
    payload[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as handle:
        np.savez(handle, **payload)
    os.replace(tmp, path)
    logger.info("checkpoint saved path=%s step=%d", path, group.step)
    return path


def _read(path: Path) -> Dict[str, Any]:
    try:
        with np.load(path, allow_pickle=False) as archive:
            contents = {name: archive[name] for name in archive.files}
    except FileNotFoundError:
        raise CheckpointError(f"{path}: no such checkpoint") from None
    except (zipfile.BadZipFile, ValueError, EOFError, OSError) as exc:
        raise CheckpointError(f"{path}: unreadable or truncated checkpoint ({exc})") from None
    if META_KEY not in contents:
        raise CheckpointError(f"{path}: missing checkpoint header")
    try:
        meta = json.loads(contents.pop(META_KEY).tobytes().decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint header ({exc})") from None
    return {"meta": meta, "arrays": contents}


def load_checkpoint(path: Union[str, Path], net: NetworkSpec, config_hash: str) -> GroupState:
    """Rebuild the group saved at `path`; refuses files written under another configuration."""
    path = Path(path)
    loaded = _read(path)
    meta, arrays = loaded["meta"], loaded["arrays"]
    if meta.get("version") != config.CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {meta.get('version')} is not {config.CHECKPOINT_VERSION}")
    if meta.get("config_hash") != config_hash:
        raise CheckpointError(
            f"{path}: written for config {str(meta.get('config_hash'))[:12]}, current config is {config_hash[:12]}"
        )

    dtype = np.dtype(meta["dtype"])

    def vector(name: str, layout) -> ParamVector:
        if name not in arrays:
            raise CheckpointError(f"{path}: missing array {name}")
        values = arrays[name].astype(dtype)
        try:
            return ParamVector(layout, values, dtype=dtype)
        except ValueError as exc:
            raise CheckpointError(f"{path}: array {name} does not fit the network ({exc})") from None

    learners = []
    for entry in meta["learners"]:
        k = entry["index"]
        rng = np.random.default_rng()
        rng.bit_generator.state = entry["rng"]
        learners.append(LearnerState(
            index=k,
            net=net,
            arch=vector(f"learner{k}.arch", net.arch_layout()),
            v=vector(f"learner{k}.v", net.weight_layout()),
            w=vector(f"learner{k}.w", net.weight_layout()),
            seed=entry["seed"],
            rng=rng,
        ))

    arch_states = []
    for k, entry in enumerate(meta["arch_states"]):
        if entry is None:
            arch_states.append(None)
        else:
            arch_states.append(AdamState(arrays[f"adam{k}.m"].astype(dtype), arrays[f"adam{k}.v"].astype(dtype),
                                         int(entry["t"])))

    samplers = {}
    for name, state in meta["samplers"].items():
        samplers[name] = MinibatchSampler.from_state({**state, "order": arrays[f"sampler.{name}.order"]})

    logger.info("checkpoint loaded path=%s step=%d", path, meta["step"])
    return GroupState(
        learners=learners,
        arch_states=arch_states,
        samplers=samplers,
        step=int(meta["step"]),
        best_val=meta["best_val"],
        stale_evals=int(meta["stale_evals"]),
    )
