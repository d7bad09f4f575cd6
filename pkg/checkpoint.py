"""
Checkpoint container and model/optimizer persistence.

File layout:
    8 bytes   magic b"REGFCKPT"
    8 bytes   little-endian uint64 manifest length
    n bytes   manifest JSON (UTF-8, sorted keys): version, dtype, tensor
              names/shapes/byte offsets, free-form metadata
    rest      concatenated little-endian tensor data

Exported model checkpoints store 32-bit floats. The resume state written by the
trainer stores 64-bit floats so a resumed run continues bit-identically.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence

import numpy as np

from errors import CheckpointError
from model import LoraAdapter, ModelConfig, ModelParams
from tensor import AdamState, Tensor
from utils import atomic_write_bytes

logger = logging.getLogger(__name__)

MAGIC = b"REGFCKPT"
FORMAT_VERSION = 1
DTYPES = {"float32": "<f4", "float64": "<f8"}


@dataclass
class Checkpoint:
    """In-memory image of one checkpoint file."""
    tensors: Dict[str, np.ndarray]
    metadata: dict = field(default_factory=dict)
    dtype: str = "float32"
    version: int = FORMAT_VERSION


def _dump_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def serialize(ckpt: Checkpoint) -> bytes:
    if ckpt.dtype not in DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype: {ckpt.dtype}")
    np_dtype = np.dtype(DTYPES[ckpt.dtype])
    entries, chunks, offset = [], [], 0
    for name, array in ckpt.tensors.items():
        raw = np.ascontiguousarray(array, dtype=np_dtype).tobytes()
        entries.append({"name": name, "shape": list(np.shape(array)), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = _dump_json({
        "version": ckpt.version,
        "dtype": ckpt.dtype,
        "tensors": entries,
        "metadata": ckpt.metadata,
    })
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def deserialize(payload: bytes) -> Checkpoint:
    if payload[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    header = len(MAGIC) + 8
    if len(payload) < header:
        raise CheckpointError("truncated checkpoint header")
    (manifest_len,) = struct.unpack("<Q", payload[len(MAGIC):header])
    try:
        manifest = json.loads(payload[header:header + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint manifest: {e}") from None
    version = manifest.get("version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version} (supported: {FORMAT_VERSION})")
    dtype = manifest.get("dtype")
    if dtype not in DTYPES:
        raise CheckpointError(f"unsupported checkpoint dtype: {dtype}")

    blob = payload[header + manifest_len:]
    tensors = {}
    for entry in manifest["tensors"]:
        start, end = entry["offset"], entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointError(f"tensor '{entry['name']}' runs past the end of the file")
        array = np.frombuffer(blob[start:end], dtype=DTYPES[dtype]).astype(dtype)
        tensors[entry["name"]] = array.reshape(entry["shape"])
    return Checkpoint(tensors, manifest.get("metadata", {}), dtype, version)


def save(path: str, ckpt: Checkpoint):
    atomic_write_bytes(path, serialize(ckpt))
    logger.debug("Wrote %s (%d tensors, %s)", path, len(ckpt.tensors), ckpt.dtype)


def load(path: str) -> Checkpoint:
    if not os.path.exists(path):
        raise CheckpointError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        return deserialize(f.read())


# ------------------------------
# Models
# ------------------------------

def params_digest(params: ModelParams) -> str:
    """sha256 over names and 32-bit bytes of the base parameters."""
    h = hashlib.sha256()
    for name, t in params.tensors.items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()


def model_checkpoint(params: ModelParams, step: int = 0, dtype: str = "float32",
                     base_path: Optional[str] = None, corpus: Optional[Mapping] = None) -> Checkpoint:
    """
    Checkpoint image of a model.

    A LoRA-adapted model stores only its adapter tensors plus the digest (and
    path) of the base parameters they were trained against. `corpus` is the
    identity of the training corpus (`SyntheticCorpus.identity()`).
    """
    metadata = {"config": params.config.to_dict(), "step": int(step)}
    if corpus is not None:
        metadata["corpus"] = dict(corpus)
    if params.lora is not None:
        metadata.update({
            "kind": "lora",
            "lora_rank": params.lora.rank,
            "lora_alpha": params.lora.alpha,
            "base_sha256": params_digest(params),
            "base_checkpoint": base_path,
        })
        tensors = {name: t.data for name, t in params.lora.tensors.items()}
    else:
        metadata["kind"] = "model"
        tensors = {name: t.data for name, t in params.tensors.items()}
    return Checkpoint(tensors, metadata, dtype)


def save_model(path: str, params: ModelParams, step: int = 0, base_path: Optional[str] = None,
               corpus: Optional[Mapping] = None):
    save(path, model_checkpoint(params, step, "float32", base_path, corpus))
    logger.info("Saved %s checkpoint %s (step %d)", "adapter" if params.lora else "model", path, step)


def params_from_checkpoint(ckpt: Checkpoint) -> ModelParams:
    if ckpt.metadata.get("kind") != "model":
        raise CheckpointError(f"expected a model checkpoint, got kind {ckpt.metadata.get('kind')!r}")
    config = ModelConfig.from_dict(ckpt.metadata["config"])
    return ModelParams(config, {name: Tensor(array) for name, array in ckpt.tensors.items()})


def apply_adapter(params: ModelParams, ckpt: Checkpoint) -> ModelParams:
    """Attach stored adapter tensors after checking the base digest."""
    meta = ckpt.metadata
    if meta.get("kind") != "lora":
        raise CheckpointError(f"expected an adapter checkpoint, got kind {meta.get('kind')!r}")
    digest = params_digest(params)
    if digest != meta["base_sha256"]:
        raise CheckpointError("adapter was trained against different base parameters "
                              f"(expected sha256 {meta['base_sha256'][:12]}, got {digest[:12]})")
    adapter = LoraAdapter(rank=int(meta["lora_rank"]), alpha=float(meta["lora_alpha"]))
    for name, array in ckpt.tensors.items():
        adapter.tensors[name] = Tensor(array, requires_grad=True, name=name)
    params.lora = adapter
    params.frozen = True
    for t in params.tensors.values():
        t.requires_grad = False
    return params


def load_model(path: str, base_path: Optional[str] = None) -> ModelParams:
    """
    Load a model checkpoint; adapter checkpoints pull in their base model from
    `base_path` or the path recorded at save time.
    """
    ckpt = load(path)
    if ckpt.metadata.get("kind") == "lora":
        base_path = base_path or ckpt.metadata.get("base_checkpoint")
        if not base_path:
            raise CheckpointError(f"{path} is an adapter checkpoint with no base model path")
        return apply_adapter(load_model(base_path), ckpt)
    return params_from_checkpoint(ckpt)


def checkpoint_step(path: str) -> int:
    return int(load(path).metadata.get("step", 0))


def check_corpus(path: str, identity: Mapping):
    """
    Refuse a corpus whose token mapping differs from the one `path` was trained on.

    Checkpoints written without a corpus record pass unchecked.

    Raises:
        CheckpointError: the recorded identity differs from `identity`
    """
    recorded = load(path).metadata.get("corpus")
    if recorded is not None and recorded != dict(identity):
        raise CheckpointError(f"{path} was trained on a different corpus "
                              f"(recorded {json.dumps(recorded, sort_keys=True)}, "
                              f"given {json.dumps(dict(identity), sort_keys=True)})")


# ------------------------------
# Averaging
# ------------------------------

def average_tensors(tensor_sets: Sequence[Mapping[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    """Arithmetic mean per tensor name; all sets must share names and shapes."""
    if not tensor_sets:
        raise CheckpointError("nothing to average")
    names = list(tensor_sets[0])
    for other in tensor_sets[1:]:
        if list(other) != names:
            raise CheckpointError("checkpoints to average hold different tensors")
    averaged = {}
    for name in names:
        total = np.zeros(np.shape(tensor_sets[0][name]), dtype=np.float64)
        for tensors in tensor_sets:
            if np.shape(tensors[name]) != total.shape:
                raise CheckpointError(f"tensor '{name}' changes shape across checkpoints")
            total += np.asarray(tensors[name], dtype=np.float64)
        averaged[name] = total / len(tensor_sets)
    return averaged


def average_checkpoints(paths: Sequence[str], out_path: str) -> Checkpoint:
    """Write the mean of several same-kind checkpoints; metadata follows the last one."""
    ckpts = [load(p) for p in paths]
    averaged = Checkpoint(average_tensors([c.tensors for c in ckpts]),
                          dict(ckpts[-1].metadata), ckpts[-1].dtype)
    averaged.metadata["averaged_from"] = [os.path.basename(p) for p in paths]
    save(out_path, averaged)
    logger.info("Averaged %d checkpoints into %s", len(paths), out_path)
    return averaged


# ------------------------------
# Resume state
# ------------------------------

def save_training_state(path: str, params: ModelParams, optimizer: AdamState, step: int,
                        seed: int, extra: Optional[dict] = None):
    """
    Everything a resumed run needs, in 64-bit precision: trainable tensors,
    Adam moments, step counter and the seed the per-step RNG streams derive from.
    """
    tensors = {f"param.{name}": t.data for name, t in params.tensors.items()}
    if params.lora is not None:
        tensors.update({f"lora.{name}": t.data for name, t in params.lora.tensors.items()})
    for name in sorted(optimizer.m):
        tensors[f"adam.m.{name}"] = optimizer.m[name]
        tensors[f"adam.v.{name}"] = optimizer.v[name]
    metadata = {
        "kind": "state",
        "config": params.config.to_dict(),
        "step": int(step),
        "rng_state": {"seed": int(seed), "step": int(step)},
        "optimizer": {"step": optimizer.step, "beta1": optimizer.beta1,
                      "beta2": optimizer.beta2, "epsilon": optimizer.epsilon},
        "lora": ({"rank": params.lora.rank, "alpha": params.lora.alpha} if params.lora else None),
    }
    metadata.update(extra or {})
    save(path, Checkpoint(tensors, metadata, "float64"))


def load_training_state(path: str, params: ModelParams, optimizer: AdamState) -> dict:
    """Restore params (in place) and optimizer from a resume state; returns metadata."""
    ckpt = load(path)
    meta = ckpt.metadata
    if meta.get("kind") != "state":
        raise CheckpointError(f"{path} is not a training state")
    if meta["config"] != params.config.to_dict():
        raise CheckpointError("training state was written for a different model config")
    for name, t in params.tensors.items():
        t.data[...] = ckpt.tensors[f"param.{name}"]
    if params.lora is not None:
        for name, t in params.lora.tensors.items():
            t.data[...] = ckpt.tensors[f"lora.{name}"]
    opt = meta["optimizer"]
    optimizer.step = int(opt["step"])
    optimizer.beta1, optimizer.beta2, optimizer.epsilon = opt["beta1"], opt["beta2"], opt["epsilon"]
    optimizer.m, optimizer.v = {}, {}
    for key, array in ckpt.tensors.items():
        if key.startswith("adam.m."):
            optimizer.m[key[len("adam.m."):]] = array.copy()
        elif key.startswith("adam.v."):
            optimizer.v[key[len("adam.v."):]] = array.copy()
    return meta


def list_periodic(out_dir: str) -> List[str]:
    """Periodic checkpoints in step order."""
    names = sorted(n for n in os.listdir(out_dir) if n.startswith("checkpoint_") and n[11:18].isdigit())
    return [os.path.join(out_dir, n) for n in names]
