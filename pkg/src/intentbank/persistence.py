"""Bit-exact checkpointing: JSON manifest plus raw little-endian float32 payload."""
from __future__ import annotations

import json
import logging
import os

import numpy as np

from .adam import AdamState
from .config import RunConfig
from .extractor import DrParams, SaParams
from .lifecycle import IntentBank
from .model import ModelParams

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class PersistenceError(RuntimeError):
    pass


def _manifest_path(prefix: str) -> str:
    return prefix + ".manifest.json"


def _payload_path(prefix: str) -> str:
    return prefix + ".tensors.bin"


def _ordered_tensors(
    model: ModelParams, banks: dict[int, IntentBank], opt: AdamState
) -> list[tuple[str, np.ndarray]]:
    """Every float tensor to persist, in manifest order."""
    out: list[tuple[str, np.ndarray]] = []
    named = model.named_tensors()
    for name in named:
        out.append((name, named[name]))
    for uid in sorted(banks):
        out.append((f"bank:{uid}", banks[uid].vectors))
    for uid in sorted(banks):
        out.append((f"prev:{uid}", banks[uid].prev_vectors))
    for name in named:
        opt.ensure(name, named[name])
        out.append((f"adam.m:{name}", opt.m[name]))
        out.append((f"adam.v:{name}", opt.v[name]))
    return out


def save_checkpoint(
    model: ModelParams,
    banks: dict[int, IntentBank],
    opt: AdamState,
    cfg: RunConfig,
    span: int,
    prefix: str,
) -> dict:
    """Write `<prefix>.manifest.json` + `<prefix>.tensors.bin`; returns the manifest.

    Partial files are removed on I/O failure.
    """
    tensors = _ordered_tensors(model, banks, opt)
    descriptors = []
    offset = 0
    blobs = []
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        descriptors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "offset": offset,
                "bytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "config": cfg.to_dict(),
        "span": span,
        "extractor": model.kind,
        "adam_t": opt.t,
        "tensors": descriptors,
        "banks": {
            str(uid): {
                "k": banks[uid].k,
                "creation_span": [int(x) for x in banks[uid].creation_span],
                "as_accum": [float(x) for x in banks[uid].as_accum],
                "as_count": [float(x) for x in banks[uid].as_count],
            }
            for uid in sorted(banks)
        },
    }
    mpath, ppath = _manifest_path(prefix), _payload_path(prefix)
    try:
        with open(ppath, "wb") as fh:
            for blob in blobs:
                fh.write(blob)
        with open(mpath, "w") as fh:
            json.dump(manifest, fh, sort_keys=True, separators=(",", ":"))
    except OSError as exc:
        for path in (ppath, mpath):
            try:
                os.unlink(path)
            except OSError:
                pass
        raise PersistenceError(f"failed to write checkpoint {prefix}: {exc}") from exc
    return manifest


def load_checkpoint(
    prefix: str, current_config: RunConfig | None = None
) -> tuple[ModelParams, dict[int, IntentBank], AdamState, dict]:
    """Reconstruct (model, banks, optimizer state) exactly from a checkpoint."""
    mpath, ppath = _manifest_path(prefix), _payload_path(prefix)
    if not os.path.exists(mpath):
        raise PersistenceError(f"missing manifest {mpath}")
    if not os.path.exists(ppath):
        raise PersistenceError(f"missing tensor payload {ppath}")
    with open(mpath) as fh:
        manifest = json.load(fh)
    if manifest.get("format_version") != FORMAT_VERSION:
        raise PersistenceError(
            f"unsupported checkpoint format_version {manifest.get('format_version')}"
        )
    payload = open(ppath, "rb").read()
    expected = sum(t["bytes"] for t in manifest["tensors"])
    if len(payload) != expected:
        raise PersistenceError(
            f"tensor payload length mismatch: have {len(payload)} bytes, "
            f"manifest describes {expected}"
        )

    saved_cfg = manifest["config"]
    if current_config is not None:
        cur = current_config.to_dict()
        diffs = {k: (saved_cfg[k], cur[k]) for k in cur if saved_cfg.get(k) != cur[k]}
        fatal = {k: v for k, v in diffs.items() if k in ("d", "d_a", "extractor")}
        if fatal:
            raise PersistenceError(
                f"checkpoint is shape-incompatible with the current config: {fatal}"
            )
        if diffs:
            log.warning("checkpoint config differs from current config: %s", diffs)

    arrays: dict[str, np.ndarray] = {}
    for desc in manifest["tensors"]:
        lo = desc["offset"]
        hi = lo + desc["bytes"]
        flat = np.frombuffer(payload[lo:hi], dtype="<f4")
        shape = tuple(desc["shape"])
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise PersistenceError(f"shape mismatch for tensor {desc['name']}")
        arrays[desc["name"]] = flat.reshape(shape).copy()

    if "emb" not in arrays:
        raise PersistenceError("checkpoint has no embedding tensor")
    if manifest["extractor"] == "dr":
        model = ModelParams(embeddings=arrays["emb"], dr=DrParams(w=arrays["w"]))
    else:
        wu = {
            int(name.split(":", 1)[1]): arr
            for name, arr in arrays.items()
            if name.startswith("wu:")
        }
        model = ModelParams(
            embeddings=arrays["emb"], sa=SaParams(w1=arrays["w1"], wu=wu)
        )

    banks: dict[int, IntentBank] = {}
    for uid_s, meta in manifest["banks"].items():
        uid = int(uid_s)
        vectors = arrays[f"bank:{uid}"]
        if vectors.shape[1] != meta["k"]:
            raise PersistenceError(f"bank {uid}: K mismatch between payload and manifest")
        banks[uid] = IntentBank(
            user_id=uid,
            vectors=vectors,
            creation_span=np.array(meta["creation_span"], dtype=np.int64),
            as_accum=np.array(meta["as_accum"], dtype=np.float64),
            as_count=np.array(meta["as_count"], dtype=np.float64),
            prev_vectors=arrays[f"prev:{uid}"],
        )

    opt = AdamState(t=manifest["adam_t"])
    for name, arr in arrays.items():
        if name.startswith("adam.m:"):
            opt.m[name.split(":", 1)[1]] = arr
        elif name.startswith("adam.v:"):
            opt.v[name.split(":", 1)[1]] = arr
    return model, banks, opt, manifest
