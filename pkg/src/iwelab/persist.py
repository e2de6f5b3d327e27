"""Artifact files: a raw little-endian binary blob plus a JSON sidecar.

Every stored artifact is a pair ``<base>.json`` / ``<base>.bin``.  The
sidecar records named sections (dtype, shape, byte offset) and free-form
metadata; the blob is the concatenation of the section arrays in the
declared order.  Model blobs follow the layer order weights (row-major)
then bias, so the file doubles as the flat parameter vector.  Round-trips
are bit-exact.

Config hashing: canonical JSON (sorted keys, compact separators) through
SHA-256.  Artifact caches are keyed by these hashes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .data import (AugmentationSpec, Dataset, OODTriggerSet, PartitionKey,
                   TriggerSet)
from .errors import ConfigError
from .nn import ModelParams

_DTYPES = {"float64": "<f8", "int64": "<i8"}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def array_hash(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()


def save_arrays(base, sections: dict, meta: dict, kind: str):
    """Write named arrays to <base>.bin and a sidecar to <base>.json."""
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    index, blob, offset = [], [], 0
    for name, arr in sections.items():
        arr = np.ascontiguousarray(arr)
        dt = str(arr.dtype)
        if dt not in _DTYPES:
            raise ConfigError(f"unsupported dtype {dt} in section {name}")
        raw = arr.astype(_DTYPES[dt]).tobytes()
        index.append({"name": name, "dtype": dt, "shape": list(arr.shape),
                      "offset": offset})
        blob.append(raw)
        offset += len(raw)
    payload = b"".join(blob)
    sidecar = {"format": f"iwelab-{kind}-v1",
               "sections": index,
               "blob_sha256": hashlib.sha256(payload).hexdigest(),
               "meta": meta}
    base.with_suffix(".bin").write_bytes(payload)
    base.with_suffix(".json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))


def load_arrays(base, kind: str):
    base = Path(base)
    try:
        sidecar = json.loads(base.with_suffix(".json").read_text())
    except FileNotFoundError:
        raise ConfigError(f"no artifact at {base}")
    if sidecar.get("format") != f"iwelab-{kind}-v1":
        raise ConfigError(f"{base}: expected a {kind} artifact, got "
                          f"{sidecar.get('format')!r}")
    payload = base.with_suffix(".bin").read_bytes()
    if hashlib.sha256(payload).hexdigest() != sidecar["blob_sha256"]:
        raise ConfigError(f"{base}: blob checksum mismatch")
    sections = {}
    for entry in sidecar["sections"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        sections[entry["name"]] = arr.reshape(shape).astype(entry["dtype"]).copy()
    return sections, sidecar["meta"]


def save_model(base, model: ModelParams, meta: dict | None = None):
    sections = {}
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        sections[f"w{i}"] = w
        sections[f"b{i}"] = b
    m = {"arch": list(model.arch), "activation": model.activation}
    m.update(meta or {})
    save_arrays(base, sections, m, "model")


def load_model(base):
    sections, meta = load_arrays(base, "model")
    arch = tuple(meta["arch"])
    weights = [sections[f"w{i}"] for i in range(len(arch) - 1)]
    biases = [sections[f"b{i}"] for i in range(len(arch) - 1)]
    return ModelParams(arch, weights, biases, meta.get("activation", "relu")), meta


def save_dataset(base, data: Dataset):
    params = {k: v for k, v in data.params.items() if k != "means"}
    save_arrays(base,
                {"train_x": data.train_x, "train_y": data.train_y,
                 "test_x": data.test_x, "test_y": data.test_y,
                 "adversary_idx": data.adversary_idx},
                {"kind": data.kind, "K": data.K, "d": data.d,
                 "seed": data.seed, "params": params},
                "dataset")


def load_dataset(base) -> Dataset:
    s, meta = load_arrays(base, "dataset")
    return Dataset(meta["kind"], meta["K"], meta["d"], s["train_x"], s["train_y"],
                   s["test_x"], s["test_y"], s["adversary_idx"], meta["seed"],
                   dict(meta.get("params", {})))


def save_trigger(base, trigger: TriggerSet):
    save_arrays(base,
                {"inputs": trigger.inputs, "wm_labels": trigger.wm_labels,
                 "base_indices": trigger.base_indices},
                {"source_classes": list(trigger.source_classes),
                 "aug": trigger.spec.to_dict()},
                "trigger")


def load_trigger(base) -> TriggerSet:
    s, meta = load_arrays(base, "trigger")
    return TriggerSet(s["inputs"], s["wm_labels"],
                      tuple(meta["source_classes"]),
                      AugmentationSpec.from_dict(meta["aug"]),
                      s["base_indices"])


def save_ood_trigger(base, ood: OODTriggerSet):
    save_arrays(base, {"inputs": ood.inputs, "labels": ood.labels},
                {"K": ood.K}, "oodtrigger")


def load_ood_trigger(base) -> OODTriggerSet:
    s, meta = load_arrays(base, "oodtrigger")
    return OODTriggerSet(s["inputs"], s["labels"], meta["K"])


def save_key(path, key: PartitionKey):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps({"format": "iwelab-key-v1", "K": key.K,
                                "indices": list(key.indices)}, sort_keys=True))


def load_key(path) -> PartitionKey:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != "iwelab-key-v1":
        raise ConfigError(f"{path}: not a partition key file")
    return PartitionKey(doc["K"], tuple(doc["indices"]))


def dataset_to_csv(data: Dataset, path):
    """Inspection dump: split,row,label,x0..x{d-1}."""
    path = Path(path)
    cols = ",".join(f"x{i}" for i in range(data.d))
    lines = [f"split,row,label,{cols}"]
    for tag in ("train", "test", "adversary"):
        x, y = data.split(tag)
        for i in range(len(y)):
            vals = ",".join(repr(float(v)) for v in x[i])
            lines.append(f"{tag},{i},{int(y[i])},{vals}")
    path.write_text("\n".join(lines) + "\n")


def write_csv(path, header: list, rows: list):
    """Rows are dicts keyed by header names; formatted with repr for floats."""
    def fmt(v):
        if isinstance(v, float):
            return repr(v)
        return str(v)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt(row[h]) for h in header))
    path.write_text("\n".join(lines) + "\n")
