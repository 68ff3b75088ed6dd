"""Versioned binary checkpoints for trained models and surrogates.

Layout: ``MAGIC`` | uint32 format version | uint64 header length | JSON header
| raw little-endian float64 arrays.  The header lists every array with its
offset and shape, plus kernels, scalars and free-form metadata.  Nothing
time-dependent is written, so equal models give equal files.
"""
import json
import struct
from dataclasses import asdict

import numpy as np

from ._io import atomic_write_bytes, canonical_json, sha256_bytes
from .kernels import VariationalLatentPosterior, kernel_from_dict, kernel_to_dict
from .optim import OptimSettings
from .pipeline import JointSurrogate, PcaInputModel, PcaSurrogate, SurrogateSettings, TwoModelSurrogate
from .sgplvm import SgplvmModel, collapsed_bound

MAGIC = b"STRUCTGP"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.arrays, self.chunks, self.offset = {}, [], 0

    def add(self, name, a):
        a = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
        self.arrays[name] = {"offset": self.offset, "shape": list(a.shape)}
        raw = a.tobytes()
        self.chunks.append(raw)
        self.offset += len(raw)
        return name


def _model_entry(w, prefix, m):
    w.add(f"{prefix}.y", m.y)
    w.add(f"{prefix}.mu", m.q.mu)
    w.add(f"{prefix}.s", m.q.s)
    w.add(f"{prefix}.z_xi", m.z_xi)
    for i, x in enumerate(m.x_s):
        w.add(f"{prefix}.x_s.{i}", x)
    return {
        "k_xi": kernel_to_dict(m.k_xi),
        "k_s": [kernel_to_dict(k) for k in m.k_s],
        "beta": repr(float(m.beta)),
        "frozen": sorted(m.frozen),
        "xi_jitter": repr(float(m.xi_jitter)),
        "n_spatial": len(m.x_s),
        "bound": repr(float(collapsed_bound(m)[0])),
        "data_sha256": sha256_bytes(np.ascontiguousarray(m.y, dtype="<f8").tobytes()),
    }


def _model_from(entry, arrays, prefix):
    q = VariationalLatentPosterior(arrays[f"{prefix}.mu"], arrays[f"{prefix}.s"])
    x_s = [arrays[f"{prefix}.x_s.{i}"] for i in range(entry["n_spatial"])]
    return SgplvmModel(arrays[f"{prefix}.y"], x_s, q, arrays[f"{prefix}.z_xi"], kernel_from_dict(entry["k_xi"]),
                       [kernel_from_dict(k) for k in entry["k_s"]], float(entry["beta"]),
                       frozenset(entry["frozen"]), float(entry["xi_jitter"]))


def _settings_to_dict(st):
    return asdict(st)


def _settings_from_dict(d):
    d = dict(d)
    d["optim"] = OptimSettings(**d["optim"])
    d["infer_optim"] = OptimSettings(**d["infer_optim"])
    return SurrogateSettings(**d)


def _factors(w, name, factors):
    for i, f in enumerate(factors):
        w.add(f"{name}.{i}", f)
    return len(factors)


def encode(obj, metadata=None):
    """Serialise a model or surrogate to bytes."""
    w = _Writer()
    head = {"metadata": metadata or {}}
    if isinstance(obj, SgplvmModel):
        head["type"] = "sgplvm"
        head["models"] = {"model": _model_entry(w, "model", obj)}
    elif isinstance(obj, TwoModelSurrogate):
        head["type"] = "two_model"
        head["models"] = {"input": _model_entry(w, "input", obj.input_model),
                          "output": _model_entry(w, "output", obj.output_model)}
        w.add("solved", obj.solved)
        head["factors_in"] = _factors(w, "factors_in", obj.factors_in)
        head["factors_out"] = _factors(w, "factors_out", obj.factors_out)
    elif isinstance(obj, JointSurrogate):
        head["type"] = "joint"
        head["models"] = {"model": _model_entry(w, "model", obj.model)}
        head["output_scale"] = repr(float(obj.output_scale))
        head["factors"] = _factors(w, "factors", obj.factors)
    elif isinstance(obj, PcaSurrogate):
        head["type"] = "pca_baseline"
        head["models"] = {"output": _model_entry(w, "output", obj.output_model)}
        for name in ("components", "singular_values", "mean", "scale"):
            w.add(f"pca.{name}", getattr(obj.pca, name))
        head["factors_in"] = _factors(w, "factors_in", obj.factors_in)
        head["factors_out"] = _factors(w, "factors_out", obj.factors_out)
    else:
        raise TypeError(f"cannot checkpoint {type(obj).__name__}")
    if not isinstance(obj, SgplvmModel):
        head["settings"] = _settings_to_dict(obj.settings)
    head["arrays"] = w.arrays
    hb = canonical_json(head).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(w.chunks)


def decode(data):
    """Inverse of :func:`encode`; returns ``(object, header)``."""
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a structgp checkpoint")
    version, n = struct.unpack("<IQ", data[len(MAGIC):len(MAGIC) + 12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}; this build reads version {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    head = json.loads(data[start:start + n])
    body = data[start + n:]
    arrays = {}
    for name, info in head["arrays"].items():
        count = int(np.prod(info["shape"])) if info["shape"] else 1
        a = np.frombuffer(body, dtype="<f8", count=count, offset=info["offset"])
        arrays[name] = a.reshape(info["shape"]).astype(float)
    models = {k: _model_from(v, arrays, k) for k, v in head["models"].items()}

    def factors(name):
        return [arrays[f"{name}.{i}"] for i in range(head[name])]

    kind = head["type"]
    if kind == "sgplvm":
        return models["model"], head
    st = _settings_from_dict(head["settings"])
    if kind == "two_model":
        obj = TwoModelSurrogate(models["input"], models["output"], arrays["solved"].astype(int), st,
                                factors("factors_in"), factors("factors_out"))
    elif kind == "joint":
        obj = JointSurrogate(models["model"], float(head["output_scale"]), st, factors("factors"))
    elif kind == "pca_baseline":
        pca = PcaInputModel(*(arrays[f"pca.{k}"] for k in ("components", "singular_values", "mean", "scale")))
        obj = PcaSurrogate(pca, models["output"], st, factors("factors_in"), factors("factors_out"))
    else:
        raise CheckpointError(f"unknown checkpoint type {kind!r}")
    return obj, head


def _models(obj):
    """Named SGPLVM models inside ``obj``, keyed as in the header."""
    if isinstance(obj, SgplvmModel):
        return {"model": obj}
    if isinstance(obj, TwoModelSurrogate):
        return {"input": obj.input_model, "output": obj.output_model}
    if isinstance(obj, JointSurrogate):
        return {"model": obj.model}
    return {"output": obj.output_model}


def save(obj, path, metadata=None):
    data = encode(obj, metadata)
    atomic_write_bytes(path, data)
    return sha256_bytes(data)


def load(path, check_bound=True):
    """Load a checkpoint; with ``check_bound`` the stored bounds must be reproduced to 1e-12."""
    with open(path, "rb") as fh:
        obj, head = decode(fh.read())
    if check_bound:
        models = _models(obj)
        for k, m in models.items():
            saved = float(head["models"][k]["bound"])
            now = collapsed_bound(m)[0]
            if not abs(now - saved) <= 1e-12 * max(1.0, abs(saved)):
                raise CheckpointError(f"{path}: bound of {k} model is {now!r}, checkpoint says {saved!r}")
    return obj, head
