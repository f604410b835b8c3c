"""Model container: magic, JSON header, then little-endian float64 parameter blocks.

Layout::

    b"UQTABMDL"  | uint64 LE header length | UTF-8 JSON header | blocks...

The header lists every block as ``[name, shape]`` in storage order; blocks
are raw ``<f8`` arrays in C order, so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .data import ScalerStats
from .density import AutoencoderModel, PpcaModel
from .discriminators import (
    BbbModel,
    EnsembleModel,
    LogRegModel,
    MixturePrior,
    MlpModel,
    TemperatureScaledModel,
)
from .nets import Network

MAGIC = b"UQTABMDL"
FORMAT_VERSION = 1


class ContainerError(ValueError):
    pass


def _net_parts(net: Network, prefix: str):
    meta = {"activations": list(net.activations), "dropout_rate": net.dropout_rate, "n_layers": len(net.weights)}
    blocks = [(f"{prefix}W{i}", w) for i, w in enumerate(net.weights)]
    blocks += [(f"{prefix}b{i}", b) for i, b in enumerate(net.biases)]
    return meta, blocks


def _net_from(meta, blocks, prefix: str) -> Network:
    n = meta["n_layers"]
    return Network([blocks[f"{prefix}W{i}"] for i in range(n)], [blocks[f"{prefix}b{i}"] for i in range(n)],
                   list(meta["activations"]), meta["dropout_rate"])


def _encode(model):
    if isinstance(model, MlpModel):
        meta, blocks = _net_parts(model.net, "")
        return "mlp", {"net": meta}, blocks
    if isinstance(model, TemperatureScaledModel):
        meta, blocks = _net_parts(model.base.net, "")
        return "temperature", {"net": meta}, blocks + [("temperature", np.array([model.temperature]))]
    if isinstance(model, LogRegModel):
        return ("logreg", {"converged": model.converged, "n_iter": model.n_iter},
                [("weights", model.weights), ("bias", np.array([model.bias])), ("C", np.array([model.C]))])
    if isinstance(model, BbbModel):
        n = len(model.mu_w)
        blocks = []
        for name in ("mu_w", "mu_b", "rho_w", "rho_b"):
            blocks += [(f"{name}{i}", a) for i, a in enumerate(getattr(model, name))]
        blocks.append(("prior", np.array([model.prior.pi, model.prior.sigma1, model.prior.sigma2])))
        blocks.append(("dropout_rate", np.array([model.dropout_rate])))
        return "bbb", {"n_layers": n, "activations": list(model.activations)}, blocks
    if isinstance(model, EnsembleModel):
        meta = {"kind": model.kind, "n_members": len(model.members), "members": []}
        blocks = []
        for i, m in enumerate(model.members):
            mmeta, mblocks = _net_parts(m.net, f"m{i}/")
            meta["members"].append(mmeta)
            blocks += mblocks
            if model.anchors is not None:
                blocks += [(f"m{i}/anchor{j}", a) for j, a in enumerate(model.anchors[i])]
        meta["anchored"] = model.anchors is not None
        if model.lambdas is not None:
            blocks.append(("lambdas", np.asarray(model.lambdas, dtype=np.float64)))
        return "ensemble", meta, blocks
    if isinstance(model, PpcaModel):
        return ("ppca", {"clamped": model.clamped},
                [("mean", model.mean), ("loadings", model.loadings), ("sigma2", np.array([model.sigma2])),
                 ("eigenvalues", model.eigenvalues)])
    if isinstance(model, AutoencoderModel):
        meta, blocks = _net_parts(model.net, "")
        return ("ae", {"net": meta, "latent_dim": model.latent_dim},
                blocks + [("learning_rate", np.array([model.learning_rate]))])
    raise ContainerError(f"cannot serialise object of type {type(model).__name__}")


def _decode(variant, meta, blocks):
    if variant == "mlp":
        return MlpModel(_net_from(meta["net"], blocks, ""))
    if variant == "temperature":
        return TemperatureScaledModel(MlpModel(_net_from(meta["net"], blocks, "")), float(blocks["temperature"][0]))
    if variant == "logreg":
        return LogRegModel(blocks["weights"], float(blocks["bias"][0]), float(blocks["C"][0]),
                           meta["converged"], meta["n_iter"])
    if variant == "bbb":
        n = meta["n_layers"]
        parts = {name: [blocks[f"{name}{i}"] for i in range(n)] for name in ("mu_w", "mu_b", "rho_w", "rho_b")}
        pi, s1, s2 = (float(v) for v in blocks["prior"])
        return BbbModel(parts["mu_w"], parts["mu_b"], parts["rho_w"], parts["rho_b"], list(meta["activations"]),
                        MixturePrior(pi, s1, s2), float(blocks["dropout_rate"][0]))
    if variant == "ensemble":
        members, anchors = [], [] if meta["anchored"] else None
        for i, mmeta in enumerate(meta["members"]):
            net = _net_from(mmeta, blocks, f"m{i}/")
            members.append(MlpModel(net))
            if anchors is not None:
                anchors.append([blocks[f"m{i}/anchor{j}"] for j in range(2 * mmeta["n_layers"])])
        lambdas = [float(v) for v in blocks["lambdas"]] if "lambdas" in blocks else None
        return EnsembleModel(meta["kind"], members, anchors, lambdas)
    if variant == "ppca":
        return PpcaModel(blocks["mean"], blocks["loadings"], float(blocks["sigma2"][0]), blocks["eigenvalues"],
                         meta["clamped"])
    if variant == "ae":
        return AutoencoderModel(_net_from(meta["net"], blocks, ""), meta["latent_dim"],
                                float(blocks["learning_rate"][0]))
    raise ContainerError(f"unknown model variant {variant!r}")


def dumps_model(model, scaler: ScalerStats | None = None, hyperparameters: dict | None = None,
                provenance: dict | None = None) -> bytes:
    variant, meta, blocks = _encode(model)
    if scaler is not None:
        blocks = blocks + [("scaler/mean", scaler.mean), ("scaler/std", scaler.std), ("scaler/impute", scaler.impute)]
    arrays = [np.ascontiguousarray(a, dtype="<f8") for _, a in blocks]
    header = {
        "format_version": FORMAT_VERSION,
        "variant": variant,
        "architecture": meta,
        "hyperparameters": hyperparameters or {},
        "has_scaler": scaler is not None,
        "provenance": provenance or {},
        "blocks": [[name, list(a.shape)] for (name, _), a in zip(blocks, arrays)],
    }
    head = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return MAGIC + struct.pack("<Q", len(head)) + head + b"".join(a.tobytes() for a in arrays)


def loads_model(buf: bytes):
    """Return ``(model, scaler_or_None, header)``."""
    if buf[:8] != MAGIC:
        raise ContainerError("not a model container (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    header = json.loads(buf[16:16 + hlen].decode("utf-8"))
    pos = 16 + hlen
    blocks = {}
    for name, shape in header["blocks"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if pos + nbytes > len(buf):
            raise ContainerError(f"truncated container while reading block {name!r}")
        blocks[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
    if pos != len(buf):
        raise ContainerError("trailing bytes after the last block")
    model = _decode(header["variant"], header["architecture"], blocks)
    scaler = None
    if header.get("has_scaler"):
        scaler = ScalerStats(blocks["scaler/mean"], blocks["scaler/std"], blocks["scaler/impute"])
    return model, scaler, header


def save_model(path, model, scaler=None, hyperparameters=None, provenance=None) -> Path:
    path = Path(path)
    data = dumps_model(model, scaler, hyperparameters, provenance)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)
    return path


def load_model(path):
    return loads_model(Path(path).read_bytes())
