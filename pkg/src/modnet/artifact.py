"""Subnetwork artifacts: serialize a trained model's weights and extracted
masks, analyze the surviving structure, and render it as a graph.

Artifacts are a single JSON document. Weights are stored unmasked next to a
separate bit array, so what was pruned stays inspectable. Python's JSON float
formatting round-trips doubles exactly, which keeps export -> load lossless.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, SizeLimitError
from .masking import MaskedParameter, extract_final_mask
from .models import ConvLayer, DenseLayer, Model, ModelConfig
from .tensor import Tensor

FORMAT_VERSION = 1


def export_subnetwork(model: Model, path: str | Path | None, meta: dict | None = None) -> dict:
    """Build the artifact document for `model` and write it to `path`.

    Pass path=None to skip the write and just get the document.
    """
    layers = []
    for layer in model.layers:
        p = layer.param
        rec = {
            "name": p.name,
            "kind": "conv" if isinstance(layer, ConvLayer) else "dense",
            "shape": list(p.weights.shape),
            "weights": p.weights.data.reshape(-1).tolist(),
            "mask": extract_final_mask(p).reshape(-1).tolist(),
            "bias": layer.bias.data.tolist(),
        }
        if isinstance(layer, ConvLayer):
            rec["pool"] = layer.pool
        else:
            rec["activation"] = layer.activation
        layers.append(rec)
    cfg = model.config
    artifact = {
        "format_version": FORMAT_VERSION,
        "arch": {
            "arch": cfg.arch,
            "input_shape": list(cfg.input_shape),
            "classes": cfg.classes,
            "hidden": list(cfg.hidden),
            "conv_channels": list(cfg.conv_channels),
            "conv_kernel": cfg.conv_kernel,
            "dense_hidden": cfg.dense_hidden,
        },
        "layers": layers,
        "meta": meta or {},
    }
    if path is not None:
        Path(path).write_text(json.dumps(artifact, indent=1))
    return artifact


def _require(cond: bool, msg: str):
    if not cond:
        raise FormatError(msg)


def validate_artifact(artifact: dict) -> dict:
    """Schema-check an artifact document. Returns it with defaults filled in."""
    _require(isinstance(artifact, dict), "artifact must be a JSON object")
    version = artifact.get("format_version")
    _require(version == FORMAT_VERSION, f"unsupported format_version {version!r}, expected {FORMAT_VERSION}")
    _require("arch" in artifact, "artifact missing 'arch'")
    _require(isinstance(artifact.get("layers"), list) and artifact["layers"], "artifact needs a nonempty 'layers' list")
    artifact.setdefault("meta", {})
    for rec in artifact["layers"]:
        name = rec.get("name", "?")
        _require(rec.get("kind") in ("dense", "conv"), f"{name}: kind must be 'dense' or 'conv'")
        shape = rec.get("shape")
        _require(isinstance(shape, list) and all(isinstance(s, int) and s > 0 for s in shape),
                 f"{name}: bad shape {shape!r}")
        size = int(np.prod(shape))
        _require(len(rec.get("weights", [])) == size, f"{name}: expected {size} weights, got {len(rec.get('weights', []))}")
        _require(len(rec.get("mask", [])) == size, f"{name}: mask length {len(rec.get('mask', []))} != weight length {size}")
        _require(all(b in (0, 1) for b in rec["mask"]), f"{name}: mask bits must be 0 or 1")
        _require(len(rec.get("bias", [])) == shape[0], f"{name}: expected {shape[0]} bias entries")
    return artifact


def load_artifact(path: str | Path) -> dict:
    try:
        artifact = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    return validate_artifact(artifact)


def model_from_artifact(artifact: dict) -> Model:
    """Rebuild a deterministic-mask model: logits are +1 for kept bits, -1
    for pruned ones, so the deterministic forward reproduces the mask."""
    artifact = validate_artifact(artifact)
    a = artifact["arch"]
    try:
        cfg = ModelConfig(
            arch=a["arch"],
            input_shape=tuple(a["input_shape"]),
            classes=a["classes"],
            hidden=tuple(a.get("hidden", ())),
            conv_channels=tuple(a.get("conv_channels", ())),
            conv_kernel=a.get("conv_kernel", 3),
            dense_hidden=a.get("dense_hidden", 128),
        )
    except (KeyError, TypeError) as exc:
        raise FormatError(f"bad arch record: {exc}") from None
    layers: list = []
    for rec in artifact["layers"]:
        shape = tuple(rec["shape"])
        w = Tensor(np.array(rec["weights"]).reshape(shape), requires_grad=True)
        mask = np.array(rec["mask"]).reshape(shape)
        logits = Tensor(np.where(mask == 1, 1.0, -1.0), requires_grad=True)
        bias = Tensor(np.array(rec["bias"]), requires_grad=True)
        param = MaskedParameter(rec["name"], w, logits)
        if rec["kind"] == "conv":
            layers.append(ConvLayer(param, bias, pool=bool(rec.get("pool", True))))
        else:
            layers.append(DenseLayer(param, bias, activation=rec.get("activation", "none")))
    return Model(cfg, layers)


def load_subnetwork(path: str | Path) -> Model:
    return model_from_artifact(load_artifact(path))


@dataclass
class AnalysisReport:
    density: dict[str, float]  # alive fraction per layer
    reuse: dict[str, np.ndarray]  # alive outgoing weights per source feature
    pruned: dict[str, list[int]]  # source features with zero alive fan-out
    jaccard: dict[str, np.ndarray]  # pairwise incoming-support overlap per layer


def analyze(artifact: dict) -> AnalysisReport:
    model = model_from_artifact(artifact)
    specs = model.collect_group_specs()
    density: dict[str, float] = {}
    reuse: dict[str, np.ndarray] = {}
    pruned: dict[str, list[int]] = {}
    jaccard: dict[str, np.ndarray] = {}
    for layer in model.layers:
        name = layer.param.name
        mask = extract_final_mask(layer.param).astype(np.float64)
        flat = mask.reshape(-1)
        density[name] = float(flat.mean())
        spec = specs[name]
        counts = np.bincount(spec.group_ids, weights=flat, minlength=spec.num_groups).astype(np.int64)
        reuse[name] = counts
        pruned[name] = [int(i) for i in np.flatnonzero(counts == 0)]
        rows = mask.reshape(mask.shape[0], -1)  # incoming support per output unit
        inter = rows @ rows.T
        sizes = rows.sum(axis=1)
        union = sizes[:, None] + sizes[None, :] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            j = np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)
        jaccard[name] = j
    return AnalysisReport(density=density, reuse=reuse, pruned=pruned, jaccard=jaccard)


def dot_export(artifact: dict, max_units: int = 512) -> str:
    """Layered graph in DOT form: one node per feature, one edge per alive
    mask bit (conv layers get parallel channel-to-channel edges)."""
    model = model_from_artifact(artifact)
    specs = model.collect_group_specs()
    first = model.layers[0].param.name
    rank_sizes = [specs[first].num_groups] + [layer.param.weights.shape[0] for layer in model.layers]
    total = sum(rank_sizes)
    if total > max_units:
        raise SizeLimitError(f"graph has {total} units, refusing to render more than {max_units}")

    lines = ["digraph subnet {", "  rankdir=LR;", "  node [shape=circle, fontsize=10];"]
    rank_names = ["in"] + [layer.param.name for layer in model.layers]
    for r, (rname, size) in enumerate(zip(rank_names, rank_sizes)):
        nodes = " ".join(f'u{r}_{i} [label="{rname}/{i}"];' for i in range(size))
        lines.append("  { rank=same; " + nodes + " }")
    for li, layer in enumerate(model.layers):
        spec = specs[layer.param.name]
        mask = extract_final_mask(layer.param).reshape(-1)
        out_count = layer.param.weights.shape[0]
        per_out = mask.size // out_count
        for e in np.flatnonzero(mask):
            src = spec.group_ids[e]
            dst = e // per_out
            lines.append(f"  u{li}_{src} -> u{li + 1}_{dst};")
    lines.append("}")
    return "\n".join(lines) + "\n"
