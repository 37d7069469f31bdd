"""U-shaped students, SCSE gating and the context-attention network.

Attention maps are applied as ``F * (1 + A)`` at one of the sites named by
``attention_position``; with ``A == 0`` every site is a no-op.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import (
    ATTENTION_POSITIONS,
    ContractError,
    DenseMap,
    MapKind,
    canonical_json,
    read_dense_map,
    write_dense_map,
    write_json,
)


class CheckpointError(RuntimeError):
    pass


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int
    out_channels: int
    depth: int = 4
    base_width: int = 16
    scse_enabled: bool = False
    attention_position: str = "none"
    out_activation: str = "linear"

    def __post_init__(self):
        if self.depth < 2:
            raise ContractError("UNet depth must be >= 2")
        if self.base_width < 4:
            raise ContractError("base_width must be >= 4")
        if self.attention_position not in ATTENTION_POSITIONS:
            raise ContractError(f"attention_position must be one of {ATTENTION_POSITIONS}")
        if self.out_activation not in ("linear", "per_pixel_softmax"):
            raise ContractError("out_activation must be linear or per_pixel_softmax")

    def widths(self) -> list[int]:
        return [self.base_width * 2 ** i for i in range(self.depth)]

    def scse_levels(self) -> list[int]:
        """1-based encoder levels that carry SCSE (mid levels; level 2 when depth is 2)."""
        if not self.scse_enabled:
            return []
        return list(range(2, max(2, self.depth - 1) + 1))


@dataclass(frozen=True)
class ContextAttnSpec:
    in_channels: int = 3
    hidden_widths: tuple[int, ...] = (8, 8)


def conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class SCSE(nn.Module):
    """Concurrent channel and spatial squeeze-excitation with max fusion."""

    def __init__(self, channels: int, reduction: int = 2):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)
        self.spatial = nn.Conv2d(channels, 1, 1)

    def gates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        z = x.mean(dim=(2, 3))
        cg = torch.sigmoid(self.fc2(F.relu(self.fc1(z))))[:, :, None, None]
        sg = torch.sigmoid(self.spatial(x))
        return cg, sg

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        cg, sg = self.gates(x)
        return torch.maximum(x * cg, x * sg)


class ContextAttention(nn.Module):
    """Maps (X, Y, depth) to a single-channel attention map in [0, 1]."""

    def __init__(self, spec: ContextAttnSpec = ContextAttnSpec()):
        super().__init__()
        self.spec = spec
        layers: list[nn.Module] = []
        cin = spec.in_channels
        for w in spec.hidden_widths:
            layers += [nn.Conv2d(cin, w, 3, padding=1), nn.ReLU(inplace=True)]
            cin = w
        layers.append(nn.Conv2d(cin, 1, 1))
        self.body = nn.Sequential(*layers)

    def forward(self, ctx: torch.Tensor) -> torch.Tensor:
        if ctx.shape[1] != self.spec.in_channels:
            raise ContractError(f"context needs {self.spec.in_channels} channels, got {ctx.shape[1]}")
        return torch.sigmoid(self.body(ctx))


def modulate(features: torch.Tensor, attn: torch.Tensor) -> torch.Tensor:
    if attn.shape[-2:] != features.shape[-2:]:
        attn = F.interpolate(attn, size=features.shape[-2:], mode="bilinear", align_corners=False)
    return features * (1.0 + attn)


class UNet(nn.Module):
    def __init__(self, spec: UNetSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths()
        self.encoders = nn.ModuleList(
            [conv_block(spec.in_channels if i == 0 else w[i - 1], w[i]) for i in range(spec.depth)])
        self.scse = nn.ModuleDict({str(lvl): SCSE(w[lvl - 1]) for lvl in spec.scse_levels()})
        self.ups = nn.ModuleList([nn.ConvTranspose2d(w[i + 1], w[i], 2, stride=2) for i in range(spec.depth - 1)])
        self.decoders = nn.ModuleList([conv_block(2 * w[i], w[i]) for i in range(spec.depth - 1)])
        self.head = nn.Conv2d(w[0], spec.out_channels, 1)

    def forward(self, x: torch.Tensor, attn: torch.Tensor | None = None) -> torch.Tensor:
        spec = self.spec
        pos = spec.attention_position
        if x.shape[1] != spec.in_channels:
            raise ContractError(f"input needs {spec.in_channels} channels, got {x.shape[1]}")
        step = 2 ** (spec.depth - 1)
        if x.shape[2] % step or x.shape[3] % step:
            raise ContractError(f"input size must be divisible by {step}")
        if pos != "none" and attn is None:
            raise ContractError(f"attention_position={pos} needs an attention map")
        skips = []
        h = x
        for i, enc in enumerate(self.encoders):
            if i > 0:
                h = F.max_pool2d(h, 2)
            h = enc(h)
            if str(i + 1) in self.scse:
                h = self.scse[str(i + 1)](h)
            skip = h
            if pos == "encoder":
                h = modulate(h, attn)
            if pos == "skip_connection":
                skip = modulate(skip, attn)
            skips.append(skip)
        for i in range(spec.depth - 2, -1, -1):
            u = self.ups[i](h)
            if pos == "decoder":
                u = modulate(u, attn)
            h = self.decoders[i](torch.cat([u, skips[i]], dim=1))
        if pos == "final_layer":
            h = modulate(h, attn)
        out = self.head(h)
        if spec.out_activation == "per_pixel_softmax":
            out = torch.softmax(out, dim=1)
        return out


class Student(nn.Module):
    """A UNet plus, when attention is placed somewhere, its context-attention network."""

    def __init__(self, spec: UNetSpec, attn_spec: ContextAttnSpec | None = None):
        super().__init__()
        self.spec = spec
        self.unet = UNet(spec)
        self.attention = None
        if spec.attention_position != "none":
            self.attention = ContextAttention(attn_spec or ContextAttnSpec())

    def forward(self, x: torch.Tensor, context: torch.Tensor | None = None) -> torch.Tensor:
        attn = None
        if self.attention is not None:
            if context is None:
                raise ContractError("student with attention needs context features")
            attn = self.attention(context)
        return self.unet(x, attn)


def init_params(module: nn.Module, rng: np.random.Generator) -> nn.Module:
    """He-normal (fan-in) weights and zero biases, drawn from ``rng`` in name order."""
    with torch.no_grad():
        for name, p in sorted(module.named_parameters(), key=lambda kv: kv[0]):
            if name.endswith("bias"):
                p.zero_()
                continue
            if isinstance(p, torch.Tensor) and p.dim() > 1:
                fan_in = p.shape[1] * int(np.prod(p.shape[2:]))
                if "ups." in name:
                    # ConvTranspose2d weights are (in, out, kh, kw)
                    fan_in = p.shape[0] * int(np.prod(p.shape[2:])) // 4
                std = np.sqrt(2.0 / fan_in)
                p.copy_(torch.from_numpy(rng.normal(0.0, std, size=tuple(p.shape)).astype(np.float32)))
    return module


def conv_block_param_count(module: nn.Module) -> int:
    """Parameters inside the UNet's 3x3 conv blocks."""
    unet = module.unet if isinstance(module, Student) else module
    return sum(p.numel() for blk in list(unet.encoders) + list(unet.decoders) for p in blk.parameters())


# ---------------------------------------------------------------------------
# numpy-facing wrappers (H x W x C in, H x W x C out)


def _to_nchw(a) -> torch.Tensor:
    t = torch.as_tensor(np.asarray(a, dtype=np.float32))
    if t.dim() == 2:
        t = t[..., None]
    return t.permute(2, 0, 1)[None]


def _to_hwc(t: torch.Tensor) -> np.ndarray:
    return t[0].permute(1, 2, 0).detach().cpu().numpy()


@torch.no_grad()
def unet_forward(model: UNet, image, attn=None) -> np.ndarray:
    if isinstance(attn, DenseMap):
        attn = attn.values
    a = None if attn is None or model.spec.attention_position == "none" else _to_nchw(attn)
    return _to_hwc(model(_to_nchw(image), a))


@torch.no_grad()
def scse_forward(block: SCSE, features) -> np.ndarray:
    return _to_hwc(block(_to_nchw(features)))


@torch.no_grad()
def context_attention_forward(model: ContextAttention, x, y, depth) -> DenseMap:
    x, y, d = (np.asarray(v.values if isinstance(v, DenseMap) else v, dtype=np.float32).squeeze()
               for v in (x, y, depth))
    if not x.shape == y.shape == d.shape:
        raise ContractError(f"context shapes differ: {x.shape}, {y.shape}, {d.shape}")
    out = _to_hwc(model(_to_nchw(np.stack([x, y, d], axis=-1))))
    return DenseMap(np.clip(out, 0.0, 1.0), MapKind.ATTENTION)


# ---------------------------------------------------------------------------
# checkpoints


def _blob_shape(shape: tuple[int, ...]) -> tuple[int, int, int]:
    if len(shape) == 0:
        return (1, 1, 1)
    return (shape[0], int(np.prod(shape[1:])) if len(shape) > 1 else 1, 1)


def _file_digest(p: Path) -> str:
    return hashlib.sha256(p.read_bytes()).hexdigest()


def save_checkpoint(directory: str | Path, model: Student, meta: dict,
                    optimizer: torch.optim.Optimizer | None = None) -> Path:
    """Write parameters (and Adam moments) as dense-map blobs plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "params").mkdir(parents=True, exist_ok=True)
    entries = {}
    tensors = dict(model.state_dict())
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for p, st in optimizer.state.items():
            n = names[id(p)]
            tensors[f"adam.exp_avg.{n}"] = st["exp_avg"]
            tensors[f"adam.exp_avg_sq.{n}"] = st["exp_avg_sq"]
            meta = {**meta, "adam_step": float(st["step"])}
    for name, t in sorted(tensors.items()):
        arr = t.detach().cpu().numpy().astype(np.float32)
        path = directory / "params" / f"{name}.vadmap"
        write_dense_map(DenseMap(arr.reshape(_blob_shape(arr.shape)), MapKind.TENSOR), path)
        entries[name] = {"shape": list(arr.shape), "file": f"params/{name}.vadmap", "sha256": _file_digest(path)}
    manifest = {
        "unet_spec": asdict(model.spec),
        "attention_spec": asdict(model.attention.spec) if model.attention is not None else None,
        "tensors": entries,
        "meta": meta,
    }
    manifest["manifest_hash"] = hashlib.sha256(canonical_json(manifest).encode()).hexdigest()
    write_json(manifest, directory / "manifest.json")
    return directory


def read_manifest(directory: str | Path) -> dict:
    directory = Path(directory)
    path = directory / "manifest.json"
    if not path.is_file():
        raise CheckpointError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    claimed = manifest.pop("manifest_hash", None)
    if claimed != hashlib.sha256(canonical_json(manifest).encode()).hexdigest():
        raise CheckpointError(f"checkpoint manifest hash mismatch in {directory}")
    for name, e in manifest["tensors"].items():
        f = directory / e["file"]
        if not f.is_file() or _file_digest(f) != e["sha256"]:
            raise CheckpointError(f"checkpoint tensor {name} missing or corrupt in {directory}")
    return manifest


def load_checkpoint(directory: str | Path, optimizer_factory=None):
    """Rebuild the student (and optionally its optimizer state) from a checkpoint."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    spec = UNetSpec(**manifest["unet_spec"])
    aspec = manifest["attention_spec"]
    model = Student(spec, ContextAttnSpec(aspec["in_channels"], tuple(aspec["hidden_widths"])) if aspec else None)
    tensors = {}
    for name, e in manifest["tensors"].items():
        arr = read_dense_map(directory / e["file"]).values.reshape(e["shape"])
        tensors[name] = torch.from_numpy(arr.copy())
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("adam.")})
    optimizer = None
    if optimizer_factory is not None:
        optimizer = optimizer_factory(model)
        step = manifest["meta"].get("adam_step")
        if step is not None:
            for n, p in model.named_parameters():
                optimizer.state[p] = {
                    "step": torch.tensor(step),
                    "exp_avg": tensors[f"adam.exp_avg.{n}"],
                    "exp_avg_sq": tensors[f"adam.exp_avg_sq.{n}"],
                }
    return model, manifest, optimizer
