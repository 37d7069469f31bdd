"""Shared types, seeded randomness, run configuration and on-disk formats."""

from __future__ import annotations

import enum
import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np
from PIL import Image


class ContractError(ValueError):
    """Raised when an operation's preconditions (shapes, ranges) do not hold."""


class ConfigError(ValueError):
    pass


class DenseMapFormatError(ValueError):
    pass


class DenseMapLengthError(DenseMapFormatError):
    pass


class IngestionError(FileNotFoundError):
    """A frame or teacher file could not be read."""


# ---------------------------------------------------------------------------
# randomness


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 stream; the same seed gives the same draws on every platform."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFF_FFFF_FFFF_FFFF))


def derive_seed(master: int, *keys: int | str) -> int:
    """Split a child seed off ``master``; string keys are hashed with crc32."""
    spawn = tuple(zlib.crc32(k.encode()) if isinstance(k, str) else int(k) for k in keys)
    ss = np.random.SeedSequence(int(master) & 0xFFFF_FFFF_FFFF_FFFF, spawn_key=spawn)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(state: dict) -> np.random.Generator:
    bg = np.random.PCG64()
    bg.state = state
    return np.random.Generator(bg)


# ---------------------------------------------------------------------------
# configuration

ATTENTION_POSITIONS = ("none", "encoder", "decoder", "skip_connection", "final_layer")


@dataclass(frozen=True)
class RunConfig:
    input_size: int = 256
    patch_grid: int = 4
    lr_init: float = 0.001
    lr_halving_period: int = 10
    epochs: int = 30
    seed: int = 0
    attention_position: str = "decoder"
    scse_enabled: bool = True
    smoothing_window: int = 9
    smoothing_order: int = 3
    branch_thresholds: tuple[float, float] = (0.5, 0.5)
    # desk-scale choices the method leaves open
    batch_size: int = 8
    channels: int = 1
    num_classes: int = 3
    unet_depth: int = 2
    base_width: int = 16
    attention_hidden: tuple[int, ...] = (8, 8)
    loss: str = "patch_mse"
    ofm_scale: float = 1.0
    score_normalization: str = "video_minmax"
    auc_mode: str = "concat"
    flow_levels: int = 3
    flow_window: int = 7
    flow_search_radius: int = 2

    def __post_init__(self):
        # JSON round trips hand back lists
        object.__setattr__(self, "branch_thresholds", tuple(float(t) for t in self.branch_thresholds))
        object.__setattr__(self, "attention_hidden", tuple(int(h) for h in self.attention_hidden))
        self.validate()

    def validate(self) -> None:
        problems = []
        if not isinstance(self.input_size, int) or self.input_size <= 0:
            problems.append("input_size must be a positive integer")
        if not isinstance(self.patch_grid, int) or self.patch_grid < 1:
            problems.append("patch_grid must be >= 1")
        if not np.isfinite(self.lr_init) or self.lr_init <= 0:
            problems.append("lr_init must be > 0")
        if not isinstance(self.lr_halving_period, int) or self.lr_halving_period < 1:
            problems.append("lr_halving_period must be >= 1")
        if not isinstance(self.epochs, int) or self.epochs < 0:
            problems.append("epochs must be >= 0")
        if not isinstance(self.seed, int) or not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if self.attention_position not in ATTENTION_POSITIONS:
            problems.append(f"attention_position must be one of {ATTENTION_POSITIONS}")
        if not isinstance(self.smoothing_order, int) or self.smoothing_order < 0:
            problems.append("smoothing_order must be a nonnegative integer")
        if (not isinstance(self.smoothing_window, int) or self.smoothing_window % 2 == 0
                or self.smoothing_window <= self.smoothing_order):
            problems.append("smoothing_window must be odd and > smoothing_order")
        if len(self.branch_thresholds) != 2 or not all(np.isfinite(self.branch_thresholds)):
            problems.append("branch_thresholds must be a pair of finite reals")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.channels not in (1, 3):
            problems.append("channels must be 1 or 3")
        if not isinstance(self.num_classes, int) or self.num_classes < 1:
            problems.append("num_classes must be >= 1")
        if not isinstance(self.unet_depth, int) or self.unet_depth < 2:
            problems.append("unet_depth must be >= 2")
        if not isinstance(self.base_width, int) or self.base_width < 4:
            problems.append("base_width must be >= 4")
        if self.loss not in ("patch_mse", "cross_entropy"):
            problems.append("loss must be patch_mse or cross_entropy")
        if not self.ofm_scale > 0:
            problems.append("ofm_scale must be > 0")
        if self.score_normalization not in ("video_minmax", "none"):
            problems.append("score_normalization must be video_minmax or none")
        if self.auc_mode not in ("concat", "per_video"):
            problems.append("auc_mode must be concat or per_video")
        if self.flow_levels < 1 or self.flow_window < 3 or self.flow_window % 2 == 0:
            problems.append("flow estimator needs >= 1 level and an odd window >= 3")
        if self.flow_search_radius < 1:
            problems.append("flow_search_radius must be >= 1")
        if problems:
            raise ConfigError("; ".join(problems))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["branch_thresholds"] = list(self.branch_thresholds)
        d["attention_hidden"] = list(self.attention_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()

    def replace(self, **changes) -> "RunConfig":
        return replace(self, **changes)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        return RunConfig.from_dict(json.loads(path.read_text()))
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# ---------------------------------------------------------------------------
# frames


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Frame:
    pixels: np.ndarray  # H x W x C, float32 in [0, 1]
    index: int
    video_id: str

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[..., None]
        if px.ndim != 3 or px.shape[2] not in (1, 3) or px.shape[0] == 0 or px.shape[1] == 0:
            raise ContractError(f"frame pixels must be HxWxC with C in (1,3), got {px.shape}")
        if px.min() < 0 or px.max() > 1:
            raise ContractError("frame pixels must lie in [0, 1]")
        if self.index < 0:
            raise ContractError("frame index must be nonnegative")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def gray(self) -> np.ndarray:
        """H x W luma image (0.299/0.587/0.114 weights for RGB)."""
        if self.pixels.shape[2] == 1:
            return self.pixels[..., 0].astype(np.float64)
        return self.pixels.astype(np.float64) @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class Clip:
    prev: Frame
    curr: Frame
    future: Frame | None = None

    def __post_init__(self):
        if self.prev.index + 1 != self.curr.index:
            raise ContractError("clip frames must be consecutive")
        members = [self.prev, self.curr] + ([self.future] if self.future is not None else [])
        if self.future is not None and self.future.index != self.curr.index + 1:
            raise ContractError("future frame must follow the current frame")
        if len({f.video_id for f in members}) != 1:
            raise ContractError("clip frames must share a video_id")
        if len({f.shape for f in members}) != 1:
            raise ContractError("clip frames must share dimensions")


def resize_image(a: np.ndarray, size: int, order: int = 1) -> np.ndarray:
    """Resize an H x W x K float array to size x size."""
    from scipy.ndimage import zoom

    h, w = a.shape[:2]
    if (h, w) == (size, size):
        return a
    out = zoom(a, (size / h, size / w) + (1,) * (a.ndim - 2), order=order, grid_mode=True, mode="nearest")
    return out


def read_frame(path: str | Path, video_id: str, index: int, size: int | None = None,
               channels: int | None = None) -> Frame:
    """Load an 8-bit grayscale/RGB raster as a unit-interval frame."""
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except (FileNotFoundError, OSError) as exc:
        raise IngestionError(f"cannot read frame {index} of {video_id}: {path}") from exc
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if channels == 3 else "L")
    if channels == 1 and img.mode == "RGB":
        img = img.convert("L")
    elif channels == 3 and img.mode == "L":
        img = img.convert("RGB")
    if size is not None and img.size != (size, size):
        img = img.resize((size, size), Image.BILINEAR)
    px = np.asarray(img, dtype=np.float32) / 255.0
    return Frame(px, index, video_id)


def write_frame(frame: Frame, path: str | Path) -> None:
    px = np.round(frame.pixels * 255.0).astype(np.uint8)
    img = Image.fromarray(px[..., 0] if px.shape[2] == 1 else px, mode="L" if px.shape[2] == 1 else "RGB")
    img.save(path, format="PNG")


def frame_name(index: int) -> str:
    return f"frame_{index:06d}"


# ---------------------------------------------------------------------------
# dense maps


class MapKind(enum.IntEnum):
    FLOW = 0
    FLOW_MAGNITUDE = 1
    DEPTH = 2
    SEGMENTATION_SCORES = 3
    ATTENTION = 4
    ANOMALY = 5
    TENSOR = 6  # raw parameter blobs in checkpoints


_FIXED_K = {
    MapKind.FLOW: 2,
    MapKind.FLOW_MAGNITUDE: 1,
    MapKind.DEPTH: 1,
    MapKind.ATTENTION: 1,
    MapKind.ANOMALY: 1,
}


@dataclass(frozen=True)
class DenseMap:
    values: np.ndarray  # H x W x K float32
    kind: MapKind

    def __post_init__(self):
        kind = MapKind(self.kind)
        v = np.asarray(self.values, dtype=np.float32)
        if v.ndim == 2:
            v = v[..., None]
        if v.ndim != 3:
            raise ContractError(f"dense map must be H x W x K, got shape {v.shape}")
        k = _FIXED_K.get(kind)
        if k is not None and v.shape[2] != k:
            raise ContractError(f"{kind.name.lower()} map needs K={k}, got {v.shape[2]}")
        if kind == MapKind.SEGMENTATION_SCORES and v.shape[2] < 2:
            raise ContractError("segmentation scores need background plus >= 1 class")
        if kind != MapKind.TENSOR and v.size and not np.isfinite(v).all():
            raise ContractError("dense map values must be finite")
        if v.size:
            lo, hi = float(v.min()), float(v.max())
            if kind in (MapKind.DEPTH, MapKind.ATTENTION, MapKind.SEGMENTATION_SCORES) and (lo < 0 or hi > 1):
                raise ContractError(f"{kind.name.lower()} values must lie in [0, 1]")
            if kind in (MapKind.ANOMALY, MapKind.FLOW_MAGNITUDE) and lo < 0:
                raise ContractError(f"{kind.name.lower()} values must be >= 0")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "values", _frozen(v))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, DenseMap):
            return NotImplemented
        return (self.kind == other.kind and self.values.shape == other.values.shape
                and self.values.tobytes() == other.values.tobytes())

    __hash__ = None


MAGIC = b"VADMAP01"
_HEADER = struct.Struct("<8s4I")


def encode_dense_map(m: DenseMap) -> bytes:
    h, w, k = m.values.shape
    return _HEADER.pack(MAGIC, h, w, k, int(m.kind)) + m.values.astype("<f4", copy=False).tobytes(order="C")


def decode_dense_map(buf: bytes, source: str = "<bytes>") -> DenseMap:
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise DenseMapFormatError(f"{source}: bad magic {buf[:8]!r}")
    if len(buf) < _HEADER.size:
        raise DenseMapLengthError(f"{source}: truncated header")
    _, h, w, k, code = _HEADER.unpack_from(buf)
    try:
        kind = MapKind(code)
    except ValueError as exc:
        raise DenseMapFormatError(f"{source}: unknown kind code {code}") from exc
    n = h * w * k
    payload = buf[_HEADER.size:]
    if len(payload) != 4 * n:
        raise DenseMapLengthError(f"{source}: expected {4 * n} payload bytes, found {len(payload)}")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, w, k).astype(np.float32)
    return DenseMap(values, kind)


def write_dense_map(m: DenseMap, path: str | Path) -> None:
    path = Path(path)
    if not path.parent.is_dir():
        raise FileNotFoundError(f"parent directory does not exist: {path.parent}")
    path.write_bytes(encode_dense_map(m))


def read_dense_map(path: str | Path) -> DenseMap:
    path = Path(path)
    return decode_dense_map(path.read_bytes(), str(path))


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class VideoDir:
    """One ``<root>/<split>/<video_id>/`` directory."""

    path: Path
    split: str
    access_log: list[str] | None = field(default=None, repr=False)

    @property
    def video_id(self) -> str:
        return self.path.name

    @property
    def frames_dir(self) -> Path:
        return self.path / "frames"

    def _log(self, p: Path) -> Path:
        if self.access_log is not None:
            self.access_log.append(str(p))
        return p

    def frame_indices(self) -> list[int]:
        out = []
        for p in sorted(self.frames_dir.glob("frame_*.png")):
            out.append(int(p.stem.split("_")[1]))
        return out

    def frame_path(self, index: int) -> Path:
        return self.frames_dir / f"{frame_name(index)}.png"

    def read_frame(self, index: int, size: int | None = None, channels: int | None = None) -> Frame:
        return read_frame(self._log(self.frame_path(index)), self.video_id, index, size, channels)

    def pseudo_gt_path(self, source: str, index: int) -> Path:
        return self.path / "pseudo_gt" / source / f"{frame_name(index)}.vadmap"

    def read_pseudo_gt(self, source: str, index: int) -> DenseMap:
        p = self._log(self.pseudo_gt_path(source, index))
        if not p.is_file():
            raise IngestionError(f"missing {source} pseudo-GT for frame {index} of {self.video_id}: {p}")
        return read_dense_map(p)

    def labels(self) -> np.ndarray | None:
        p = self.path / "labels.json"
        if not p.is_file():
            return None
        data = json.loads(self._log(p).read_text())
        if isinstance(data, dict):
            data = data["labels"]
        labels = np.asarray(data, dtype=np.int64)
        if labels.size and not np.isin(labels, (0, 1)).all():
            raise IngestionError(f"{p}: labels must be 0/1")
        return labels

    def scene_script_path(self) -> Path:
        return self.path / "scene.json"


class DatasetRoot:
    """Handle onto ``<root>/{train,test}/<video_id>/``.

    Splits are handed out as :class:`SplitHandle` objects so that training code
    can refuse anything but the train split. Every file touched through the
    handles is appended to :attr:`access_log`.
    """

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.access_log: list[str] = []
        if not self.root.is_dir():
            raise IngestionError(f"dataset root does not exist: {self.root}")

    def train(self) -> "SplitHandle":
        return SplitHandle(self, "train")

    def test(self) -> "SplitHandle":
        return SplitHandle(self, "test")

    def content_hash(self) -> str:
        return tree_hash(self.root)


@dataclass
class SplitHandle:
    dataset: DatasetRoot
    split: str

    def videos(self) -> list[VideoDir]:
        base = self.dataset.root / self.split
        if not base.is_dir():
            return []
        return [VideoDir(p, self.split, self.dataset.access_log)
                for p in sorted(base.iterdir()) if (p / "frames").is_dir()]


def tree_hash(root: str | Path, exclude: Sequence[str] = ()) -> str:
    """SHA-256 over relative paths and bytes of every file below ``root``."""
    root = Path(root)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        rel = p.relative_to(root).as_posix()
        if not p.is_file() or any(rel.startswith(e) for e in exclude):
            continue
        h.update(rel.encode() + b"\0")
        h.update(hashlib.sha256(p.read_bytes()).digest())
    return h.hexdigest()


def write_json(obj: Any, path: str | Path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def chunks(seq: Sequence, n: int) -> Iterable[Sequence]:
    for i in range(0, len(seq), n):
        yield seq[i:i + n]
