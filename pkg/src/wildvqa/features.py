"""Content-aware frame features: frozen backbone + spatial mean/std pooling."""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import ConfigurationError, DecodeError, ShapeError

EXTRACTION_VERSION = "1"

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

MODELS_ENV = "WILDVQA_MODELS"


@dataclass
class FrameStack:
    frames: np.ndarray
    frame_rate: float
    source_id: str

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"frames must be T x H x W x 3, got shape {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ShapeError("a video needs at least one frame")
        if self.frames.dtype != np.uint8:
            raise ShapeError(f"frames must be 8-bit, got {self.frames.dtype}")
        if not self.frame_rate > 0:
            raise ShapeError(f"frame rate must be positive, got {self.frame_rate}")

    def __len__(self):
        return self.frames.shape[0]

    def __iter__(self):
        return iter(self.frames)


@dataclass(frozen=True)
class BackboneManifest:
    """Declares a backbone: its kind, channel count and preprocessing constants.

    ``kind`` is ``"stub"`` (fixed linear map of RGB channels), ``"onnx"``
    (interchange file run with onnxruntime) or ``"torchvision"`` (ResNet
    trunk with a local state-dict file).
    """

    tag: str
    kind: str
    channels: int
    mean: tuple = (0.0, 0.0, 0.0)
    std: tuple = (1.0, 1.0, 1.0)
    weights: str | None = None
    max_side: int | None = None
    arch: str = "resnet50"
    matrix: tuple | None = None

    @property
    def dim(self) -> int:
        return 2 * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, base_dir: Path | None = None) -> "BackboneManifest":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown backbone manifest fields: {sorted(unknown)}")
        d = dict(d)
        for key in ("mean", "std"):
            if key in d:
                d[key] = tuple(float(v) for v in d[key])
        if d.get("matrix") is not None:
            d["matrix"] = tuple(tuple(float(v) for v in row) for row in d["matrix"])
        if d.get("weights") and base_dir is not None and not os.path.isabs(d["weights"]):
            d["weights"] = str(base_dir / d["weights"])
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigurationError(f"invalid backbone manifest: {exc}") from exc

    @classmethod
    def from_file(cls, path) -> "BackboneManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh), base_dir=path.parent)


def _models_dir() -> Path:
    return Path(os.environ.get(MODELS_ENV, Path.home() / ".cache" / "wildvqa"))


def builtin_manifest(tag: str) -> BackboneManifest:
    if tag == "stub":
        return BackboneManifest(tag="stub", kind="stub", channels=3)
    if tag.startswith("stub-"):
        try:
            channels = int(tag.split("-", 1)[1])
        except ValueError:
            raise ConfigurationError(f"unknown backbone tag {tag!r}") from None
        return BackboneManifest(tag=tag, kind="stub", channels=channels)
    if tag == "resnet50":
        return BackboneManifest(tag=tag, kind="onnx", channels=2048, mean=IMAGENET_MEAN, std=IMAGENET_STD,
                                weights=str(_models_dir() / "resnet50-res5c.onnx"))
    if tag == "resnet50-torch":
        return BackboneManifest(tag=tag, kind="torchvision", channels=2048, mean=IMAGENET_MEAN,
                                std=IMAGENET_STD, weights=str(_models_dir() / "resnet50.pth"))
    raise ConfigurationError(f"unknown backbone tag {tag!r}")


def resolve_manifest(spec) -> BackboneManifest:
    """Accept a manifest, a builtin tag, or a path to a manifest JSON file."""
    if isinstance(spec, BackboneManifest):
        return spec
    spec = str(spec)
    if spec.endswith(".json") or os.path.isfile(spec):
        if not os.path.isfile(spec):
            raise ConfigurationError(f"backbone manifest {spec} does not exist")
        return BackboneManifest.from_file(spec)
    return builtin_manifest(spec)


def stub_matrix(channels: int) -> np.ndarray:
    """Deterministic C x 3 channel map; identity rows first."""
    A = np.zeros((channels, 3))
    for i in range(channels):
        if i < 3:
            A[i, i] = 1.0
        else:
            A[i] = np.cos(np.arange(3) * (i + 1) + i)
    return A


class Backbone:
    """A frozen image network mapping one RGB frame to C feature maps."""

    def __init__(self, manifest: BackboneManifest):
        self.manifest = manifest
        self._mean = np.asarray(manifest.mean, dtype=np.float32).reshape(3, 1, 1)
        self._std = np.asarray(manifest.std, dtype=np.float32).reshape(3, 1, 1)
        if np.any(self._std <= 0):
            raise ConfigurationError("backbone std constants must be positive")

    @property
    def tag(self) -> str:
        return self.manifest.tag

    @property
    def channels(self) -> int:
        return self.manifest.channels

    def preprocess(self, frame) -> np.ndarray:
        frame = np.asarray(frame)
        if frame.ndim != 3 or frame.shape[-1] != 3 or frame.shape[0] < 1 or frame.shape[1] < 1:
            raise DecodeError(f"malformed frame of shape {frame.shape}")
        if frame.dtype != np.uint8:
            raise DecodeError(f"expected an 8-bit frame, got {frame.dtype}")
        x = frame.astype(np.float32).transpose(2, 0, 1) / np.float32(255.0)
        cap = self.manifest.max_side
        if cap and max(x.shape[1:]) > cap:
            scale = cap / max(x.shape[1:])
            size = (max(1, round(x.shape[1] * scale)), max(1, round(x.shape[2] * scale)))
            t = torch.from_numpy(x).unsqueeze(0)
            x = torch.nn.functional.interpolate(t, size=size, mode="bilinear", antialias=True,
                                                align_corners=False)[0].numpy()
        return (x - self._mean) / self._std

    def _run(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def embed(self, frame) -> np.ndarray:
        maps = self._run(self.preprocess(frame))
        if maps.ndim != 3 or maps.shape[0] != self.channels:
            raise ShapeError(f"backbone {self.tag} produced {maps.shape}, expected {self.channels} channels")
        return maps


class StubBackbone(Backbone):
    def __init__(self, manifest: BackboneManifest):
        super().__init__(manifest)
        matrix = manifest.matrix if manifest.matrix is not None else stub_matrix(manifest.channels)
        self.matrix = np.asarray(matrix, dtype=np.float32)
        if self.matrix.shape != (manifest.channels, 3):
            raise ConfigurationError(f"stub matrix must be {manifest.channels} x 3")

    def _run(self, x):
        return np.tensordot(self.matrix, x, axes=([1], [0]))


class OnnxBackbone(Backbone):
    def __init__(self, manifest: BackboneManifest):
        super().__init__(manifest)
        try:
            import onnxruntime as ort
        except ImportError as exc:
            raise ConfigurationError("onnx backbones need the 'onnxruntime' package") from exc
        if not manifest.weights or not os.path.isfile(manifest.weights):
            raise ConfigurationError(f"backbone file {manifest.weights} not found for {manifest.tag!r}")
        opts = ort.SessionOptions()
        self.session = ort.InferenceSession(manifest.weights, opts, providers=["CPUExecutionProvider"])
        self.input_name = self.session.get_inputs()[0].name

    def _run(self, x):
        out = self.session.run(None, {self.input_name: x[None].astype(np.float32)})[0]
        return np.asarray(out[0])


def resnet_trunk(arch: str = "resnet50", state_dict=None) -> torch.nn.Module:
    """Torchvision ResNet cut after its last convolutional stage."""
    import torchvision

    net = getattr(torchvision.models, arch)(weights=None)
    if state_dict is not None:
        net.load_state_dict(state_dict)
    trunk = torch.nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                net.layer1, net.layer2, net.layer3, net.layer4)
    trunk.eval()
    for p in trunk.parameters():
        p.requires_grad_(False)
    return trunk


class TorchvisionBackbone(Backbone):
    def __init__(self, manifest: BackboneManifest, module: torch.nn.Module | None = None):
        super().__init__(manifest)
        if module is None:
            if not manifest.weights or not os.path.isfile(manifest.weights):
                raise ConfigurationError(f"weights {manifest.weights} not found for {manifest.tag!r}")
            state = torch.load(manifest.weights, map_location="cpu", weights_only=True)
            module = resnet_trunk(manifest.arch, state)
        self.module = module.eval()

    def _run(self, x):
        with torch.inference_mode():
            return self.module(torch.from_numpy(np.ascontiguousarray(x))[None])[0].numpy()


def export_onnx(module: torch.nn.Module, path, height: int = 224, width: int = 224):
    """Write ``module`` to an interchange file with dynamic spatial size."""
    module = module.eval()
    dummy = torch.zeros(1, 3, height, width)
    with warnings.catch_warnings():
        # the legacy exporter is deliberate: it needs no extra packages
        warnings.simplefilter("ignore", DeprecationWarning)
        torch.onnx.export(module, (dummy,), str(path), input_names=["image"], output_names=["maps"],
                          dynamic_axes={"image": {2: "height", 3: "width"}, "maps": {2: "h", 3: "w"}},
                          dynamo=False)


_KINDS = {"stub": StubBackbone, "onnx": OnnxBackbone, "torchvision": TorchvisionBackbone}


def load_backbone(spec) -> Backbone:
    manifest = resolve_manifest(spec)
    try:
        cls = _KINDS[manifest.kind]
    except KeyError:
        raise ConfigurationError(f"unknown backbone kind {manifest.kind!r}") from None
    return cls(manifest)


def embed_frame(frame, backbone: Backbone) -> np.ndarray:
    return backbone.embed(frame)


def global_pool(maps) -> np.ndarray:
    """Per-channel spatial mean followed by per-channel population std.

    Accepts ``C x H x W`` (one frame) or ``N x C x H x W``.
    """
    maps = np.asarray(maps, dtype=np.float64)
    if maps.ndim < 3 or maps.size == 0:
        raise ShapeError(f"feature maps must be C x H x W, got shape {maps.shape}")
    flat = maps.reshape(*maps.shape[:-2], -1)
    # offsets from the first pixel keep constant maps exactly constant
    ref = flat[..., :1]
    dev = flat - ref
    mean_dev = dev.mean(axis=-1, keepdims=True)
    std = np.sqrt(np.mean((dev - mean_dev) ** 2, axis=-1))
    mean = (ref + mean_dev)[..., 0]
    return np.concatenate([mean, std], axis=-1)


@dataclass
class FeatureCacheRecord:
    source_id: str
    payload: np.ndarray
    backbone_tag: str
    extraction_version: str = EXTRACTION_VERSION
    frame_rate: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)
        if self.payload.ndim != 2 or self.payload.shape[0] < 1:
            raise ShapeError(f"payload must be T x dim with T >= 1, got {self.payload.shape}")

    @property
    def T(self) -> int:
        return self.payload.shape[0]

    @property
    def dim(self) -> int:
        return self.payload.shape[1]


def extract_frames(frames: Iterable, backbone: Backbone) -> np.ndarray:
    rows = []
    for t, frame in enumerate(frames):
        try:
            rows.append(global_pool(backbone.embed(frame)))
        except DecodeError as exc:
            raise DecodeError(f"frame {t}: {exc}", frame_index=t) from exc
    if not rows:
        raise DecodeError("video contains no decodable frames", frame_index=0)
    return np.stack(rows).astype(np.float32)


def extract_video_features(video, backbone) -> FeatureCacheRecord:
    """Feature matrix for every frame of ``video`` (a FrameStack or decoder)."""
    if not isinstance(backbone, Backbone):
        backbone = load_backbone(backbone)
    payload = extract_frames(iter(video), backbone)
    return FeatureCacheRecord(source_id=video.source_id, payload=payload, backbone_tag=backbone.tag,
                              frame_rate=float(video.frame_rate))
