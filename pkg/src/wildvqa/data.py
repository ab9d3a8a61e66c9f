"""Dataset manifests, train/val/test split plans and synthetic fixture datasets."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cache import FeatureCache, check_id
from .errors import CacheNotFoundError, DomainError, ValidationError
from .features import FeatureCacheRecord
from .pooling import PoolingConfig, pool

MANIFEST_COLUMNS = ("source_id", "video_path", "mos")

# MOS ranges published with each database
KNOWN_MOS_RANGES = {
    "KoNViD-1k": (1.22, 4.64),
    "LIVE-Qualcomm": (16.5621, 73.6428),
    "CVD2014": (-6.50, 93.38),
}


@dataclass(frozen=True)
class ManifestEntry:
    source_id: str
    video_path: str
    mos: float


@dataclass
class DatasetManifest:
    name: str
    entries: list
    mos_range: tuple

    def __post_init__(self):
        lo, hi = self.mos_range
        if not hi > lo:
            raise ValidationError(f"invalid MOS range {self.mos_range}")
        seen, dupes = set(), []
        for e in self.entries:
            if e.source_id in seen:
                dupes.append(e.source_id)
            seen.add(e.source_id)
        if dupes:
            raise ValidationError(f"duplicate source_id values: {', '.join(sorted(set(dupes)))}", dupes)
        outside = [e.source_id for e in self.entries if not lo <= e.mos <= hi]
        if outside:
            raise ValidationError(f"MOS outside {self.mos_range} for: {', '.join(outside)}", outside)

    def __len__(self):
        return len(self.entries)

    @property
    def ids(self) -> list:
        return [e.source_id for e in self.entries]

    @property
    def mos(self) -> dict:
        return {e.source_id: e.mos for e in self.entries}

    def to_unit(self, mos):
        """Rescale native MOS to the [0, 100] training scale."""
        lo, hi = self.mos_range
        return (np.asarray(mos, dtype=np.float64) - lo) * (100.0 / (hi - lo))

    def to_native(self, score):
        lo, hi = self.mos_range
        return lo + np.asarray(score, dtype=np.float64) * ((hi - lo) / 100.0)


def load_manifest(path, name: str | None = None, mos_range: tuple | None = None,
                  check_files: bool = True) -> DatasetManifest:
    """Read a ``source_id,video_path,mos`` CSV.

    Relative video paths resolve against the CSV's directory. Without an
    explicit ``mos_range`` a known database name selects its published range;
    otherwise the observed min/max is used.
    """
    path = Path(path)
    name = name or path.stem
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or tuple(f.strip() for f in reader.fieldnames) != MANIFEST_COLUMNS:
                raise ValidationError(f"{path}: header must be {','.join(MANIFEST_COLUMNS)}, got {reader.fieldnames}")
            rows = list(reader)
    except OSError as exc:
        raise ValidationError(f"cannot read manifest {path}: {exc}") from exc

    entries, bad_mos, bad_ids, missing = [], [], [], []
    for lineno, row in enumerate(rows, start=2):
        sid = (row["source_id"] or "").strip()
        try:
            check_id(sid)
        except ValidationError:
            bad_ids.append(f"line {lineno}: {sid!r}")
            continue
        try:
            mos = float(row["mos"])
            if not math.isfinite(mos):
                raise ValueError
        except (TypeError, ValueError):
            bad_mos.append(sid)
            continue
        video = (row["video_path"] or "").strip()
        resolved = Path(video) if Path(video).is_absolute() else path.parent / video
        if check_files and not resolved.is_file():
            missing.append(sid)
        entries.append(ManifestEntry(sid, str(resolved), mos))
    if bad_ids:
        raise ValidationError(f"{path}: invalid source ids: {'; '.join(bad_ids)}", bad_ids)
    if bad_mos:
        raise ValidationError(f"{path}: unparseable MOS for: {', '.join(bad_mos)}", bad_mos)
    if missing:
        raise ValidationError(f"{path}: missing video files for: {', '.join(missing)}", missing)
    if not entries:
        raise ValidationError(f"{path}: manifest has no entries")
    if mos_range is None:
        mos_range = KNOWN_MOS_RANGES.get(name)
    if mos_range is None:
        values = [e.mos for e in entries]
        lo, hi = min(values), max(values)
        mos_range = (lo, hi) if hi > lo else (lo - 0.5, hi + 0.5)
    return DatasetManifest(name=name, entries=entries, mos_range=tuple(float(v) for v in mos_range))


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for e in manifest.entries:
            video = Path(e.video_path)
            try:
                video = video.relative_to(path.parent)
            except ValueError:
                pass
            writer.writerow([e.source_id, str(video), repr(float(e.mos))])


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    run_index: int
    seed: int
    train: tuple
    val: tuple
    test: tuple

    def to_dict(self):
        return {"run_index": self.run_index, "seed": self.seed, "train": list(self.train),
                "val": list(self.val), "test": list(self.test)}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["run_index"]), int(d["seed"]), tuple(d["train"]), tuple(d["val"]), tuple(d["test"]))


def split_sizes(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple[int, int, int]:
    n_val = math.floor(n * fractions[1] + 0.5)
    n_test = math.floor(n * fractions[2] + 0.5)
    return n - n_val - n_test, n_val, n_test


def make_splits(manifest, base_seed: int = 0, runs: int = 10) -> list:
    """One fresh shuffle per run, seeded by ``base_seed + run_index``.

    Only the sorted id set matters, not manifest row order.
    """
    ids = sorted(manifest.ids if isinstance(manifest, DatasetManifest) else manifest)
    if len(ids) < 5:
        raise DomainError(f"need at least 5 videos to split, got {len(ids)}")
    n_train, n_val, _ = split_sizes(len(ids))
    plans = []
    for k in range(runs):
        seed = base_seed + k
        order = np.random.default_rng(seed).permutation(len(ids))
        shuffled = [ids[i] for i in order]
        plans.append(SplitPlan(k, seed, tuple(shuffled[:n_train]), tuple(shuffled[n_train:n_train + n_val]),
                               tuple(shuffled[n_train + n_val:])))
    return plans


# -- features for training ----------------------------------------------------------

@dataclass
class FeatureDataset:
    manifest: DatasetManifest
    features: dict
    backbone_tag: str = ""

    @property
    def name(self):
        return self.manifest.name

    @property
    def dim(self) -> int:
        return next(iter(self.features.values())).shape[1]

    def select(self, ids):
        return [self.features[i] for i in ids]

    def targets(self, ids) -> np.ndarray:
        mos = self.manifest.mos
        return np.array([mos[i] for i in ids], dtype=np.float64)


def load_features(manifest: DatasetManifest, cache_dir, backbone_tag: str) -> FeatureDataset:
    cache = FeatureCache(cache_dir)
    missing = [sid for sid in manifest.ids if not cache.exists(sid, backbone_tag)]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise CacheNotFoundError(
            f"{len(missing)} videos have no cached '{backbone_tag}' features under {cache_dir} ({shown}); "
            f"run `wildvqa extract` first")
    feats = {sid: cache.load(sid, backbone_tag).payload for sid in manifest.ids}
    dims = {f.shape[1] for f in feats.values()}
    if len(dims) != 1:
        raise ValidationError(f"mixed feature widths in cache: {sorted(dims)}")
    return FeatureDataset(manifest, feats, backbone_tag)


# -- synthetic data --------------------------------------------------------------

SYNTHETIC_TAG = "synthetic"


@dataclass(frozen=True)
class SyntheticSpec:
    """Planted-model dataset generator settings.

    Every video has a latent frame-quality signal: a base level with up to
    ``max_dips`` rectangular quality drops plus frame jitter. Features place
    that signal, rescaled by ``1/scale`` around 50, along one random unit
    direction and add nuisance variation (per frame and per video) in the
    orthogonal complement. The
    planted linear head reads the direction back, so MOS is the hysteresis
    pooling of the latent signal plus optional Gaussian noise. The
    ``content_rank`` directions carry large per-video offsets, so an untrained
    projection of the features says little about quality.
    """

    n_videos: int = 60
    n_frames: int = 30
    feature_dim: int = 16
    noise: float = 0.0
    seed: int = 0
    pooling: PoolingConfig = field(default_factory=PoolingConfig)
    min_frames: int | None = None
    base: tuple = (20.0, 80.0)
    max_dips: int = 2
    dip_depth: tuple = (10.0, 30.0)
    dip_width: tuple = (2, 8)
    jitter: float = 1.5
    nuisance: float = 0.5
    video_nuisance: float = 0.0
    # per-video content variation along a few fixed directions unrelated to quality
    content_rank: int = 0
    content_scale: float = 3.0
    scale: float = 25.0

    def __post_init__(self):
        if self.n_videos < 1 or self.n_frames < 1 or self.feature_dim < 2:
            raise DomainError("synthetic dataset sizes must be positive (feature_dim >= 2)")
        if self.noise < 0 or self.scale <= 0 or min(self.jitter, self.nuisance, self.video_nuisance) < 0:
            raise DomainError("synthetic noise levels must be non-negative and scale positive")
        if self.content_scale < 0 or not 0 <= self.content_rank < self.feature_dim:
            raise DomainError("content_rank must lie in [0, feature_dim) and content_scale be >= 0")
        if self.min_frames is not None and not 1 <= self.min_frames <= self.n_frames:
            raise DomainError("min_frames must lie in [1, n_frames]")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["pooling"] = self.pooling.to_dict()
        return d


@dataclass
class SyntheticDataset:
    spec: SyntheticSpec
    manifest: DatasetManifest
    records: list
    mos: np.ndarray
    clean_mos: np.ndarray
    direction: np.ndarray

    def planted_scores(self, payload) -> np.ndarray:
        """Frame scores of the planted head on a stored feature matrix."""
        return self.spec.scale * (np.asarray(payload, dtype=np.float64) @ self.direction) + 50.0

    def feature_dataset(self) -> FeatureDataset:
        return FeatureDataset(self.manifest, {r.source_id: r.payload for r in self.records}, SYNTHETIC_TAG)


def _latent_signal(rng, spec: SyntheticSpec, T: int) -> np.ndarray:
    s = np.full(T, rng.uniform(*spec.base))
    drop = np.zeros(T)
    for _ in range(rng.integers(0, spec.max_dips + 1)):
        width = int(rng.integers(spec.dip_width[0], spec.dip_width[1] + 1))
        start = int(rng.integers(0, max(1, T - width + 1)))
        depth = rng.uniform(*spec.dip_depth)
        drop[start:start + width] = np.maximum(drop[start:start + width], depth)
    return np.clip(s - drop + spec.jitter * rng.normal(size=T), 0.0, 100.0)


def synthesize_dataset(spec: SyntheticSpec = SyntheticSpec()) -> SyntheticDataset:
    rng = np.random.default_rng(spec.seed)
    D = spec.feature_dim
    u = rng.normal(size=D)
    u /= np.linalg.norm(u)
    complement = np.eye(D) - np.outer(u, u)
    content = np.zeros((0, D))
    if spec.content_rank:
        content = np.linalg.qr(complement @ rng.normal(size=(D, spec.content_rank)))[0].T

    records, mos, clean = [], [], []
    entries = []
    for v in range(spec.n_videos):
        T = spec.n_frames if spec.min_frames is None else int(rng.integers(spec.min_frames, spec.n_frames + 1))
        signal = _latent_signal(rng, spec, T)
        offset = rng.normal(size=D) * spec.video_nuisance
        if spec.content_rank:
            offset = offset + spec.content_scale * (rng.normal(size=spec.content_rank) @ content)
        wobble = rng.normal(size=(T, D)) * spec.nuisance
        feats = np.outer((signal - 50.0) / spec.scale, u) + (offset + wobble) @ complement
        payload = feats.astype(np.float32)
        # score the stored float32 features so the planted head reproduces MOS exactly
        q = spec.scale * (payload.astype(np.float64) @ u) + 50.0
        value = float(pool(q, spec.pooling).Q)
        sid = f"syn{v:04d}"
        records.append(FeatureCacheRecord(source_id=sid, payload=payload, backbone_tag=SYNTHETIC_TAG))
        clean.append(value)
        mos.append(value + spec.noise * rng.normal() if spec.noise > 0 else value)
        entries.append(ManifestEntry(sid, f"{sid}.npz", mos[-1]))
    lo, hi = 0.0, 100.0
    lo, hi = min(lo, min(mos)), max(hi, max(mos))
    manifest = DatasetManifest(name="synthetic", entries=entries, mos_range=(lo, hi))
    return SyntheticDataset(spec, manifest, records, np.array(mos), np.array(clean), u)


def write_synthetic(dataset: SyntheticDataset, out_dir, cache_dir=None) -> Path:
    """Write manifest CSV, ground truth JSON and cache records; returns the CSV path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cache = FeatureCache(cache_dir or out_dir / "cache")
    for record in dataset.records:
        cache.store(record)
    csv_path = out_dir / f"{dataset.manifest.name}.csv"
    write_manifest(dataset.manifest, csv_path)
    truth = {"spec": dataset.spec.to_dict(), "mos_range": list(dataset.manifest.mos_range),
             "direction": dataset.direction.tolist(),
             "clean_mos": dict(zip(dataset.manifest.ids, dataset.clean_mos.tolist()))}
    (out_dir / "ground_truth.json").write_text(json.dumps(truth, indent=2), encoding="utf-8")
    return csv_path


# -- synthetic videos ---------------------------------------------------------------

def planted_video_scores(frames) -> np.ndarray:
    """Planted frame score for synthetic videos: red-channel mean in percent."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames[..., 0].reshape(frames.shape[0], -1).mean(axis=1) / 255.0 * 100.0


def synthesize_videos(out_dir, n_videos: int = 3, n_frames: int = 24, size: int = 16, seed: int = 0,
                      pooling: PoolingConfig = PoolingConfig(), fps: float = 25.0):
    """Write small ``.npz`` videos with planted quality and a manifest CSV.

    Returns ``(csv_path, mos)``; MOS is the hysteresis pooling of the planted
    per-frame score computed straight from the pixels.
    """
    from .decode import synthetic_frames, write_npz_video

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    spec = SyntheticSpec(n_frames=n_frames, dip_depth=(15.0, 35.0), jitter=2.0)
    entries, mos = [], {}
    for v in range(n_videos):
        signal = _latent_signal(rng, spec, n_frames)
        frames = synthetic_frames(signal * 2.55, height=size, width=size, seed=seed + v)
        sid = f"vid{v:03d}"
        path = out_dir / f"{sid}.npz"
        write_npz_video(path, frames, fps=fps)
        value = float(pool(planted_video_scores(frames), pooling).Q)
        mos[sid] = value
        entries.append(ManifestEntry(sid, str(path), value))
    manifest = DatasetManifest(name="synthvideo", entries=entries, mos_range=(0.0, 100.0))
    csv_path = out_dir / "synthvideo.csv"
    write_manifest(manifest, csv_path)
    return csv_path, mos


def _planted_model(weights: np.ndarray, bias: float, pooling):
    import torch

    from .model import ModelConfig, QualityModel

    model = QualityModel(ModelConfig(feature_dim=weights.size, recurrent=False, pooling=pooling),
                         dtype=torch.float64)
    with torch.no_grad():
        model.reduce_weight.zero_()
        model.reduce_bias.zero_()
        model.reduce_weight[0] = torch.as_tensor(weights)
        model.reduce_bias[0] = bias
        model.head_weight.zero_()
        model.head_weight[0, 0] = 1.0
    return model.eval()


def planted_feature_model(dataset: SyntheticDataset):
    """Model whose frame scores are exactly the generator's planted head."""
    return _planted_model(dataset.spec.scale * dataset.direction, 50.0, dataset.spec.pooling)


def planted_video_model(pooling: PoolingConfig = PoolingConfig()):
    """Planted head for :func:`synthesize_videos` on top of the ``stub`` backbone."""
    weights = np.zeros(6)
    weights[0] = 100.0
    return _planted_model(weights, 0.0, pooling)
