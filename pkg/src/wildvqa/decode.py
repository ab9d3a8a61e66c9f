"""Video decoding adapters.

``open_video`` picks an adapter by file extension: ``.npz`` archives holding
raw frames (used for synthetic data and tests) or anything else through an
``ffmpeg`` pipe.
"""

from __future__ import annotations

import json
import shutil
import subprocess
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import DecodeError


class NpzVideo:
    """Raw frames stored as ``frames`` (T x H x W x 3, uint8) and ``fps``."""

    def __init__(self, path, source_id=None):
        self.path = Path(path)
        self.source_id = source_id or self.path.stem
        try:
            with np.load(self.path, allow_pickle=False) as data:
                self._frames = data["frames"]
                self.frame_rate = float(data["fps"]) if "fps" in data else 25.0
        except (OSError, ValueError, KeyError) as exc:
            raise DecodeError(f"cannot read {self.path}: {exc}", frame_index=0) from exc
        if self._frames.ndim != 4 or self._frames.shape[-1] != 3 or self._frames.dtype != np.uint8:
            raise DecodeError(f"{self.path}: frames must be uint8 T x H x W x 3", frame_index=0)

    def __len__(self):
        return self._frames.shape[0]

    def __iter__(self):
        return iter(self._frames)


def write_npz_video(path, frames, fps: float = 25.0):
    frames = np.asarray(frames, dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, frames=frames, fps=np.float64(fps))


def synthetic_frames(levels, height: int = 16, width: int = 16, texture: float = 20.0, seed: int = 0):
    """Frames whose brightness follows ``levels`` (0..255) with seeded texture."""
    rng = np.random.default_rng(seed)
    levels = np.asarray(levels, dtype=np.float64)
    pattern = rng.normal(size=(height, width, 3)) * texture
    tint = np.array([1.0, 0.8, 0.6])
    frames = levels[:, None, None, None] * tint + pattern[None]
    return np.clip(np.rint(frames), 0, 255).astype(np.uint8)


class FFmpegVideo:
    """Decode through an ``ffmpeg`` subprocess reading raw RGB frames from a pipe."""

    def __init__(self, path, source_id=None, ffmpeg="ffmpeg", ffprobe="ffprobe"):
        self.path = Path(path)
        self.source_id = source_id or self.path.stem
        self.ffmpeg = shutil.which(ffmpeg)
        self.ffprobe = shutil.which(ffprobe)
        if self.ffmpeg is None or self.ffprobe is None:
            raise DecodeError("ffmpeg/ffprobe not found on PATH; cannot decode " + str(self.path), frame_index=0)
        if not self.path.is_file():
            raise DecodeError(f"{self.path} does not exist", frame_index=0)
        self.width, self.height, self.frame_rate = self._probe()

    def _probe(self):
        cmd = [self.ffprobe, "-v", "error", "-select_streams", "v:0", "-show_entries",
               "stream=width,height,avg_frame_rate", "-of", "json", str(self.path)]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        try:
            stream = json.loads(proc.stdout)["streams"][0]
            fps = float(Fraction(stream["avg_frame_rate"]))
            return int(stream["width"]), int(stream["height"]), fps
        except (ValueError, KeyError, IndexError, ZeroDivisionError) as exc:
            raise DecodeError(f"ffprobe failed on {self.path}: {proc.stderr.strip()}", frame_index=0) from exc

    def __iter__(self):
        cmd = [self.ffmpeg, "-v", "error", "-i", str(self.path), "-f", "rawvideo", "-pix_fmt", "rgb24", "-"]
        size = self.width * self.height * 3
        proc = subprocess.Popen(cmd, stdout=subprocess.PIPE, stderr=subprocess.PIPE)
        t = 0
        try:
            while True:
                buf = proc.stdout.read(size)
                if not buf:
                    break
                if len(buf) != size:
                    raise DecodeError(f"{self.path}: truncated frame {t}", frame_index=t)
                yield np.frombuffer(buf, dtype=np.uint8).reshape(self.height, self.width, 3)
                t += 1
        finally:
            proc.stdout.close()
            err = proc.stderr.read().decode(errors="replace")
            proc.stderr.close()
            code = proc.wait()
        if code != 0:
            raise DecodeError(f"ffmpeg failed at frame {t} of {self.path}: {err.strip()}", frame_index=t)


def open_video(path, source_id=None):
    path = Path(path)
    if path.suffix.lower() == ".npz":
        return NpzVideo(path, source_id)
    return FFmpegVideo(path, source_id)
