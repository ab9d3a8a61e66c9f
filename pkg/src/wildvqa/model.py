"""Frame-quality model: affine reduction -> GRU -> affine score head -> temporal pooling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

from .errors import CheckpointError, NumericError, ShapeError
from .pooling import PoolingConfig, pool_batch


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    reduced_dim: int = 128
    hidden_dim: int = 32
    recurrent: bool = True
    # None pools frame scores with a plain temporal mean
    pooling: PoolingConfig | None = field(default_factory=PoolingConfig)

    def to_dict(self):
        return {
            "feature_dim": self.feature_dim,
            "reduced_dim": self.reduced_dim,
            "hidden_dim": self.hidden_dim,
            "recurrent": self.recurrent,
            "pooling": None if self.pooling is None else self.pooling.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("pooling") is not None:
            d["pooling"] = PoolingConfig(**d["pooling"])
        return cls(**d)


class QualityModel(nn.Module):
    """Holds every learnable parameter of the quality model.

    The recurrent unit is the original gated form: the reset gate scales the
    previous state *before* its hidden-to-candidate product,
    ``n = tanh(W_n x + U_n (r * h) + b_n)``, and ``h' = z * h + (1 - z) * n``.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=torch.float32):
        super().__init__()
        self.cfg = cfg
        D, R, H = cfg.feature_dim, cfg.reduced_dim, cfg.hidden_dim
        self.reduce_weight = nn.Parameter(torch.empty(R, D, dtype=dtype))
        self.reduce_bias = nn.Parameter(torch.zeros(R, dtype=dtype))
        head_in = R
        if cfg.recurrent:
            # gate row blocks are ordered [update, reset, candidate]
            self.gru_input_weight = nn.Parameter(torch.empty(3 * H, R, dtype=dtype))
            self.gru_hidden_weight = nn.Parameter(torch.empty(3 * H, H, dtype=dtype))
            self.gru_bias = nn.Parameter(torch.zeros(3 * H, dtype=dtype))
            self.register_buffer("h0", torch.zeros(H, dtype=dtype))
            head_in = H
        self.head_weight = nn.Parameter(torch.empty(1, head_in, dtype=dtype))
        self.head_bias = nn.Parameter(torch.zeros(1, dtype=dtype))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for name, p in self.named_parameters():
                if p.ndim == 2:
                    bound = 1.0 / math.sqrt(p.shape[1])
                    p.copy_(torch.rand(p.shape, generator=gen, dtype=torch.float64) * 2 * bound - bound)
                else:
                    p.zero_()

    # -- stages -----------------------------------------------------------

    def reduce(self, features: torch.Tensor) -> torch.Tensor:
        if features.shape[-1] != self.cfg.feature_dim:
            raise ShapeError(f"feature width {features.shape[-1]} != model input {self.cfg.feature_dim}")
        return torch.nn.functional.linear(features, self.reduce_weight, self.reduce_bias)

    def recur(self, x: torch.Tensor) -> torch.Tensor:
        """Hidden states for ``(T, R)`` or ``(B, T, R)`` input."""
        if not self.cfg.recurrent:
            raise ShapeError("model was built without the recurrent unit")
        if x.shape[-1] != self.cfg.reduced_dim:
            raise ShapeError(f"recurrent input width {x.shape[-1]} != {self.cfg.reduced_dim}")
        squeeze = x.ndim == 2
        if squeeze:
            x = x.unsqueeze(0)
        H = self.cfg.hidden_dim
        gates_x = torch.nn.functional.linear(x, self.gru_input_weight, self.gru_bias)
        U_zr = self.gru_hidden_weight[: 2 * H]
        U_n = self.gru_hidden_weight[2 * H:]
        h = self.h0.expand(x.shape[0], H)
        states = []
        for t in range(x.shape[1]):
            gx = gates_x[:, t]
            zr = torch.sigmoid(gx[:, : 2 * H] + h @ U_zr.T)
            z, r = zr[:, :H], zr[:, H:]
            n = torch.tanh(gx[:, 2 * H:] + (r * h) @ U_n.T)
            h = z * h + (1.0 - z) * n
            states.append(h)
        out = torch.stack(states, dim=1)
        if not torch.isfinite(out).all():
            bad = (~torch.isfinite(out)).any(dim=-1).any(dim=0).nonzero()[0, 0].item()
            raise NumericError(f"non-finite recurrent state at frame {bad}", frame_index=bad)
        return out[0] if squeeze else out

    def score_frames(self, h: torch.Tensor) -> torch.Tensor:
        if h.shape[-1] != self.head_weight.shape[1]:
            raise ShapeError(f"score head expects width {self.head_weight.shape[1]}, got {h.shape[-1]}")
        return torch.nn.functional.linear(h, self.head_weight, self.head_bias).squeeze(-1)

    def frame_scores(self, features: torch.Tensor) -> torch.Tensor:
        x = self.reduce(features)
        if self.cfg.recurrent:
            x = self.recur(x)
        return self.score_frames(x)

    # -- full pass ----------------------------------------------------------

    def _forward_one(self, features: torch.Tensor):
        q = self.frame_scores(features)
        return pool_batch(q.unsqueeze(0), [q.shape[0]], self.cfg.pooling)[0], q

    def forward(self, features: torch.Tensor, lengths=None):
        """Return ``(Q, q)``.

        ``features`` is ``(T, D)`` for one video or a zero-padded ``(B, T, D)``
        batch with true ``lengths``. Padded frames never enter pooling. In
        eval mode each video is computed at its own length, so a batched
        result is bit-identical to the unbatched one.
        """
        if features.ndim == 2:
            return self._forward_one(features)
        if features.ndim != 3:
            raise ShapeError(f"features must be (T, D) or (B, T, D), got {tuple(features.shape)}")
        B, T = features.shape[:2]
        if lengths is None:
            lengths = [T] * B
        lengths = [int(n) for n in lengths]
        if len(lengths) != B or min(lengths) < 1 or max(lengths) > T:
            raise ShapeError(f"lengths {lengths} incompatible with batch of shape {tuple(features.shape)}")
        if not self.training:
            Qs, qs = [], []
            for b, n in enumerate(lengths):
                Q, q = self._forward_one(features[b, :n])
                Qs.append(Q)
                qs.append(torch.nn.functional.pad(q, (0, T - n)))
            return torch.stack(Qs), torch.stack(qs)
        q = self.frame_scores(features)
        mask = torch.arange(T).unsqueeze(0) < torch.tensor(lengths).unsqueeze(1)
        return pool_batch(q, lengths, self.cfg.pooling), q * mask


def reduce(features, model: QualityModel):
    return model.reduce(features)


def recur(x, model: QualityModel):
    return model.recur(x)


def score_frames(h, model: QualityModel):
    return model.score_frames(h)


def forward(features, model: QualityModel, pooling: PoolingConfig | None = None):
    """Video quality and frame scores; ``pooling`` overrides the model's own."""
    q = model.frame_scores(features)
    cfg = model.cfg.pooling if pooling is None else pooling
    return pool_batch(q.unsqueeze(0), [q.shape[0]], cfg)[0], q


# -- checkpoints ---------------------------------------------------------------

WEIGHTS_FILE = "weights.pt"
MANIFEST_FILE = "checkpoint.json"


def save_checkpoint(directory, model: QualityModel, **meta) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = {k: v.detach().to(torch.float32).clone() for k, v in model.state_dict().items()}
    torch.save(state, directory / WEIGHTS_FILE)
    manifest = {"model": model.cfg.to_dict(), **meta}
    (directory / MANIFEST_FILE).write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return directory


def load_checkpoint(directory) -> tuple[QualityModel, dict]:
    directory = Path(directory)
    weights, manifest = directory / WEIGHTS_FILE, directory / MANIFEST_FILE
    if not weights.is_file() or not manifest.is_file():
        raise CheckpointError(f"no checkpoint at {directory} (expected {WEIGHTS_FILE} and {MANIFEST_FILE})")
    meta = json.loads(manifest.read_text(encoding="utf-8"))
    model = QualityModel(ModelConfig.from_dict(meta["model"]))
    try:
        model.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
    except RuntimeError as exc:
        raise CheckpointError(f"weights in {directory} do not match the declared model: {exc}") from exc
    model.eval()
    return model, meta
