"""3D-CNN mapping a face clip to a T x S x S block of rPPG traces."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import FormatError, InvalidConfigError, ShapeError
from .signal import Signal, pearson_tensor

CHECKPOINT_VERSION = 1
ALLOWED_S = (1, 2, 4, 8)


@dataclass
class ModelConfig:
    S: int = 2
    widths: tuple[int, int, int] = (8, 16, 16)
    norm: str = "batch"             # batch | group | none
    activation: str = "elu"         # elu | relu
    seed: int = 0

    def validate(self) -> None:
        if self.S not in ALLOWED_S:
            raise InvalidConfigError(f"S must be one of {ALLOWED_S}, got {self.S}")
        if len(self.widths) != 3 or min(self.widths) < 1:
            raise InvalidConfigError(f"widths must be three positive ints, got {self.widths}")
        if self.norm not in ("batch", "group", "none"):
            raise InvalidConfigError(f"unknown norm {self.norm!r}")
        if self.activation not in ("elu", "relu"):
            raise InvalidConfigError(f"unknown activation {self.activation!r}")


def _block(cfg: ModelConfig, cin: int, cout: int, kernel, stride=1, padding=0,
           transpose: bool = False) -> nn.Sequential:
    conv_cls = nn.ConvTranspose3d if transpose else nn.Conv3d
    layers: list[nn.Module] = [conv_cls(cin, cout, kernel, stride=stride, padding=padding)]
    if cfg.norm == "batch":
        layers.append(nn.BatchNorm3d(cout))
    elif cfg.norm == "group":
        layers.append(nn.GroupNorm(1, cout))
    layers.append(nn.ELU() if cfg.activation == "elu" else nn.ReLU())
    return nn.Sequential(*layers)


class STRppgModel(nn.Module):
    """Encoder-decoder over (time, height, width).

    The input is averaged 2x2 before the stem.  Two stages then downsample
    space only, two stages halve time and two transposed convolutions restore
    it.  A 1-channel head is pooled adaptively to S x S.  Input is
    (B, T, H, W, 3) in [0, 1]; output is (B, T, S, S).
    """

    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config or ModelConfig()
        self.config.validate()
        c0, c1, c2 = self.config.widths
        cfg = self.config
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(cfg.seed)
            self.stem = _block(cfg, 3, c0, (1, 3, 3), padding=(0, 1, 1))
            self.spatial1 = _block(cfg, c0, c1, 3, padding=1)
            self.spatial2 = _block(cfg, c1, c1, 3, padding=1)
            self.down1 = _block(cfg, c1, c2, 3, stride=(2, 1, 1), padding=1)
            self.down2 = _block(cfg, c2, c2, 3, stride=(2, 1, 1), padding=1)
            self.up1 = _block(cfg, c2, c2, (4, 1, 1), stride=(2, 1, 1), padding=(1, 0, 0), transpose=True)
            self.up2 = _block(cfg, c2, c2, (4, 1, 1), stride=(2, 1, 1), padding=(1, 0, 0), transpose=True)
            self.head = nn.Conv3d(c2, 1, 1)

    @property
    def S(self) -> int:
        return self.config.S

    def forward(self, video: torch.Tensor) -> torch.Tensor:
        if video.ndim != 5 or video.shape[-1] != 3:
            raise ShapeError(f"expected (B, T, H, W, 3), got {tuple(video.shape)}")
        b, t, h, w, _ = video.shape
        if t < 4 or h < 16 or w < 16:
            raise ShapeError(f"clip too small: T={t}, H={h}, W={w}")
        x = video.permute(0, 4, 1, 2, 3)
        # AC/DC normalisation: relative change of each pixel around its temporal mean
        dc = x.mean(dim=2, keepdim=True).clamp_min(1e-3)
        x = x / dc - 1.0
        x = F.avg_pool3d(x, (1, 2, 2))
        x = self.stem(x)
        x = F.avg_pool3d(x, (1, 2, 2))
        x = self.spatial1(x)
        x = F.avg_pool3d(x, (1, 2, 2))
        x = self.spatial2(x)
        x = self.down1(x)
        x = self.down2(x)
        x = self.up1(x)
        x = self.up2(x)
        x = self.head(x)
        x = F.adaptive_avg_pool3d(x, (t, self.S, self.S))
        return x[:, 0]


def inference_rppg(block: torch.Tensor) -> torch.Tensor:
    """Spatial mean of a (..., T, S, S) block."""
    return block.mean(dim=(-2, -1))


def predict_rppg(model: STRppgModel, frames: np.ndarray, fps: float) -> Signal:
    """Model output for one (T, H, W, 3) clip, averaged over space."""
    model.eval()
    dtype = next(model.parameters()).dtype
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(frames), dtype=dtype)[None]
        y = inference_rppg(model(x))[0]
    return Signal(y.double().numpy(), fps)


def input_gradient(model: STRppgModel, frames: np.ndarray, reference) -> np.ndarray:
    """d pearson(inference(model(frames)), reference) / d frames, weights frozen."""
    ref_values = reference.values if isinstance(reference, Signal) else np.asarray(reference)
    model.eval()
    dtype = next(model.parameters()).dtype
    flags = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        x = torch.tensor(np.asarray(frames), dtype=dtype, requires_grad=True)
        ref = torch.as_tensor(ref_values, dtype=dtype)
        out = inference_rppg(model(x[None]))[0]
        r = pearson_tensor(out, ref)
        r.backward()
    finally:
        for p, flag in zip(model.parameters(), flags):
            p.requires_grad_(flag)
    return x.grad.numpy()


def saliency_map(model: STRppgModel, frames: np.ndarray, reference) -> np.ndarray:
    """H x W mean absolute input gradient over time and colour channels."""
    return np.abs(input_gradient(model, frames, reference)).mean(axis=(0, 3))


# ---------------------------------------------------------------------------


def save_checkpoint(path: str | Path, model: STRppgModel, extra: dict | None = None) -> None:
    cfg = asdict(model.config)
    cfg["widths"] = list(cfg["widths"])
    torch.save({"version": CHECKPOINT_VERSION, "model_config": cfg,
                "state_dict": model.state_dict(), "extra": extra or {}}, path)


def load_checkpoint(path: str | Path) -> tuple[STRppgModel, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or "version" not in payload:
        raise FormatError(f"{path}: checkpoint has no version field", field="version")
    if payload["version"] != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {payload['version']}",
                          field="version")
    cfg = dict(payload["model_config"])
    cfg["widths"] = tuple(cfg["widths"])
    model = STRppgModel(ModelConfig(**cfg))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("extra", {})
