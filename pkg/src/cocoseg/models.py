"""Two heterogeneous U-shaped segmentation branches plus per-scale projectors.

The conv branch is a plain U-Net; the attention branch tokenizes the image,
runs multi-head self-attention at two grid resolutions, and decodes with
transposed convolutions, so the two branches bring different inductive
biases to the same task.  Both expose feature taps identified purely by
spatial size, taken from decoder stages (the deepest stage included), and
both are free of cross-batch coupling (GroupNorm/LayerNorm only).

Each tap scale owns a projector: a branch-specific pointwise layer into a
hidden width, then a pointwise output layer whose parameters are one module
shared by both branches.  Projected pixels are L2-normalized unless
configured otherwise.

Checkpoints are a directory with one tensor file per named parameter and a
JSON index mapping names to files and shapes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from . import tensorio

BRANCH_CNN = "cnn"
BRANCH_ATTN = "attn"


class ConfigError(ValueError):
    """Model configuration cannot produce the requested geometry."""


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 4
    image_size: tuple[int, int] = (64, 64)
    cnn_base_channels: int = 16
    cnn_depth: int = 4
    attn_embed_dim: int = 64
    attn_heads: int = 4
    attn_blocks: int = 4
    attn_patch: int = 4
    tap_scales: tuple[tuple[int, int], ...] = ((64, 64), (16, 16), (8, 8))
    proj_hidden: int = 256
    proj_out: int = 128
    normalize_embeddings: bool = True
    projector_hidden_act: bool = True

    def __post_init__(self) -> None:
        if self.proj_out <= 0 or self.proj_hidden <= 0:
            raise ConfigError("projector widths must be positive")
        if self.attn_embed_dim % self.attn_heads:
            raise ConfigError("attn_embed_dim must divide by attn_heads")


def _norm(channels: int) -> nn.Module:
    return nn.GroupNorm(min(8, channels), channels)


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(c_in, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
            nn.Conv2d(c_out, c_out, 3, padding=1),
            _norm(c_out),
            nn.ReLU(inplace=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class UNetBranch(nn.Module):
    """Standard U-Net; decoder features (bottleneck included) are the taps."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w = config.image_size
        depth = config.cnn_depth
        down = 2 ** (depth - 1)
        if h % down or w % down:
            raise ConfigError(f"image {config.image_size} not divisible by {down}")
        base = config.cnn_base_channels

        self.enc = nn.ModuleList(
            [ConvBlock(1 if k == 0 else base * 2 ** (k - 1), base * 2**k) for k in range(depth - 1)]
        )
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = ConvBlock(base * 2 ** (depth - 2), base * 2 ** (depth - 1))
        ups, decs = [], []
        for k in range(depth - 2, -1, -1):
            ch = base * 2 ** (k + 1)
            ups.append(nn.ConvTranspose2d(ch, ch // 2, 2, stride=2))
            decs.append(ConvBlock(ch, ch // 2))
        self.ups = nn.ModuleList(ups)
        self.decs = nn.ModuleList(decs)
        self.head = nn.Conv2d(base, config.num_classes, 1)

        self.tap_sizes = [(h // 2**k, w // 2**k) for k in range(depth - 1, -1, -1)]
        self.tap_channels = {
            (h // 2**k, w // 2**k): base * 2**k for k in range(depth - 1, -1, -1)
        }

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict]:
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        feats = {tuple(x.shape[-2:]): x}
        for up, dec, skip in zip(self.ups, self.decs, reversed(skips)):
            x = dec(torch.cat([up(x), skip], dim=1))
            feats[tuple(x.shape[-2:])] = x
        return self.head(x), feats


class TransformerBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(
            nn.Linear(dim, 4 * dim), nn.GELU(), nn.Linear(4 * dim, dim)
        )

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        y = self.norm1(tokens)
        tokens = tokens + self.attn(y, y, y, need_weights=False)[0]
        return tokens + self.mlp(self.norm2(tokens))


class AttnBranch(nn.Module):
    """Tokenized encoder with self-attention at two grids, conv decoder.

    With ``attn_blocks=0`` the attention stages are empty and the branch
    degenerates to patch embedding plus decoder (ablation configuration).
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        h, w = config.image_size
        p = config.attn_patch
        if h % p or w % p:
            raise ConfigError(f"image {config.image_size} not divisible by patch {p}")
        g1 = (h // p, w // p)
        if g1[0] % 2 or g1[1] % 2:
            raise ConfigError(f"token grid {g1} must be even for the deep stage")
        g2 = (g1[0] // 2, g1[1] // 2)
        dim = config.attn_embed_dim

        self.patch_embed = nn.Conv2d(1, dim, p, stride=p)
        self.pos_embed = nn.Parameter(torch.zeros(1, dim, *g1))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        n1 = config.attn_blocks // 2
        self.stage1 = nn.ModuleList(TransformerBlock(dim, config.attn_heads) for _ in range(n1))
        self.merge = nn.Conv2d(dim, 2 * dim, 2, stride=2)
        self.stage2 = nn.ModuleList(
            TransformerBlock(2 * dim, config.attn_heads)
            for _ in range(config.attn_blocks - n1)
        )

        n_up = int(np.log2(h // g2[0]))
        if g2[0] * 2**n_up != h or g2[1] * 2**n_up != w:
            raise ConfigError("decoder cannot reach full resolution by doubling")
        chans = [max(2 * dim >> k, 8) for k in range(n_up + 1)]
        ups, decs = [], []
        for k in range(n_up):
            ups.append(nn.ConvTranspose2d(chans[k], chans[k + 1], 2, stride=2))
            skip = dim if k == 0 else 0
            decs.append(ConvBlock(chans[k + 1] + skip, chans[k + 1]))
        self.ups = nn.ModuleList(ups)
        self.decs = nn.ModuleList(decs)
        self.head = nn.Conv2d(chans[-1], config.num_classes, 1)

        self.grid1, self.grid2 = g1, g2
        self.tap_sizes = [(g2[0] * 2**k, g2[1] * 2**k) for k in range(n_up + 1)]
        self.tap_channels = {
            (g2[0] * 2**k, g2[1] * 2**k): chans[k] for k in range(n_up + 1)
        }

    def _run_blocks(self, x: torch.Tensor, blocks: nn.ModuleList) -> torch.Tensor:
        b, c, gh, gw = x.shape
        tokens = x.flatten(2).transpose(1, 2)
        for block in blocks:
            tokens = block(tokens)
        return tokens.transpose(1, 2).reshape(b, c, gh, gw)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, dict]:
        x = self.patch_embed(x) + self.pos_embed
        skip = self._run_blocks(x, self.stage1)
        x = self._run_blocks(self.merge(skip), self.stage2)
        feats = {tuple(x.shape[-2:]): x}
        for k, (up, dec) in enumerate(zip(self.ups, self.decs)):
            x = up(x)
            if k == 0:
                x = torch.cat([x, skip], dim=1)
            x = dec(x)
            feats[tuple(x.shape[-2:])] = x
        return self.head(x), feats


class ScaleProjector(nn.Module):
    """Two pointwise layers; the output layer is shared between branches."""

    def __init__(self, c_cnn: int, c_attn: int, config: ModelConfig):
        super().__init__()
        self.cnn_head = nn.Conv2d(c_cnn, config.proj_hidden, 1)
        self.attn_head = nn.Conv2d(c_attn, config.proj_hidden, 1)
        self.shared = nn.Conv2d(config.proj_hidden, config.proj_out, 1)
        self.use_act = config.projector_hidden_act
        self.normalize = config.normalize_embeddings

    def forward(self, features: torch.Tensor, branch: str) -> torch.Tensor:
        head = self.cnn_head if branch == BRANCH_CNN else self.attn_head
        x = head(features)
        if self.use_act:
            x = F.relu(x)
        x = self.shared(x)
        if self.normalize:
            x = F.normalize(x, dim=1)
        return x


def _scale_key(scale: tuple[int, int]) -> str:
    return f"{scale[0]}x{scale[1]}"


class DualModel(nn.Module):
    """Conv branch + attention branch + per-scale projectors."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.cnn = UNetBranch(config)
        self.attn = AttnBranch(config)
        for scale in config.tap_scales:
            scale = tuple(scale)
            if scale not in self.cnn.tap_channels:
                raise ConfigError(
                    f"conv branch has no decoder stage at {scale}; "
                    f"available: {sorted(self.cnn.tap_channels)}"
                )
            if scale not in self.attn.tap_channels:
                raise ConfigError(
                    f"attention branch has no decoder stage at {scale}; "
                    f"available: {sorted(self.attn.tap_channels)}"
                )
        self.projectors = nn.ModuleDict(
            {
                _scale_key(scale): ScaleProjector(
                    self.cnn.tap_channels[tuple(scale)],
                    self.attn.tap_channels[tuple(scale)],
                    config,
                )
                for scale in config.tap_scales
            }
        )

    def forward_cnn(self, images: torch.Tensor) -> tuple[torch.Tensor, dict]:
        logits, feats = self.cnn(images)
        return logits, {tuple(s): feats[tuple(s)] for s in self.config.tap_scales}

    def forward_attn(self, images: torch.Tensor) -> tuple[torch.Tensor, dict]:
        logits, feats = self.attn(images)
        return logits, {tuple(s): feats[tuple(s)] for s in self.config.tap_scales}

    def project(
        self, features: torch.Tensor, scale: tuple[int, int], branch: str
    ) -> torch.Tensor:
        key = _scale_key(tuple(scale))
        if key not in self.projectors:
            raise ConfigError(f"no projector for scale {scale}")
        if branch not in (BRANCH_CNN, BRANCH_ATTN):
            raise ValueError(f"unknown branch {branch!r}")
        return self.projectors[key](features, branch)


def save_checkpoint(model: DualModel, out_dir: str | Path) -> None:
    """One tensor file per named parameter plus a JSON index."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {"config": config_to_dict(model.config), "params": {}}
    for i, (name, tensor) in enumerate(model.state_dict().items()):
        fname = f"param_{i:04d}.mct"
        tensorio.write_tensor(out_dir / fname, tensor.detach().cpu().numpy().astype(np.float32))
        index["params"][name] = {"file": fname, "shape": list(tensor.shape)}
    (out_dir / "index.json").write_text(json.dumps(index, indent=2) + "\n")


def load_checkpoint(
    model: DualModel, ckpt_dir: str | Path, strict: bool = True
) -> tuple[list[str], list[str]]:
    """Load parameters from a checkpoint directory.

    Returns (missing, unexpected) parameter names; with ``strict`` either
    being non-empty raises.
    """
    ckpt_dir = Path(ckpt_dir)
    index = json.loads((ckpt_dir / "index.json").read_text())
    state = model.state_dict()
    loaded = {}
    for name, meta in index["params"].items():
        if name in state:
            arr = tensorio.read_tensor(ckpt_dir / meta["file"])
            loaded[name] = torch.from_numpy(arr).reshape(meta["shape"])
    missing = sorted(set(state) - set(loaded))
    unexpected = sorted(set(index["params"]) - set(state))
    if strict and (missing or unexpected):
        raise ValueError(f"checkpoint mismatch: missing={missing}, unexpected={unexpected}")
    state.update(loaded)
    model.load_state_dict(state)
    return missing, unexpected


def load_checkpoint_model(ckpt_dir: str | Path, strict: bool = True) -> DualModel:
    """Rebuild a model from the config stored in a checkpoint and load it."""
    index = json.loads((Path(ckpt_dir) / "index.json").read_text())
    config = config_from_dict(index["config"])
    model = DualModel(config)
    load_checkpoint(model, ckpt_dir, strict=strict)
    return model


def config_to_dict(config: ModelConfig) -> dict:
    return {
        "num_classes": config.num_classes,
        "image_size": list(config.image_size),
        "cnn_base_channels": config.cnn_base_channels,
        "cnn_depth": config.cnn_depth,
        "attn_embed_dim": config.attn_embed_dim,
        "attn_heads": config.attn_heads,
        "attn_blocks": config.attn_blocks,
        "attn_patch": config.attn_patch,
        "tap_scales": [list(s) for s in config.tap_scales],
        "proj_hidden": config.proj_hidden,
        "proj_out": config.proj_out,
        "normalize_embeddings": config.normalize_embeddings,
        "projector_hidden_act": config.projector_hidden_act,
    }


def config_from_dict(raw: dict) -> ModelConfig:
    raw = dict(raw)
    raw["image_size"] = tuple(raw["image_size"])
    raw["tap_scales"] = tuple(tuple(s) for s in raw["tap_scales"])
    return ModelConfig(**raw)
