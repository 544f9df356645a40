"""Desk-scale depth network: patch-transformer encoder, convolutional decoder.

The encoder embeds non-overlapping patches, adds a learned positional term
and runs pre-norm self-attention blocks; the decoder projects tokens back to
a spatial grid and refines it through two upsample+conv stages into a single
strictly positive depth channel. Inputs whose sides are not multiples of the
patch size are replicate-padded on the bottom/right, so the token grid is
ceil(H/p) x ceil(W/p).
"""

from __future__ import annotations

import copy
import hashlib
import io
import math
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .depthdata import DepthMap, RGBImage, atomic_write_bytes
from .errors import CheckpointError, MissingFileError, ShapeMismatchError

CHECKPOINT_VERSION = 1
DEPTH_FLOOR = 1e-3  # softplus offset keeping every output strictly positive


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 8
    embed_dim: int = 32
    n_blocks: int = 2
    n_heads: int = 4
    decoder_channels: int = 24
    input_size: tuple[int, int] = (64, 96)

    def __post_init__(self):
        for name in ("patch_size", "embed_dim", "n_blocks", "n_heads", "decoder_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.embed_dim % self.n_heads != 0:
            raise ValueError(
                f"embed_dim {self.embed_dim} is not divisible by n_heads {self.n_heads}"
            )
        h, w = self.input_size
        if h < 1 or w < 1:
            raise ValueError("input_size must be at least 1x1")
        object.__setattr__(self, "input_size", (int(h), int(w)))

    @property
    def grid_size(self) -> tuple[int, int]:
        h, w = self.input_size
        return (math.ceil(h / self.patch_size), math.ceil(w / self.patch_size))

    @property
    def n_tokens(self) -> int:
        gh, gw = self.grid_size
        return gh * gw


@dataclass(frozen=True)
class FeatureMap:
    """Token grid (grid_h, grid_w, embed_dim) from the final encoder block."""

    tokens: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tokens)
        if t.ndim != 3:
            raise ValueError(f"expected (grid_h, grid_w, dim) tokens, got {t.shape}")
        if not np.isfinite(t).all():
            raise ValueError("feature tokens contain non-finite values")
        object.__setattr__(self, "tokens", t)

    @property
    def grid_size(self) -> tuple[int, int]:
        return self.tokens.shape[:2]


class _Block(nn.Module):
    """Pre-norm multi-head self-attention followed by a pre-norm MLP."""

    def __init__(self, dim: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim)
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, 4 * dim)
        self.fc2 = nn.Linear(4 * dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        head_dim = d // self.n_heads
        h = self.norm1(x)
        qkv = self.qkv(h).reshape(b, n, 3, self.n_heads, head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (head_dim ** -0.5)
        attn = attn.softmax(dim=-1)
        h = (attn @ v).transpose(1, 2).reshape(b, n, d)
        x = x + self.proj(h)
        x = x + self.fc2(F.gelu(self.fc1(self.norm2(x))))
        return x


class DepthModel(nn.Module):
    """Maps a (B, 3, H, W) image batch to a (B, 1, H, W) positive depth batch."""

    def __init__(self, config: ModelConfig, init_seed: int = 0):
        super().__init__()
        self.config = config
        self.init_seed = int(init_seed)
        d = config.embed_dim
        dec = config.decoder_channels
        self.patch_embed = nn.Conv2d(3, d, kernel_size=config.patch_size,
                                     stride=config.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, config.n_tokens, d))
        self.blocks = nn.ModuleList(_Block(d, config.n_heads) for _ in range(config.n_blocks))
        self.norm = nn.LayerNorm(d)
        self.decoder_proj = nn.Linear(d, dec)
        self.decoder_conv1 = nn.Conv2d(dec, dec, kernel_size=3, padding=1)
        self.decoder_conv2 = nn.Conv2d(dec, dec, kernel_size=3, padding=1)
        self.head = nn.Conv2d(dec, 1, kernel_size=3, padding=1)

    def _check_input(self, x: torch.Tensor) -> None:
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (h, w):
            raise ShapeMismatchError(
                f"expected input batch of shape (B, 3, {h}, {w}), got {tuple(x.shape)}"
            )

    def encode_tokens(self, x: torch.Tensor) -> torch.Tensor:
        """Final-block tokens, shape (B, n_tokens, embed_dim)."""
        self._check_input(x)
        p = self.config.patch_size
        pad_h = (-x.shape[2]) % p
        pad_w = (-x.shape[3]) % p
        if pad_h or pad_w:
            x = F.pad(x, (0, pad_w, 0, pad_h), mode="replicate")
        t = self.patch_embed(x).flatten(2).transpose(1, 2)
        t = t + self.pos_embed
        for block in self.blocks:
            t = block(t)
        return self.norm(t)

    def decode_tokens(self, tokens: torch.Tensor) -> torch.Tensor:
        """Dense depth from encoder tokens; same spatial size as the input."""
        gh, gw = self.config.grid_size
        b = tokens.shape[0]
        z = self.decoder_proj(tokens).transpose(1, 2).reshape(b, -1, gh, gw)
        z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=True)
        z = F.relu(self.decoder_conv1(z))
        z = F.interpolate(z, scale_factor=2, mode="bilinear", align_corners=True)
        z = F.relu(self.decoder_conv2(z))
        z = F.interpolate(z, size=self.config.input_size, mode="bilinear",
                          align_corners=True)
        return F.softplus(self.head(z)) + DEPTH_FLOOR

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_tokens(self.encode_tokens(x))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(config: ModelConfig, seed: int) -> DepthModel:
    """Build a model with scaled-uniform fan-in initialization from `seed`.

    Weight matrices draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in)), the
    positional embedding from U(-0.02, 0.02); LayerNorm gains start at one,
    all biases at zero. Two calls with equal (config, seed) produce
    bit-identical parameters.
    """
    model = DepthModel(config, init_seed=seed)
    gen = torch.Generator().manual_seed(int(seed) & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name == "pos_embed":
                p.uniform_(-0.02, 0.02, generator=gen)
            elif p.ndim >= 2:  # linear / conv weights
                fan_in = int(np.prod(p.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                p.uniform_(-bound, bound, generator=gen)
            elif name.endswith("weight"):  # LayerNorm gains
                p.fill_(1.0)
            else:  # biases
                p.zero_()
    return model


def _image_to_tensor(image: RGBImage) -> torch.Tensor:
    arr = np.ascontiguousarray(image.pixels.transpose(2, 0, 1), dtype=np.float32)
    return torch.from_numpy(arr).unsqueeze(0)


def predict_depth(model: DepthModel, image: RGBImage) -> DepthMap:
    """Run the model on one image; every output pixel is valid and positive."""
    model.eval()
    with torch.no_grad():
        out = model(_image_to_tensor(image))
    values = out[0, 0].numpy()
    return DepthMap(values, np.ones_like(values, dtype=bool))


def encode_image(model: DepthModel, image: RGBImage) -> FeatureMap:
    """Final-encoder-block tokens for one image as a (grid_h, grid_w, dim) grid."""
    model.eval()
    with torch.no_grad():
        tokens = model.encode_tokens(_image_to_tensor(image))
    gh, gw = model.config.grid_size
    return FeatureMap(tokens[0].reshape(gh, gw, -1).numpy())


def model_fingerprint(model: DepthModel) -> str:
    """Short content hash of the config plus every parameter array."""
    digest = hashlib.sha256()
    digest.update(repr(model.config).encode())
    for name, p in sorted(model.state_dict().items()):
        digest.update(name.encode())
        digest.update(p.detach().numpy().astype("<f4").tobytes())
    return digest.hexdigest()[:16]


# ---------------------------------------------------------------------------
# Checkpoints: zip archive of a plain-text header plus one .npy per array.

_HEADER_NAME = "header.txt"


def _config_lines(model: DepthModel) -> str:
    cfg = model.config
    h, w = cfg.input_size
    lines = [
        f"format_version {CHECKPOINT_VERSION}",
        f"patch_size {cfg.patch_size}",
        f"embed_dim {cfg.embed_dim}",
        f"n_blocks {cfg.n_blocks}",
        f"n_heads {cfg.n_heads}",
        f"decoder_channels {cfg.decoder_channels}",
        f"input_height {h}",
        f"input_width {w}",
        f"init_seed {model.init_seed}",
    ]
    return "\n".join(lines) + "\n"


def save_checkpoint(model: DepthModel, path: str | Path) -> None:
    """Write config header + named little-endian float32 arrays as a zip."""
    buf = io.BytesIO()
    stamp = (1980, 1, 1, 0, 0, 0)  # fixed so identical states give identical bytes
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(zipfile.ZipInfo(_HEADER_NAME, date_time=stamp), _config_lines(model))
        for name, tensor in model.state_dict().items():
            arr = tensor.detach().numpy().astype("<f4")
            abuf = io.BytesIO()
            np.save(abuf, arr)
            zf.writestr(zipfile.ZipInfo(f"params/{name}.npy", date_time=stamp),
                        abuf.getvalue())
    atomic_write_bytes(path, buf.getvalue())


def _parse_header(text: str) -> dict[str, int]:
    fields = {}
    for line in text.strip().splitlines():
        parts = line.split()
        if len(parts) != 2:
            raise CheckpointError(f"malformed checkpoint header line: {line!r}")
        try:
            fields[parts[0]] = int(parts[1])
        except ValueError as exc:
            raise CheckpointError(f"non-integer checkpoint header value: {line!r}") from exc
    return fields


def load_checkpoint(path: str | Path) -> DepthModel:
    """Rebuild a model from `save_checkpoint` output; bit-exact round trip."""
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    try:
        zf = zipfile.ZipFile(path)
    except zipfile.BadZipFile as exc:
        raise CheckpointError(f"corrupt checkpoint (not a zip archive): {path}") from exc
    with zf:
        if zf.testzip() is not None:
            raise CheckpointError(f"corrupt checkpoint (bad CRC): {path}")
        try:
            header = _parse_header(zf.read(_HEADER_NAME).decode("utf-8"))
        except KeyError as exc:
            raise CheckpointError(f"checkpoint missing {_HEADER_NAME}: {path}") from exc
        version = header.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version} unsupported "
                f"(expected {CHECKPOINT_VERSION}): {path}"
            )
        try:
            config = ModelConfig(
                patch_size=header["patch_size"],
                embed_dim=header["embed_dim"],
                n_blocks=header["n_blocks"],
                n_heads=header["n_heads"],
                decoder_channels=header["decoder_channels"],
                input_size=(header["input_height"], header["input_width"]),
            )
        except (KeyError, ValueError) as exc:
            raise CheckpointError(f"invalid checkpoint config: {exc}") from exc

        model = DepthModel(config, init_seed=header.get("init_seed", 0))
        state = {}
        for name, ref in model.state_dict().items():
            member = f"params/{name}.npy"
            try:
                raw = zf.read(member)
                arr = np.load(io.BytesIO(raw))
            except KeyError as exc:
                raise CheckpointError(f"checkpoint missing array {name!r}: {path}") from exc
            except (ValueError, EOFError) as exc:
                raise CheckpointError(f"corrupt array {name!r} in checkpoint: {path}") from exc
            if tuple(arr.shape) != tuple(ref.shape):
                raise CheckpointError(
                    f"array {name!r} has shape {tuple(arr.shape)}, config implies "
                    f"{tuple(ref.shape)}: {path}"
                )
            state[name] = torch.from_numpy(arr.astype(np.float32))
        model.load_state_dict(state)
    return model


def clone_model(model: DepthModel) -> DepthModel:
    """Deep copy with identical parameter values."""
    return copy.deepcopy(model)
