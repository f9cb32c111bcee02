"""Small promptable encoder/decoder standing in for a SAM-style segmenter.

``encode`` produces a feature pyramid, ``encode_prompt`` turns point/box
prompts into role-tagged tokens, and ``decode`` rasterises the tokens as
additive bias maps on the coarsest level before a U-Net style decoder
returns per-pixel class logits at input resolution. Memory attention is a
pass-through: ``MemoryStub`` stores past embeddings but the decoder ignores it.

Tensors follow the torch ``B x C x H x W`` layout throughout.
"""

from __future__ import annotations

import hashlib
import json
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from enum import IntEnum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .dfe import DFE
from .pcsw import PromptSet, PseudoMaskHead

PARAM_BUDGET = 2_000_000


@dataclass(frozen=True)
class BackboneConfig:
    num_classes: int = 2
    in_channels: int = 1
    widths: tuple[int, ...] = (8, 16, 24, 32)
    strides: tuple[int, ...] = (1, 2, 4, 8)
    stem_width: int = 8
    prompt_sigma: float = 0.75  # Gaussian radius of a token bump, in coarsest-level cells
    use_dfe: bool = True

    def __post_init__(self):
        if len(self.widths) != len(self.strides) or len(self.widths) < 2:
            raise ValueError("need at least two pyramid levels with one stride each")
        ok = all(s >= 1 and s & (s - 1) == 0 for s in self.strides)
        ok = ok and all(a < b for a, b in zip(self.strides, self.strides[1:]))
        if not ok:
            raise ValueError(f"strides must be increasing powers of two, got {self.strides}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def total_stride(self) -> int:
        return self.strides[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class FeaturePyramid(list):
    """Feature maps ordered fine to coarse."""

    @property
    def shapes(self):
        return [tuple(f.shape[1:]) for f in self]


class Role(IntEnum):
    POINT_POSITIVE = 0
    POINT_NEGATIVE = 1
    BOX_CORNER = 2


@dataclass
class PromptEmbedding:
    """Tokens for one image: role tag, class id, (y, x) in pixels, embedding vector."""

    roles: list[Role] = field(default_factory=list)
    classes: list[int] = field(default_factory=list)
    coords: list[tuple[float, float]] = field(default_factory=list)
    vectors: torch.Tensor | None = None

    def __len__(self):
        return len(self.roles)


class MemoryStub:
    """Bounded store of past frame embeddings; not attended over."""

    def __init__(self, capacity: int = 4):
        self.capacity = capacity
        self.past_embeddings: deque = deque(maxlen=capacity)

    def push(self, embedding) -> None:
        self.past_embeddings.append(embedding)

    def __len__(self):
        return len(self.past_embeddings)


def _block(cin: int, cout: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
                         nn.GroupNorm(math.gcd(4, cout), cout), nn.SiLU())


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.stem = _block(cfg.in_channels, cfg.stem_width)
        self.levels = nn.ModuleList()
        cin, prev = cfg.stem_width, 1
        for width, stride in zip(cfg.widths, cfg.strides):
            layers = []
            for _ in range(int(math.log2(stride // prev))):
                layers.append(_block(cin, width, stride=2))
                cin = width
            layers.append(_block(cin, width))
            self.levels.append(nn.Sequential(*layers))
            cin, prev = width, stride

    def forward(self, x):
        h = self.stem(x)
        out = FeaturePyramid()
        for level in self.levels:
            h = level(h)
            out.append(h)
        return out


class PromptEncoder(nn.Module):
    """Learned role and class embeddings; box corners get one row per corner."""

    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.dim = cfg.widths[-1]
        self.role_embed = nn.Parameter(0.5 * torch.randn(2 + 4, self.dim))
        self.class_embed = nn.Parameter(0.5 * torch.randn(cfg.num_classes, self.dim))

    def forward(self, prompts: PromptSet, image_size) -> PromptEmbedding:
        h, w = image_size
        roles, classes, coords, rows = [], [], [], []
        for p in prompts.points:
            _check_inside(p.y, p.x, h, w)
            role = Role.POINT_POSITIVE if p.positive else Role.POINT_NEGATIVE
            roles.append(role)
            classes.append(p.class_id)
            coords.append((float(p.y), float(p.x)))
            rows.append(int(role))
        for b in prompts.boxes:
            corners = [(b.y0, b.x0), (b.y0, b.x1), (b.y1, b.x0), (b.y1, b.x1)]
            for k, (y, x) in enumerate(corners):
                _check_inside(y, x, h, w)
                roles.append(Role.BOX_CORNER)
                classes.append(b.class_id)
                coords.append((float(y), float(x)))
                rows.append(2 + k)
        if not roles:
            return PromptEmbedding(vectors=self.role_embed.new_zeros((0, self.dim)))
        if max(classes) >= self.class_embed.shape[0] or min(classes) < 0:
            raise ValueError(f"prompt class out of range: {classes}")
        vec = self.role_embed[torch.tensor(rows)] + self.class_embed[torch.tensor(classes)]
        return PromptEmbedding(roles, classes, coords, vec)


def _check_inside(y, x, h, w):
    if not (0 <= y < h and 0 <= x < w):
        raise ValueError(f"prompt coordinate ({y}, {x}) outside the {h}x{w} image")


def rasterize_tokens(emb: PromptEmbedding, grid, stride: int, sigma: float, like: torch.Tensor):
    """Sum of ``vector * gaussian(cell - token position)`` over the coarse grid."""
    gh, gw = grid
    if len(emb) == 0:
        return like.new_zeros((like.shape[-3], gh, gw))
    pos = (torch.tensor(emb.coords, dtype=like.dtype) + 0.5) / stride  # pixel centre -> grid units
    ys = (torch.arange(gh, dtype=like.dtype) + 0.5)[None, :, None]
    xs = (torch.arange(gw, dtype=like.dtype) + 0.5)[None, None, :]
    bumps = torch.exp(-((ys - pos[:, 0, None, None]) ** 2
                        + (xs - pos[:, 1, None, None]) ** 2) / (2 * sigma ** 2))
    return torch.einsum("tc,thw->chw", emb.vectors.to(like.dtype), bumps)


class MaskDecoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.fuse = nn.ModuleList(
            _block(w[i] + w[i + 1], w[i]) for i in range(len(w) - 1))
        self.head = nn.Sequential(_block(w[0], w[0]), nn.Conv2d(w[0], cfg.num_classes, 1))

    def forward(self, pyramid, bias=None, out_size=None):
        if [f.shape[1] for f in pyramid] != list(self.cfg.widths):
            raise ValueError(
                f"pyramid channels {[f.shape[1] for f in pyramid]} do not match decoder "
                f"widths {list(self.cfg.widths)}")
        y = pyramid[-1] if bias is None else pyramid[-1] + bias
        for i in range(len(pyramid) - 2, -1, -1):
            y = F.interpolate(y, size=pyramid[i].shape[-2:], mode="bilinear", align_corners=False)
            y = self.fuse[i](torch.cat([pyramid[i], y], dim=1))
        logits = self.head(y)
        if out_size is not None and tuple(logits.shape[-2:]) != tuple(out_size):
            logits = F.interpolate(logits, size=tuple(out_size), mode="bilinear",
                                   align_corners=False)
        return logits


class SSSNet(nn.Module):
    """Encoder ``g``, prompt encoder, optional DFE block, decoder ``h`` and the PCSW head."""

    def __init__(self, cfg: BackboneConfig = BackboneConfig()):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg)
        self.dfe = DFE(cfg.widths) if cfg.use_dfe else None
        self.decoder = MaskDecoder(cfg)
        self.pseudo_head = PseudoMaskHead(cfg.widths, cfg.num_classes)

    # -- stage-level interfaces ------------------------------------------------

    def encode(self, images: torch.Tensor) -> FeaturePyramid:
        h, w = images.shape[-2:]
        s = self.cfg.total_stride
        if h % s or w % s:
            ph, pw = (-h) % s, (-w) % s
            raise ValueError(
                f"image {h}x{w} is not divisible by the total stride {s}; "
                f"pad by ({ph}, {pw}) pixels to {h + ph}x{w + pw}")
        return self.encoder(images)

    def encode_prompt(self, prompts: PromptSet | None, image_size) -> PromptEmbedding:
        return self.prompt_encoder(prompts if prompts is not None else PromptSet(), image_size)

    def prompt_bias(self, embeddings, pyramid) -> torch.Tensor | None:
        """Stacked per-image bias maps for the coarsest level, or ``None`` if no tokens."""
        if embeddings is None or all(e is None or len(e) == 0 for e in embeddings):
            return None
        coarse = pyramid[-1]
        grid = coarse.shape[-2:]
        maps = []
        for e in embeddings:
            if e is None or len(e) == 0:
                maps.append(coarse.new_zeros(coarse.shape[1:]))
            else:
                maps.append(rasterize_tokens(e, grid, self.cfg.total_stride,
                                             self.cfg.prompt_sigma, coarse))
        return torch.stack(maps)

    def decode(self, pyramid, embeddings=None, out_size=None, *, adjusted=None):
        """Logits ``B x K x H x W``. With DFE enabled each level is re-injected first."""
        if self.dfe is not None:
            if adjusted is None:
                pyramid = self.dfe.single_view(pyramid)
            else:
                pyramid = self.dfe.inject(pyramid, adjusted)
        bias = self.prompt_bias(embeddings, pyramid)
        if out_size is None:
            out_size = tuple(s * self.cfg.strides[0] for s in pyramid[0].shape[-2:])
        return self.decoder(pyramid, bias, out_size)

    # -- convenience ---------------------------------------------------------

    def embed_prompts(self, prompt_sets, image_size):
        if prompt_sets is None:
            return None
        return [None if p is None else self.encode_prompt(p, image_size) for p in prompt_sets]

    def forward(self, images, prompt_sets=None):
        pyr = self.encode(images)
        emb = self.embed_prompts(prompt_sets, images.shape[-2:])
        return self.decode(pyr, emb, images.shape[-2:])

    def pseudo_logits(self, pyramid, out_size):
        return self.pseudo_head(pyramid, out_size)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------
# checkpoints


class CheckpointMismatchError(ValueError):
    pass


def save_params(path, model: SSSNet, extra: dict | None = None) -> None:
    tensors = {k: v.detach().clone() for k, v in model.state_dict().items()}
    torch.save({
        "config": model.cfg.to_dict(),
        "config_hash": model.cfg.hash(),
        "shapes": {k: list(v.shape) for k, v in tensors.items()},
        "tensors": tensors,
        "extra": extra or {},
    }, path)


def load_params(path, model: SSSNet) -> dict:
    blob = torch.load(path, map_location="cpu", weights_only=True)
    if blob.get("config_hash") != model.cfg.hash():
        raise CheckpointMismatchError(
            f"checkpoint config hash {blob.get('config_hash')} != model {model.cfg.hash()}")
    shapes = {k: list(v.shape) for k, v in model.state_dict().items()}
    if shapes != blob["shapes"]:
        raise CheckpointMismatchError("parameter names or shapes differ from the model")
    model.load_state_dict(blob["tensors"])
    return blob.get("extra", {})
