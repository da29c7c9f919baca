"""Small query-based detector with an explicit class-specific / class-agnostic split.

The class-specific part is exactly the input projection and the classification
head; backbone, positional encoding, encoder, decoder, query embeddings and the
box head are class-agnostic. Keeping the query embeddings agnostic (and frozen
after pretraining) is what makes teacher and student query features live in the
same space during transfer.
"""

from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import torch
from torch import nn

CLASS_SPECIFIC_PREFIXES = ("input_proj.", "class_head.")

TRAINABLE_ALL = "all"
TRAINABLE_CLASS_SPECIFIC = "class_specific_only"


@dataclass(frozen=True)
class DetectorConfig:
    num_classes: int
    feature_dim: int = 64
    num_queries: int = 20
    num_encoder_layers: int = 2
    num_decoder_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    backbone_channels: tuple[int, ...] = (32, 64, 96)
    image_size: int = 64

    def __post_init__(self) -> None:
        if min(self.num_classes, self.feature_dim, self.num_queries) < 1:
            raise ValueError("num_classes, feature_dim and num_queries must be >= 1")
        if self.feature_dim % 4 != 0:
            raise ValueError("feature_dim must be divisible by 4 for 2-d sine encodings")
        if self.feature_dim % self.num_heads != 0:
            raise ValueError("feature_dim must be divisible by num_heads")
        stride = 2 ** len(self.backbone_channels)
        if self.image_size % stride != 0:
            raise ValueError(f"image_size must be divisible by backbone stride {stride}")

    @property
    def feature_grid(self) -> int:
        return self.image_size // 2 ** len(self.backbone_channels)


@dataclass(frozen=True)
class ForwardOutput:
    """Batched outputs; all fields carry a leading batch dimension.

    features: (B, d, h, w) projected backbone map, the distillation target.
    query_features: (B, N_q, d) decoder output.
    class_logits: (B, N_q, C); boxes: (B, N_q, 4) normalized (cx, cy, w, h).
    """

    features: torch.Tensor
    query_features: torch.Tensor
    class_logits: torch.Tensor
    boxes: torch.Tensor


def sine_position_encoding(height: int, width: int, dim: int) -> torch.Tensor:
    """2-d sine/cosine grid encoding, (height * width, dim); half the channels
    encode y, half x, interleaved sin/cos per frequency."""
    if dim % 4 != 0:
        raise ValueError("dim must be divisible by 4")
    half = dim // 2
    freq = torch.arange(half // 2, dtype=torch.float32)
    inv = 1.0 / (10000.0 ** (2 * freq / half))
    ys = torch.arange(height, dtype=torch.float32)
    xs = torch.arange(width, dtype=torch.float32)
    y_term = ys[:, None] * inv[None, :]
    x_term = xs[:, None] * inv[None, :]
    y_enc = torch.cat((y_term.sin(), y_term.cos()), dim=1)
    x_enc = torch.cat((x_term.sin(), x_term.cos()), dim=1)
    grid = torch.cat(
        (
            y_enc[:, None, :].expand(height, width, half),
            x_enc[None, :, :].expand(height, width, half),
        ),
        dim=2,
    )
    return grid.reshape(height * width, dim)


class _BoxHead(nn.Module):
    """3-layer MLP onto sigmoid-squashed (cx, cy, w, h)."""

    def __init__(self, dim: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, 4)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x).sigmoid()


class ShapeDetector(nn.Module):
    def __init__(self, config: DetectorConfig):
        super().__init__()
        self.config = config
        layers: list[nn.Module] = []
        in_ch = 3
        for out_ch in config.backbone_channels:
            layers += [
                nn.Conv2d(in_ch, out_ch, kernel_size=3, stride=2, padding=1),
                nn.GroupNorm(8, out_ch),
                nn.ReLU(),
            ]
            in_ch = out_ch
        self.backbone = nn.Sequential(*layers)
        self.input_proj = nn.Conv2d(in_ch, config.feature_dim, kernel_size=1)

        grid = config.feature_grid
        self.register_buffer(
            "pos_encoding",
            sine_position_encoding(grid, grid, config.feature_dim),
            persistent=False,
        )
        enc_layer = nn.TransformerEncoderLayer(
            d_model=config.feature_dim,
            nhead=config.num_heads,
            dim_feedforward=config.ffn_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.encoder = nn.TransformerEncoder(enc_layer, config.num_encoder_layers)
        dec_layer = nn.TransformerDecoderLayer(
            d_model=config.feature_dim,
            nhead=config.num_heads,
            dim_feedforward=config.ffn_dim,
            dropout=0.0,
            batch_first=True,
        )
        self.decoder = nn.TransformerDecoder(dec_layer, config.num_decoder_layers)
        self.query_embed = nn.Embedding(config.num_queries, config.feature_dim)
        self.class_head = nn.Linear(config.feature_dim, config.num_classes)
        self.box_head = _BoxHead(config.feature_dim)

        # bias classification toward background at init, standard for focal loss
        prior = 0.01
        nn.init.constant_(self.class_head.bias, -math.log((1 - prior) / prior))
        self._check_partition()

    def _check_partition(self) -> None:
        names = [n for n, _ in self.named_parameters()]
        specific = [n for n in names if n.startswith(CLASS_SPECIFIC_PREFIXES)]
        agnostic = [n for n in names if not n.startswith(CLASS_SPECIFIC_PREFIXES)]
        if len(specific) + len(agnostic) != len(names) or not specific or not agnostic:
            raise RuntimeError("parameter partition does not cover the model")

    def partition(self) -> dict[str, list[str]]:
        """Parameter names split into the two roles; together they cover everything."""
        names = [n for n, _ in self.named_parameters()]
        return {
            "class_specific": [n for n in names if n.startswith(CLASS_SPECIFIC_PREFIXES)],
            "class_agnostic": [n for n in names if not n.startswith(CLASS_SPECIFIC_PREFIXES)],
        }

    def forward(self, images: torch.Tensor) -> ForwardOutput:
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2] != self.config.image_size:
            raise ValueError(
                f"expected images (B, 3, {self.config.image_size}, {self.config.image_size}), "
                f"got {tuple(images.shape)}"
            )
        feat = self.input_proj(self.backbone(images))
        batch, dim, h, w = feat.shape
        tokens = feat.flatten(2).transpose(1, 2) + self.pos_encoding
        memory = self.encoder(tokens)
        queries = self.query_embed.weight.unsqueeze(0).expand(batch, -1, -1)
        q_feat = self.decoder(queries, memory)
        return ForwardOutput(
            features=feat,
            query_features=q_feat,
            class_logits=self.class_head(q_feat),
            boxes=self.box_head(q_feat),
        )

    def classify_external_queries(self, q_ext: torch.Tensor) -> torch.Tensor:
        """Class probabilities for externally supplied query features.

        Only the classification head runs; the decoder is bypassed entirely.
        """
        if q_ext.shape[-1] != self.config.feature_dim:
            raise ValueError(
                f"query feature dim {q_ext.shape[-1]} != model dim {self.config.feature_dim}"
            )
        return self.class_head(q_ext).sigmoid()


def set_trainable(model: ShapeDetector, selector: str) -> None:
    """Restrict gradient flow to `all` parameters or to `class_specific_only`."""
    if selector == TRAINABLE_ALL:
        model.requires_grad_(True)
    elif selector == TRAINABLE_CLASS_SPECIFIC:
        for name, param in model.named_parameters():
            param.requires_grad_(name.startswith(CLASS_SPECIFIC_PREFIXES))
    else:
        raise ValueError(f"unknown selector {selector!r}")


def trainable_parameters(model: ShapeDetector) -> list[torch.nn.Parameter]:
    return [p for p in model.parameters() if p.requires_grad]


def snapshot(model: ShapeDetector) -> ShapeDetector:
    """Deep, independent copy; training the original never touches the copy."""
    clone = copy.deepcopy(model)
    clone.eval()
    clone.requires_grad_(False)
    return clone


def save_checkpoint(model: ShapeDetector, path) -> None:
    """Parameter blobs grouped by partition role, plus the config header."""
    part = model.partition()
    state = model.state_dict()
    payload = {
        "config": asdict(model.config),
        "class_agnostic": {n: state[n] for n in part["class_agnostic"]},
        "class_specific": {n: state[n] for n in part["class_specific"]},
    }
    torch.save(payload, path)


def load_checkpoint(path) -> ShapeDetector:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    cfg = dict(payload["config"])
    cfg["backbone_channels"] = tuple(cfg["backbone_channels"])
    model = ShapeDetector(DetectorConfig(**cfg))
    state = {**payload["class_agnostic"], **payload["class_specific"]}
    model.load_state_dict(state)
    model.eval()
    return model
