"""Content/style decoupled image generator.

Content is an explicit class index, style an explicit Gaussian vector drawn
independently of it. The two are fused multiplicatively
(``embedding(content) * style``) before the convolutional decoder, so fixing
the content array and redrawing style executes an intervention on style.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .errors import InvalidClassCount, ShapeMismatch


def sample_content(batch_size: int, num_classes: int, rng: torch.Generator) -> torch.Tensor:
    if num_classes < 2:
        raise InvalidClassCount(f"need at least 2 classes, got {num_classes}")
    return torch.randint(0, num_classes, (batch_size,), generator=rng)


def sample_style(batch_size: int, latent_dim: int, rng: torch.Generator) -> torch.Tensor:
    if latent_dim < 1:
        raise ValueError("latent_dim must be >= 1")
    return torch.randn(batch_size, latent_dim, generator=rng)


def intervene_styles(content: torch.Tensor, m: int, latent_dim: int,
                     rng: torch.Generator) -> list[torch.Tensor]:
    """``m`` independent style draws to pair with one fixed ``content`` array."""
    if m < 2:
        raise ValueError("need at least two interventions")
    return [sample_style(content.shape[0], latent_dim, rng) for _ in range(m)]


@dataclass
class StyleContentBatch:
    content: torch.Tensor
    style: torch.Tensor
    images: torch.Tensor

    @property
    def pseudo_labels(self) -> torch.Tensor:
        return self.content


class Generator(nn.Module):
    def __init__(self, num_classes: int, latent_dim: int = 100, image_shape=(3, 32, 32),
                 width: int = 128):
        super().__init__()
        channels, h, w = image_shape
        if h % 4 or w % 4:
            raise ValueError("image height and width must be multiples of 4")
        self.num_classes = num_classes
        self.latent_dim = latent_dim
        self.image_shape = tuple(image_shape)
        self.width = width
        self.init_hw = (h // 4, w // 4)
        self.embedding = nn.Embedding(num_classes, latent_dim)
        self.project = nn.Linear(latent_dim, width * h * w // 16)
        self.bn0 = nn.BatchNorm2d(width)
        self.blocks = nn.Sequential(
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width, width, 3, padding=1),
            nn.BatchNorm2d(width),
            nn.ReLU(),
            nn.Upsample(scale_factor=2),
            nn.Conv2d(width, width // 2, 3, padding=1),
            nn.BatchNorm2d(width // 2),
            nn.ReLU(),
            nn.Conv2d(width // 2, channels, 3, padding=1),
            nn.Tanh(),
        )

    def fuse(self, content, style):
        return self.embedding(content) * style

    def forward(self, content: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if content.shape[0] != style.shape[0]:
            raise ShapeMismatch(f"content batch {content.shape[0]} != style batch {style.shape[0]}")
        if style.dim() != 2 or style.shape[1] != self.latent_dim:
            raise ShapeMismatch(f"style must be (N, {self.latent_dim}), got {tuple(style.shape)}")
        x = self.project(self.fuse(content, style))
        x = self.bn0(x.view(x.shape[0], self.width, *self.init_hw))
        return self.blocks(x)


def generate(gen: Generator, content, style) -> StyleContentBatch:
    return StyleContentBatch(content, style, gen(content, style))


def to_model_input(images: torch.Tensor, mean, std) -> torch.Tensor:
    """Map generator output in [-1, 1] to the classifier's normalized input space."""
    m = torch.as_tensor(mean, dtype=images.dtype).view(1, -1, 1, 1)
    s = torch.as_tensor(std, dtype=images.dtype).view(1, -1, 1, 1)
    return ((images + 1.0) * 0.5 - m) / s
