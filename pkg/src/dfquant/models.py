"""Reference classifiers with batch norm and the (data-using) teacher pretraining.

Every model exposes ``forward_features(x) -> (penultimate, logits)``; the
penultimate vector is what the contrastive critic consumes.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

from .data import ImageSet, load_dataset
from .errors import DatasetNotFound, UnknownArchitecture
from .evaluation import DEFAULT_MEAN, DEFAULT_STD, evaluate

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = 1


@dataclass
class ArchitectureSpec:
    name: str = "tiny_cnn"
    num_classes: int = 10
    input_shape: tuple[int, int, int] = (3, 32, 32)
    penultimate_width: int = field(default=0)

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        widths = {"tiny_cnn": 64, "resnet20": 64}
        if self.name not in widths:
            raise UnknownArchitecture(self.name)
        self.penultimate_width = widths[self.name]


class TinyCNN(nn.Module):
    """Three conv/BN/ReLU stages and a linear head (4 quantizable layers)."""

    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(16, 32, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(32)
        self.relu2 = nn.ReLU()
        self.conv3 = nn.Conv2d(32, 64, 3, padding=1, bias=False)
        self.bn3 = nn.BatchNorm2d(64)
        self.relu3 = nn.ReLU()
        self.fc = nn.Linear(64, num_classes)

    def forward_features(self, x):
        x = F.max_pool2d(self.relu1(self.bn1(self.conv1(x))), 2)
        x = F.max_pool2d(self.relu2(self.bn2(self.conv2(x))), 2)
        x = self.relu3(self.bn3(self.conv3(x)))
        feat = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return feat, self.fc(feat)

    def forward(self, x):
        return self.forward_features(x)[1]


class _Shortcut(nn.Module):
    """Parameter-free downsampling shortcut: stride-2 subsample + zero channel pad."""

    def __init__(self, pad: int):
        super().__init__()
        self.pad = pad

    def forward(self, x):
        return F.pad(x[:, :, ::2, ::2], (0, 0, 0, 0, self.pad, self.pad))


class BasicBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(c_out)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.relu2 = nn.ReLU()
        if stride != 1 or c_in != c_out:
            self.shortcut = _Shortcut((c_out - c_in) // 2)
        else:
            self.shortcut = nn.Identity()

    def forward(self, x):
        out = self.relu1(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return self.relu2(out + self.shortcut(x))


class ResNet20(nn.Module):
    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 16, 3, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(16)
        self.relu = nn.ReLU()
        layers, c_in = [], 16
        for c_out, stride in ((16, 1), (32, 2), (64, 2)):
            blocks = [BasicBlock(c_in, c_out, stride)]
            blocks += [BasicBlock(c_out, c_out) for _ in range(2)]
            layers.append(nn.Sequential(*blocks))
            c_in = c_out
        self.layer1, self.layer2, self.layer3 = layers
        self.fc = nn.Linear(64, num_classes)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_out", nonlinearity="relu")

    def forward_features(self, x):
        x = self.relu(self.bn1(self.conv1(x)))
        x = self.layer3(self.layer2(self.layer1(x)))
        feat = torch.flatten(F.adaptive_avg_pool2d(x, 1), 1)
        return feat, self.fc(feat)

    def forward(self, x):
        return self.forward_features(x)[1]


_REGISTRY = {"tiny_cnn": TinyCNN, "resnet20": ResNet20}


def build(spec: ArchitectureSpec, seed: int = 0) -> nn.Module:
    """Instantiate ``spec`` with parameters drawn from a private RNG seeded by ``seed``."""
    if spec.name not in _REGISTRY:
        raise UnknownArchitecture(spec.name)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return _REGISTRY[spec.name](spec.num_classes, spec.input_shape[0])


def bn_stats(model: nn.Module) -> dict[str, dict[str, torch.Tensor]]:
    return {
        name: {"mean": m.running_mean.clone(), "var": m.running_var.clone()}
        for name, m in model.named_modules()
        if isinstance(m, nn.modules.batchnorm._BatchNorm)
    }


def param_checksum(model: nn.Module) -> float:
    """Order-sensitive float64 checksum over parameters and buffers."""
    total = 0.0
    for i, t in enumerate(model.state_dict().values()):
        if t.is_floating_point():
            total += float(t.double().sum()) * (i + 1) + float(t.double().abs().sum())
    return total


def freeze(model: nn.Module) -> nn.Module:
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def pretrain(model: nn.Module, train_path, test_path, epochs: int = 20, seed: int = 0,
             batch_size: int = 128, lr: float = 0.05, weight_decay: float = 5e-4,
             mean=DEFAULT_MEAN, std=DEFAULT_STD) -> tuple[nn.Module, dict]:
    """Supervised training of the full-precision teacher on real data.

    This is the only place in the package that trains on a dataset. Returns
    the model in eval mode (frozen BN statistics) and a metrics dict.
    """
    for p in (train_path, test_path):
        if not Path(p).exists():
            raise DatasetNotFound(f"no dataset at {p}")
    train: ImageSet = load_dataset(train_path)
    test: ImageSet = load_dataset(test_path)
    x, y = train.normalized(mean, std), train.labels
    gen = torch.Generator().manual_seed(seed)
    steps_per_epoch = max(1, (len(train) + batch_size - 1) // batch_size)
    opt = torch.optim.SGD(model.parameters(), lr=lr, momentum=0.9, nesterov=True,
                          weight_decay=weight_decay)
    sched = torch.optim.lr_scheduler.OneCycleLR(
        opt, max_lr=lr, total_steps=max(1, epochs * steps_per_epoch))
    history = []
    for epoch in range(epochs):
        model.train()
        perm = torch.randperm(len(train), generator=gen)
        running = 0.0
        for start in range(0, len(train), batch_size):
            idx = perm[start:start + batch_size]
            loss = F.cross_entropy(model(x[idx]), y[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            running += float(loss.detach()) * idx.numel()
        acc = evaluate(model, test, mean=mean, std=std)
        history.append({"epoch": epoch, "train_loss": running / len(train), "test_acc": acc})
        log.info("pretrain epoch %d loss %.4f test_acc %.4f", epoch, running / len(train), acc)
    model.eval()
    metrics = {
        "epochs": epochs,
        "test_acc": evaluate(model, test, mean=mean, std=std),
        "history": history,
        "normalization": {"mean": list(mean), "std": list(std)},
    }
    return model, metrics


def save_teacher(path, model: nn.Module, spec: ArchitectureSpec, metrics: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format_version": CHECKPOINT_FORMAT,
        "arch_spec": asdict(spec),
        "parameters": model.state_dict(),
        "bn_stats": bn_stats(model),
        "metrics": metrics,
    }, path)
    return path


def load_teacher(path) -> tuple[nn.Module, ArchitectureSpec, dict]:
    """Load a teacher checkpoint; the returned model is frozen."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"teacher checkpoint not found: {path}")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {blob.get('format_version')!r}")
    arch = dict(blob["arch_spec"])
    arch.pop("penultimate_width", None)
    spec = ArchitectureSpec(**arch)
    model = build(spec)
    model.load_state_dict(blob["parameters"])
    return freeze(model), spec, blob["metrics"]
