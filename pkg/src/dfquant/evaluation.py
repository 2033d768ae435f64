from __future__ import annotations

import torch
from torch import nn

from .data import ImageSet
from .errors import EmptyEvalSet

DEFAULT_MEAN = (0.5, 0.5, 0.5)
DEFAULT_STD = (0.5, 0.5, 0.5)


@torch.no_grad()
def evaluate(model: nn.Module, eval_set: ImageSet | tuple[torch.Tensor, torch.Tensor],
             batch_size: int = 500, mean=DEFAULT_MEAN, std=DEFAULT_STD) -> float:
    """Top-1 accuracy of ``model`` on ``eval_set``.

    ``eval_set`` is either an :class:`ImageSet` (normalized here) or an
    already-normalized ``(inputs, labels)`` pair. The model is switched to
    eval mode, which also freezes activation-quantizer statistics, and its
    previous mode is restored afterwards.
    """
    if isinstance(eval_set, ImageSet):
        inputs, labels = eval_set.normalized(mean, std), eval_set.labels
    else:
        inputs, labels = eval_set
    if labels.numel() == 0:
        raise EmptyEvalSet("evaluation set is empty")
    was_training = model.training
    model.eval()
    correct = 0
    try:
        for start in range(0, labels.shape[0], batch_size):
            logits = model(inputs[start:start + batch_size])
            correct += int((logits.argmax(dim=1) == labels[start:start + batch_size]).sum())
    finally:
        model.train(was_training)
    return correct / labels.shape[0]
