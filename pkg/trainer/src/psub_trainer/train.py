"""Deterministic training of toy recipes to a target accuracy band."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .idxio import read_idx
from .netdef import ToyModelRecipe, ToyNet


class AccuracyBandMissed(RuntimeError):
    pass


def _to_tensors(images: np.ndarray, labels: np.ndarray):
    x = torch.from_numpy(images.astype(np.float32) / 255.0).unsqueeze(1)
    y = torch.from_numpy(labels.astype(np.int64))
    return x, y


@torch.no_grad()
def evaluate(net: ToyNet, x: torch.Tensor, y: torch.Tensor,
             batch: int = 512) -> float:
    net.eval()
    hits = 0
    for start in range(0, len(x), batch):
        logits = net(x[start:start + batch])
        hits += int((logits.argmax(dim=1) == y[start:start + batch]).sum())
    return 100.0 * hits / len(x)


def train_toy_model(recipe: ToyModelRecipe) -> tuple[ToyNet, dict]:
    """Train for the full epoch budget, keeping the last in-band snapshot.

    Returns the net restored to the most recent epoch whose test accuracy
    fell inside the recipe's band (late snapshots are preferred: a more
    converged model is more robust across subsampling phases). Raises
    ``AccuracyBandMissed`` if no epoch lands in the band. With zero epochs
    the randomly initialised net is returned unchecked.
    """
    torch.manual_seed(recipe.seed)
    net = ToyNet(recipe)
    report = {"recipe": recipe.name, "seed": recipe.seed,
              "epoch_acc": [], "test_acc": None}
    if recipe.epochs <= 0:
        return net, report

    train_x, train_y = _to_tensors(*read_idx(recipe.train_images,
                                             recipe.train_labels))
    test_x, test_y = _to_tensors(*read_idx(recipe.test_images,
                                           recipe.test_labels))
    opt = torch.optim.Adam(net.parameters(), lr=recipe.lr)
    order_rng = np.random.default_rng(recipe.seed)
    low, high = recipe.accuracy_band
    snapshot = None

    for epoch in range(recipe.epochs):
        net.train()
        perm = order_rng.permutation(len(train_x))
        for start in range(0, len(perm), recipe.batch):
            idx = torch.from_numpy(perm[start:start + recipe.batch].copy())
            opt.zero_grad()
            loss = F.cross_entropy(net(train_x[idx]), train_y[idx])
            loss.backward()
            opt.step()
        acc = evaluate(net, test_x, test_y)
        report["epoch_acc"].append(acc)
        if low <= acc <= high:
            snapshot = {k: v.clone() for k, v in net.state_dict().items()}
            report["test_acc"] = acc

    if snapshot is None:
        raise AccuracyBandMissed(
            f"recipe '{recipe.name}' seed {recipe.seed}: no epoch reached "
            f"[{low}, {high}]% (got {report['epoch_acc']})")
    net.load_state_dict(snapshot)
    return net, report
