"""Torch toy net built from a recipe, with subsampling decomposed out.

Every spatial reduction is written as a stride-1 op followed by an explicit
phase-0 slice, matching the exported layer list one-to-one. Max pooling
becomes a stride-1 sliding max (edge-replicated, window anchored top-left
for even k) followed by the same slice.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class ToyModelRecipe:
    name: str = "toy"
    input_size: int = 24
    conv_channels: list[int] = field(default_factory=lambda: [12, 24, 32])
    kernel: int = 3
    rates: list[list[int]] = field(default_factory=lambda: [[2, 2], [2, 2], [2, 2]])
    pool_kind: list[str] = field(default_factory=lambda: ["conv", "conv", "conv"])
    num_classes: int = 10
    epochs: int = 6
    lr: float = 1e-3
    batch: int = 64
    seed: int = 0
    accuracy_band: list[float] = field(default_factory=lambda: [97.0, 99.5])
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""

    def __post_init__(self) -> None:
        if len(self.rates) != len(self.conv_channels):
            raise ValueError("need one subsample rate per conv stage")
        if len(self.pool_kind) != len(self.conv_channels):
            raise ValueError("need one pool kind per conv stage")
        if len(self.rates) < 3:
            raise ValueError("recipes must contain at least 3 subsample layers")
        for kind in self.pool_kind:
            if kind not in ("conv", "max"):
                raise ValueError(f"pool kind '{kind}' not in {{conv, max}}")

    @classmethod
    def load(cls, path) -> "ToyModelRecipe":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _slide_max(x: torch.Tensor, k: int) -> torch.Tensor:
    lead = (k - 1) // 2
    trail = k - 1 - lead
    padded = F.pad(x, (lead, trail, lead, trail), mode="replicate")
    return F.max_pool2d(padded, kernel_size=k, stride=1)


class ToyNet(nn.Module):
    """Sequential conv net whose layer plan mirrors the PSB1 export."""

    def __init__(self, recipe: ToyModelRecipe):
        super().__init__()
        self.recipe = recipe
        self.plan: list[dict] = []
        convs = []
        in_ch = 1
        pad = recipe.kernel // 2
        for i, (out_ch, (rh, rw), kind) in enumerate(
                zip(recipe.conv_channels, recipe.rates, recipe.pool_kind)):
            conv = nn.Conv2d(in_ch, out_ch, recipe.kernel, padding=pad)
            convs.append(conv)
            self.plan.append({"name": f"conv{i + 1}", "kind": "conv2d",
                              "params": {"pad": pad}, "module": conv})
            if kind == "max":
                self.plan.append({"name": f"pool{i + 1}", "kind": "sliding_max",
                                  "params": {"k": 2}})
            self.plan.append({"name": f"sub{i + 1}", "kind": "subsample",
                              "params": {"rate_h": rh, "rate_w": rw}})
            self.plan.append({"name": f"relu{i + 1}", "kind": "relu"})
            in_ch = out_ch
        self.convs = nn.ModuleList(convs)
        self.head_index = len(self.plan)
        self.plan.append({"name": "gap", "kind": "global_avg_pool"})
        self.fc = nn.Linear(in_ch, recipe.num_classes)
        self.plan.append({"name": "fc", "kind": "dense", "module": self.fc})

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for doc in self.plan:
            kind = doc["kind"]
            if kind == "conv2d":
                x = doc["module"](x)
            elif kind == "sliding_max":
                x = _slide_max(x, doc["params"]["k"])
            elif kind == "subsample":
                x = x[:, :, ::doc["params"]["rate_h"], ::doc["params"]["rate_w"]]
            elif kind == "relu":
                x = torch.relu(x)
            elif kind == "global_avg_pool":
                x = x.mean(dim=(2, 3))
            elif kind == "dense":
                x = doc["module"](x)
        return x

    def export_docs(self) -> tuple[list[dict], dict[str, np.ndarray]]:
        """Layer docs plus tensors for the PSB1 writer."""
        docs = []
        tensors: dict[str, np.ndarray] = {}
        for doc in self.plan:
            docs.append({"name": doc["name"], "kind": doc["kind"],
                         "params": doc.get("params", {})})
            module = doc.get("module")
            if module is not None:
                tensors[f"{doc['name']}.weight"] = \
                    module.weight.detach().cpu().numpy()
                tensors[f"{doc['name']}.bias"] = \
                    module.bias.detach().cpu().numpy()
        return docs, tensors
