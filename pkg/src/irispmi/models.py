"""Narrow-band PMI regressors and the NIR+RGB fusion model.

A narrow-band model is a feature extractor (a torchvision backbone with its
classifier removed, or the small ``toy_cnn``) followed by a linear layer
producing one PMI value. NIR variants swap the first convolution for a
single-channel one initialised with the channel-mean of the original kernels.

The fusion model runs one extractor per band and feeds the concatenated
embeddings to a two-layer perceptron:

    y_hat = W2 . relu(W1 [e_nir, e_rgb] + b1) + b2
"""

from __future__ import annotations

import logging
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
import torch
import torch.nn as nn

from .errors import ModelError

LOGGER = logging.getLogger(__name__)

BACKBONES = ("vgg19", "inception_v3", "densenet121", "resnet152", "vit", "ds_resnet152", "toy_cnn")

EMBEDDING_DIMS = {
    "vgg19": 4096,
    "inception_v3": 2048,
    "densenet121": 1024,
    "resnet152": 2048,
    "vit": 768,
    "ds_resnet152": 2048,
    "toy_cnn": 64,
}

# (first convolution, classification layer) inside each torchvision network
_LAYERS = {
    "vgg19": ("features.0", "classifier.6"),
    "inception_v3": ("Conv2d_1a_3x3.conv", "fc"),
    "densenet121": ("features.conv0", "classifier"),
    "resnet152": ("conv1", "fc"),
    "ds_resnet152": ("conv1", "fc"),
    "vit": ("conv_proj", "heads"),
}

DEFAULT_HIDDEN_DIM = 512
CHECKPOINT_FORMAT = 1


def input_side(backbone: str) -> int:
    return 299 if backbone == "inception_v3" else 224


def band_channels(band: str) -> int:
    if band not in ("NIR", "RGB"):
        raise ModelError(f"band must be NIR or RGB, got {band!r}")
    return 1 if band == "NIR" else 3


@dataclass(frozen=True)
class BackboneSpec:
    name: str
    band: str
    pretrained_weights: str | None = None

    def __post_init__(self) -> None:
        if self.name not in BACKBONES:
            raise ModelError(f"unknown backbone {self.name!r}; choose from {', '.join(BACKBONES)}")
        band_channels(self.band)

    @property
    def embedding_dim(self) -> int:
        return EMBEDDING_DIMS[self.name]

    @property
    def side(self) -> int:
        return input_side(self.name)

    @property
    def channels(self) -> int:
        return band_channels(self.band)


# ---------------------------------------------------------------------------
# Feature extractors
# ---------------------------------------------------------------------------


class ToyCNN(nn.Module):
    """Three strided conv blocks on a 4x average-pooled input, then global pooling."""

    def __init__(self, in_channels: int = 1, widths: tuple[int, int, int] = (16, 32, 64)):
        super().__init__()
        self.stem = nn.AvgPool2d(4)
        layers: list[nn.Module] = []
        prev = in_channels
        for width in widths:
            layers += [nn.Conv2d(prev, width, 3, stride=2, padding=1), nn.ReLU()]
            prev = width
        self.blocks = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.pool(self.blocks(self.stem(x))).flatten(1)


def _get(net: nn.Module, path: str) -> nn.Module:
    return net.get_submodule(path)


def _set(net: nn.Module, path: str, module: nn.Module) -> None:
    parent, _, leaf = path.rpartition(".")
    setattr(net.get_submodule(parent) if parent else net, leaf, module)


def adapt_first_conv(net: nn.Module, path: str) -> None:
    """Replace a 3-channel input conv with a 1-channel conv holding the channel-mean kernel."""
    old = _get(net, path)
    if old.in_channels == 1:
        return
    new = nn.Conv2d(
        1,
        old.out_channels,
        old.kernel_size,
        stride=old.stride,
        padding=old.padding,
        dilation=old.dilation,
        groups=old.groups,
        bias=old.bias is not None,
        padding_mode=old.padding_mode,
    )
    with torch.no_grad():
        new.weight.copy_(old.weight.mean(dim=1, keepdim=True))
        if old.bias is not None:
            new.bias.copy_(old.bias)
    _set(net, path, new)


def _torchvision_net(name: str, imagenet: bool) -> nn.Module:
    from torchvision import models as tvm

    if name == "vgg19":
        return tvm.vgg19(weights="DEFAULT" if imagenet else None)
    if name == "inception_v3":
        if imagenet:
            net = tvm.inception_v3(weights="DEFAULT")
            net.aux_logits, net.AuxLogits, net.transform_input = False, None, False
            return net
        return tvm.inception_v3(weights=None, aux_logits=False, init_weights=True, transform_input=False)
    if name == "densenet121":
        return tvm.densenet121(weights="DEFAULT" if imagenet else None)
    if name in ("resnet152", "ds_resnet152"):
        return tvm.resnet152(weights="DEFAULT" if imagenet else None)
    if name == "vit":
        return tvm.vit_b_16(weights="DEFAULT" if imagenet else None)
    raise ModelError(f"unknown backbone {name!r}")


def _read_state(path: str | Path) -> dict[str, torch.Tensor]:
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as e:  # torch raises a zoo of pickling/IO errors
        raise ModelError(f"cannot read weights file {path}: {e}") from e
    if isinstance(state, dict) and "state_dict" in state and isinstance(state["state_dict"], dict):
        state = state["state_dict"]
    if not isinstance(state, dict):
        raise ModelError(f"weights file {path} does not hold a state dict")
    return {k.removeprefix("module."): v for k, v in state.items()}


def _load_backbone_state(net: nn.Module, state: dict[str, torch.Tensor], head: str, source: Any) -> None:
    state = {k: v for k, v in state.items() if not (k == head or k.startswith(head + "."))}
    own = {k: v for k, v in net.state_dict().items() if not (k == head or k.startswith(head + "."))}
    missing = sorted(set(own) - set(state))
    unexpected = sorted(set(state) - set(own))
    mismatched = sorted(k for k in set(own) & set(state) if own[k].shape != state[k].shape)
    if missing or unexpected or mismatched:
        detail = []
        if missing:
            detail.append(f"missing {len(missing)} keys (e.g. {missing[0]})")
        if unexpected:
            detail.append(f"unexpected {len(unexpected)} keys (e.g. {unexpected[0]})")
        if mismatched:
            k = mismatched[0]
            detail.append(f"shape mismatch at {k}: {tuple(state[k].shape)} vs {tuple(own[k].shape)}")
        raise ModelError(f"weights {source} do not match the architecture: " + "; ".join(detail))
    net.load_state_dict(state, strict=False)


def build_extractor(spec: BackboneSpec, require_weights: bool = True) -> nn.Module:
    """Backbone mapping (B, C, side, side) to (B, embedding_dim)."""
    if spec.name == "toy_cnn":
        net = ToyCNN(spec.channels)
        if spec.pretrained_weights:
            _load_backbone_state(net, _read_state(spec.pretrained_weights), "__none__", spec.pretrained_weights)
        return net

    weights = spec.pretrained_weights
    if spec.name == "ds_resnet152" and not weights and require_weights:
        raise ModelError("ds_resnet152 needs a pretrained_weights file (iris PAD-trained ResNet152)")
    imagenet = weights == "imagenet"
    net = _torchvision_net(spec.name, imagenet)
    first, head = _LAYERS[spec.name]

    if weights and not imagenet:
        state = _read_state(weights)
        first_key = first + ".weight"
        if spec.band == "NIR" and first_key in state and state[first_key].shape[1] == 1:
            adapt_first_conv(net, first)
        _load_backbone_state(net, state, head, weights)
    if spec.band == "NIR":
        adapt_first_conv(net, first)
    _set(net, head, nn.Identity())
    return net


# ---------------------------------------------------------------------------
# Regression models
# ---------------------------------------------------------------------------


class _Regressor(nn.Module):
    """Common plumbing: input checks and target de-normalisation buffers."""

    def __init__(self) -> None:
        super().__init__()
        self.register_buffer("target_mean", torch.zeros((), dtype=torch.float64))
        self.register_buffer("target_std", torch.ones((), dtype=torch.float64))

    def set_target_scaling(self, mean: float, std: float) -> None:
        self.target_mean.fill_(float(mean))
        self.target_std.fill_(float(std))

    def to_hours(self, raw: torch.Tensor) -> torch.Tensor:
        return raw.double() * self.target_std + self.target_mean

    @staticmethod
    def _check(x: torch.Tensor, spec: BackboneSpec) -> None:
        expected = (spec.channels, spec.side, spec.side)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise ModelError(
                f"{spec.name}/{spec.band} expects input (batch, {expected[0]}, {expected[1]}, {expected[2]}), "
                f"got {tuple(x.shape)}"
            )


class PmiRegressor(_Regressor):
    def __init__(self, spec: BackboneSpec, extractor: nn.Module):
        super().__init__()
        self.spec = spec
        self.extractor = extractor
        self.head = nn.Linear(spec.embedding_dim, 1)

    @property
    def bands(self) -> tuple[str, ...]:
        return (self.spec.band,)

    @property
    def sides(self) -> tuple[int, ...]:
        return (self.spec.side,)

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        self._check(x, self.spec)
        return self.extractor(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.embed(x))

    def describe(self) -> dict:
        return {"kind": "narrowband", "backbone": self.spec.name, "band": self.spec.band}


@dataclass
class FusionHeadParams:
    W1: np.ndarray  # (hidden, d_nir + d_rgb)
    b1: np.ndarray  # (hidden,)
    W2: np.ndarray  # (hidden,)
    b2: float

    def __post_init__(self) -> None:
        self.W1 = np.asarray(self.W1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64).reshape(-1)
        self.W2 = np.asarray(self.W2, dtype=np.float64).reshape(-1)
        self.b2 = float(self.b2)
        if self.W1.ndim != 2 or self.W1.shape[0] == 0:
            raise ModelError(f"W1 must be a non-empty (hidden, d) matrix, got shape {self.W1.shape}")
        hidden = self.W1.shape[0]
        if self.b1.shape != (hidden,) or self.W2.shape != (hidden,):
            raise ModelError(
                f"inconsistent fusion head shapes: W1 {self.W1.shape}, b1 {self.b1.shape}, W2 {self.W2.shape}"
            )

    @property
    def hidden_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W1.shape[1]


def _concat(e_nir, e_rgb, params: FusionHeadParams) -> np.ndarray:
    x = np.concatenate([np.asarray(e_nir, dtype=np.float64).ravel(), np.asarray(e_rgb, dtype=np.float64).ravel()])
    if x.size != params.input_dim:
        raise ModelError(f"embeddings have {x.size} values in total, W1 expects {params.input_dim}")
    return x


def fuse_forward(e_nir, e_rgb, params: FusionHeadParams) -> float:
    x = _concat(e_nir, e_rgb, params)
    hidden = np.maximum(params.W1 @ x + params.b1, 0.0)
    return float(params.W2 @ hidden + params.b2)


def fusion_loss_grad(e_nir, e_rgb, y: float, params: FusionHeadParams) -> tuple[float, dict[str, Any]]:
    """Squared error (y_hat - y)^2 and its hand-derived gradient.

    Keys: W1, b1, W2, b2, e_nir, e_rgb.
    """
    x = _concat(e_nir, e_rgb, params)
    z = params.W1 @ x + params.b1
    h = np.maximum(z, 0.0)
    resid = float(params.W2 @ h + params.b2) - y
    d_out = 2.0 * resid
    dz = d_out * params.W2 * (z > 0)
    dx = params.W1.T @ dz
    d_nir = np.asarray(e_nir).size
    grads = {
        "W1": np.outer(dz, x),
        "b1": dz,
        "W2": d_out * h,
        "b2": d_out,
        "e_nir": dx[:d_nir],
        "e_rgb": dx[d_nir:],
    }
    return resid**2, grads


class FusionHead(nn.Module):
    def __init__(self, input_dim: int, hidden_dim: int = DEFAULT_HIDDEN_DIM):
        super().__init__()
        if hidden_dim <= 0:
            raise ModelError("hidden_dim must be positive")
        self.fc1 = nn.Linear(input_dim, hidden_dim)
        self.fc2 = nn.Linear(hidden_dim, 1)

    def forward(self, e_nir: torch.Tensor, e_rgb: torch.Tensor) -> torch.Tensor:
        return self.fc2(torch.relu(self.fc1(torch.cat([e_nir, e_rgb], dim=1))))

    def params(self) -> FusionHeadParams:
        return FusionHeadParams(
            self.fc1.weight.detach().double().numpy().copy(),
            self.fc1.bias.detach().double().numpy().copy(),
            self.fc2.weight.detach().double().numpy().reshape(-1).copy(),
            float(self.fc2.bias.detach()),
        )

    def load_params(self, params: FusionHeadParams) -> None:
        if self.fc1.weight.shape != params.W1.shape:
            raise ModelError(f"W1 shape {params.W1.shape} does not fit head {tuple(self.fc1.weight.shape)}")
        dtype = self.fc1.weight.dtype
        with torch.no_grad():
            self.fc1.weight.copy_(torch.as_tensor(params.W1, dtype=dtype))
            self.fc1.bias.copy_(torch.as_tensor(params.b1, dtype=dtype))
            self.fc2.weight.copy_(torch.as_tensor(params.W2, dtype=dtype).reshape(1, -1))
            self.fc2.bias.fill_(params.b2)


class FusionRegressor(_Regressor):
    def __init__(self, nir_spec: BackboneSpec, rgb_spec: BackboneSpec, nir: nn.Module, rgb: nn.Module, hidden_dim: int):
        super().__init__()
        if nir_spec.band != "NIR" or rgb_spec.band != "RGB":
            raise ModelError("fusion needs one NIR and one RGB backbone spec")
        self.nir_spec, self.rgb_spec = nir_spec, rgb_spec
        self.nir, self.rgb = nir, rgb
        self.head = FusionHead(nir_spec.embedding_dim + rgb_spec.embedding_dim, hidden_dim)

    @property
    def bands(self) -> tuple[str, ...]:
        return ("NIR", "RGB")

    @property
    def sides(self) -> tuple[int, ...]:
        return (self.nir_spec.side, self.rgb_spec.side)

    def embed(self, x_nir: torch.Tensor, x_rgb: torch.Tensor) -> torch.Tensor:
        self._check(x_nir, self.nir_spec)
        self._check(x_rgb, self.rgb_spec)
        return torch.cat([self.nir(x_nir), self.rgb(x_rgb)], dim=1)

    def forward(self, x_nir: torch.Tensor, x_rgb: torch.Tensor) -> torch.Tensor:
        self._check(x_nir, self.nir_spec)
        self._check(x_rgb, self.rgb_spec)
        return self.head(self.nir(x_nir), self.rgb(x_rgb))

    def describe(self) -> dict:
        return {
            "kind": "fusion",
            "backbone": self.nir_spec.name,
            "rgb_backbone": self.rgb_spec.name,
            "band": "multispectral",
            "hidden_dim": self.head.fc1.out_features,
        }


@contextmanager
def _seeded(seed: int | None):
    if seed is None:
        yield
        return
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        yield


def build_narrowband_model(spec: BackboneSpec, seed: int | None = None, require_weights: bool = True) -> PmiRegressor:
    with _seeded(seed):
        return PmiRegressor(spec, build_extractor(spec, require_weights))


def build_fusion_model(
    backbone: str,
    hidden_dim: int = DEFAULT_HIDDEN_DIM,
    nir_weights: str | None = None,
    rgb_weights: str | None = None,
    seed: int | None = None,
    require_weights: bool = True,
) -> FusionRegressor:
    nir_spec = BackboneSpec(backbone, "NIR", nir_weights)
    rgb_spec = BackboneSpec(backbone, "RGB", rgb_weights)
    with _seeded(seed):
        nir = build_extractor(nir_spec, require_weights)
        rgb = build_extractor(rgb_spec, require_weights)
        return FusionRegressor(nir_spec, rgb_spec, nir, rgb, hidden_dim)


def extract_embedding(model: PmiRegressor | FusionRegressor, batch) -> torch.Tensor:
    """Eval-mode embeddings; for fusion models ``batch`` is ``(x_nir, x_rgb)`` and the result is concatenated."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            if isinstance(model, FusionRegressor):
                return model.embed(*batch)
            return model.embed(batch)
    finally:
        model.train(was_training)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_name(scenario: str, band: str, backbone: str, fold: int) -> str:
    return f"{scenario}_{band}_{backbone}_{fold}.ckpt"


def save_checkpoint(path: str | Path, model: PmiRegressor | FusionRegressor, config: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "model": model.describe(),
        "config": config or {},
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)
    return path


def load_checkpoint(
    path: str | Path,
    backbone: str | None = None,
    band: str | None = None,
) -> tuple[PmiRegressor | FusionRegressor, dict]:
    """Rebuild a model from a checkpoint; refuses architecture/band mismatches."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise ModelError(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ModelError(f"{path} is not a checkpoint written by this package")
    meta = payload["model"]
    if backbone is not None and meta["backbone"] != backbone:
        raise ModelError(f"checkpoint {path} holds {meta['backbone']}, expected {backbone}")
    if band is not None and meta["band"] != band:
        raise ModelError(f"checkpoint {path} holds band {meta['band']}, expected {band}")

    if meta["kind"] == "fusion":
        model: PmiRegressor | FusionRegressor = build_fusion_model(
            meta["backbone"], meta["hidden_dim"], require_weights=False
        )
    else:
        model = build_narrowband_model(BackboneSpec(meta["backbone"], meta["band"]), require_weights=False)
    try:
        model.load_state_dict(payload["state_dict"], strict=True)
    except RuntimeError as e:
        raise ModelError(f"checkpoint {path} does not match {meta['backbone']}: {e}") from e
    model.eval()
    return model, payload.get("config", {})
