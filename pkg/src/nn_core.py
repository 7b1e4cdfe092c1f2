#!/usr/bin/env python3
"""
Named-layer convolutional classifier and the training primitives built on it.

The model is an ordered list of layers of kind conv, batchnorm or linear. A ReLU
follows every batchnorm, every conv that is not followed by a batchnorm, and
every linear layer except the last. The first linear layer flattens its input.
"""
import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .utils import InputError, NumericError, log

LAYER_KINDS = ("conv", "batchnorm", "linear")

# name -> {"weight": grad, "bias": grad}
GradientMap = Dict[str, Dict[str, torch.Tensor]]

# Extra loss callbacks receive the model and the logits of the data forward pass.
LossTerm = Callable[["ModelState", torch.Tensor], torch.Tensor]


@dataclass(frozen=True)
class LayerSpec:
    """
    Static description of one layer.

    Attributes:
        name: Unique layer name
        kind: One of conv, batchnorm, linear
        in_features: Input channels (conv) or features (linear); channels for batchnorm
        out_features: Output channels or features; equals in_features for batchnorm
        kernel_size: Conv kernel size
        stride: Conv stride
        padding: Conv padding
    """
    name: str
    kind: str
    in_features: int
    out_features: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = 1


@dataclass
class FreezeMask:
    """Set of layer names excluded from gradient computation and updates."""
    frozen: FrozenSet[str] = field(default_factory=frozenset)


def reference_cnn_specs(in_channels: int = 3, num_classes: int = 10, image_size: int = 32,
                        widths: Sequence[int] = (32, 64, 128, 128)) -> List[LayerSpec]:
    """
    Builds the layer list of the reference CNN: conv-batchnorm blocks with the
    given widths (stride 1 for the first block, stride 2 afterwards) and a linear head.

    Args:
        in_channels: Image channels
        num_classes: Number of classes K
        image_size: Square input side length
        widths: Output channels per conv block

    Returns:
        Ordered list of LayerSpec
    """
    specs: List[LayerSpec] = []
    channels = in_channels
    size = image_size
    for i, width in enumerate(widths, start=1):
        stride = 1 if i == 1 else 2
        specs.append(LayerSpec(f"conv{i}", "conv", channels, width, 3, stride, 1))
        specs.append(LayerSpec(f"bn{i}", "batchnorm", width, width))
        size = (size + 2 - 3) // stride + 1
        channels = width
    specs.append(LayerSpec("fc", "linear", channels * size * size, num_classes))
    return specs


class LayeredNet(nn.Module):
    """nn.Module evaluating a LayerSpec list in order."""

    def __init__(self, specs: Sequence[LayerSpec]):
        super().__init__()
        self.specs = list(specs)
        self.layers = nn.ModuleDict()
        for spec in self.specs:
            if spec.kind == "conv":
                module = nn.Conv2d(spec.in_features, spec.out_features, spec.kernel_size,
                                   stride=spec.stride, padding=spec.padding)
            elif spec.kind == "batchnorm":
                module = nn.BatchNorm2d(spec.out_features)
            elif spec.kind == "linear":
                module = nn.Linear(spec.in_features, spec.out_features)
            else:
                raise InputError(f"Unknown layer kind '{spec.kind}' for layer '{spec.name}'")
            self.layers[spec.name] = module

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.specs) - 1
        for i, spec in enumerate(self.specs):
            if spec.kind == "linear" and x.dim() > 2:
                x = torch.flatten(x, 1)
            x = self.layers[spec.name](x)
            following = self.specs[i + 1].kind if i < last else None
            if spec.kind == "batchnorm":
                x = F.relu(x)
            elif spec.kind == "conv" and following != "batchnorm":
                x = F.relu(x)
            elif spec.kind == "linear" and i < last:
                x = F.relu(x)
        return x


def _init_layer(module: nn.Module, kind: str, generator: torch.Generator) -> None:
    """Draws one layer from the architecture's initialization distribution."""
    with torch.no_grad():
        if kind == "conv":
            nn.init.kaiming_normal_(module.weight, mode="fan_out", nonlinearity="relu", generator=generator)
            nn.init.zeros_(module.bias)
        elif kind == "batchnorm":
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)
            module.reset_running_stats()
        else:
            nn.init.kaiming_uniform_(module.weight, a=math.sqrt(5), generator=generator)
            bound = 1.0 / math.sqrt(module.weight.shape[1]) if module.weight.shape[1] > 0 else 0.0
            nn.init.uniform_(module.bias, -bound, bound, generator=generator)


class ModelState:
    """
    Named-layer parameter store with freeze mask, momentum state and reinitialization.

    Attributes:
        specs: Ordered layer specifications
        input_shape: Expected (C, H, W) of one example
        rng_seed: Seed used for the initial draw of all layers
        net: The underlying LayeredNet
        mask: Current FreezeMask
        freeze_bn_stats: Keep every batchnorm in evaluation mode during training
        epoch: Number of completed training epochs
    """

    def __init__(self, specs: Sequence[LayerSpec], input_shape: Tuple[int, int, int], rng_seed: int = 0):
        names = [spec.name for spec in specs]
        if len(set(names)) != len(names):
            raise InputError(f"Layer names must be unique, got {names}")
        if not specs:
            raise InputError("A model needs at least one layer")
        self.specs: List[LayerSpec] = list(specs)
        self.input_shape = tuple(int(d) for d in input_shape)
        self.rng_seed = int(rng_seed)
        self.net = LayeredNet(self.specs)
        self.mask = FreezeMask()
        self.freeze_bn_stats = False
        self.epoch = 0
        self._optimizer: Optional[torch.optim.SGD] = None
        reinit_layers(self, len(self.specs), self.rng_seed)

    @classmethod
    def reference(cls, in_channels: int = 3, num_classes: int = 10, image_size: int = 32,
                  rng_seed: int = 0, widths: Sequence[int] = (32, 64, 128, 128)) -> "ModelState":
        """Builds the reference CNN for the given image geometry."""
        specs = reference_cnn_specs(in_channels, num_classes, image_size, widths)
        return cls(specs, (in_channels, image_size, image_size), rng_seed)

    @property
    def layer_names(self) -> List[str]:
        return [spec.name for spec in self.specs]

    @property
    def conv_layer_names(self) -> List[str]:
        return [spec.name for spec in self.specs if spec.kind == "conv"]

    @property
    def num_classes(self) -> int:
        return self.specs[-1].out_features

    def layer(self, name: str) -> nn.Module:
        if name not in self.net.layers:
            raise InputError(f"Unknown layer '{name}'")
        return self.net.layers[name]

    def layer_params(self, name: str) -> Dict[str, nn.Parameter]:
        """Returns {'weight': ..., 'bias': ...} of one layer."""
        module = self.layer(name)
        return {"weight": module.weight, "bias": module.bias}

    def trainable_layer_names(self) -> List[str]:
        return [name for name in self.layer_names if name not in self.mask.frozen]

    def freeze(self, names: Iterable[str]) -> "ModelState":
        """
        Replaces the freeze mask.

        Raises:
            InputError: If a name is not a layer of this model
        """
        names = frozenset(names)
        unknown = names - set(self.layer_names)
        if unknown:
            raise InputError(f"Cannot freeze unknown layers: {sorted(unknown)}")
        self.mask = FreezeMask(names)
        return self

    def train_mode(self) -> None:
        """Training mode, except batchnorm layers that are frozen or whose statistics are pinned."""
        self.net.train()
        for spec in self.specs:
            if spec.kind == "batchnorm" and (self.freeze_bn_stats or spec.name in self.mask.frozen):
                self.net.layers[spec.name].eval()

    def eval_mode(self) -> None:
        self.net.eval()

    def clone(self) -> "ModelState":
        """Deep copy including optimizer momentum."""
        return copy.deepcopy(self)

    def reset_optimizer(self) -> None:
        """Drops momentum buffers."""
        self._optimizer = None

    def to(self, dtype: torch.dtype) -> "ModelState":
        self.net.to(dtype=dtype)
        self._optimizer = None
        return self

    def parameter_vector(self, names: Optional[Iterable[str]] = None) -> torch.Tensor:
        """Flattened concatenation of the weights and biases of the given layers (all by default)."""
        names = self.layer_names if names is None else list(names)
        parts = []
        for name in names:
            for param in self.layer_params(name).values():
                parts.append(param.reshape(-1))
        return torch.cat(parts)

    def check_finite(self) -> None:
        """
        Raises:
            NumericError: If any parameter is NaN or infinite
        """
        bad = [name for name in self.layer_names
               if any(not torch.isfinite(p).all() for p in self.layer_params(name).values())]
        if bad:
            raise NumericError(f"Non-finite parameters in layers {bad}", {"layers": bad, "epoch": self.epoch})

    def optimizer(self) -> torch.optim.SGD:
        if self._optimizer is None:
            self._optimizer = torch.optim.SGD(self.net.parameters(), lr=0.0, momentum=0.0)
        return self._optimizer


def _check_input(model: ModelState, x: torch.Tensor) -> None:
    if x.dim() != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise InputError(f"Input shape {tuple(x.shape)} does not match model input [N, {model.input_shape}]")


def _check_pair(model: ModelState, x: torch.Tensor, y: torch.Tensor) -> None:
    _check_input(model, x)
    if y.dim() != 1 or y.shape[0] != x.shape[0]:
        raise InputError(f"Label batch {tuple(y.shape)} does not pair with image batch {tuple(x.shape)}")


def forward(model: ModelState, x: torch.Tensor, training: bool = False) -> torch.Tensor:
    """
    Computes logits [N, K].

    Args:
        model: Model to evaluate
        x: Image batch [N, C, H, W]
        training: Use batch statistics (and update running statistics)

    Raises:
        InputError: If x does not match the model input
        NumericError: If the logits are not finite
    """
    _check_input(model, x)
    if training:
        model.train_mode()
    else:
        model.eval_mode()
    logits = model.net(x)
    if not torch.isfinite(logits).all():
        raise NumericError("Non-finite logits", {"epoch": model.epoch})
    return logits


def per_example_loss_and_input_grad(model: ModelState, x: torch.Tensor, y: torch.Tensor,
                                    training: bool = False) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    Per-example cross-entropy and the gradient of their mean with respect to the input.

    Returns:
        Tuple of (losses [N], grad_x like x), both detached

    Raises:
        NumericError: If the loss is not finite
    """
    _check_pair(model, x, y)
    x_var = x.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        logits = forward(model, x_var, training=training)
        losses = F.cross_entropy(logits, y, reduction="none")
        loss = losses.mean()
        if not torch.isfinite(loss):
            raise NumericError("Non-finite loss while computing input gradient",
                               {"loss": float(loss.detach()), "epoch": model.epoch})
        grad_x, = torch.autograd.grad(loss, x_var)
    return losses.detach(), grad_x.detach()


def loss_and_input_grad(model: ModelState, x: torch.Tensor, y: torch.Tensor,
                        training: bool = False) -> Tuple[float, torch.Tensor]:
    """
    Mean cross-entropy and its gradient with respect to the input.

    Returns:
        Tuple of (loss, grad_x) where grad_x has the shape of x

    Raises:
        NumericError: If the loss is not finite
    """
    losses, grad_x = per_example_loss_and_input_grad(model, x, y, training=training)
    return float(losses.mean()), grad_x


def loss_and_param_grad(model: ModelState, x: torch.Tensor, y: torch.Tensor,
                        extra_loss_terms: Sequence[LossTerm] = (),
                        training: bool = True) -> Tuple[float, GradientMap]:
    """
    Total loss (mean cross-entropy plus extra terms) and its gradient for every non-frozen layer.

    Args:
        model: Model to differentiate
        x: Image batch
        y: Label batch
        extra_loss_terms: Callbacks (model, logits) -> scalar tensor added to the loss
        training: Forward in training mode

    Returns:
        Tuple of (total loss, GradientMap)

    Raises:
        NumericError: If the total loss is not finite
    """
    _check_pair(model, x, y)
    names = model.trainable_layer_names()
    with torch.enable_grad():
        logits = forward(model, x, training=training)
        loss = F.cross_entropy(logits, y)
        for term in extra_loss_terms:
            loss = loss + term(model, logits)
        if not torch.isfinite(loss):
            raise NumericError("Non-finite training loss",
                               {"loss": float(loss.detach()), "epoch": model.epoch})
        params: List[torch.Tensor] = []
        keys: List[Tuple[str, str]] = []
        for name in names:
            for pname, param in model.layer_params(name).items():
                params.append(param)
                keys.append((name, pname))
        grads = torch.autograd.grad(loss, params, allow_unused=True) if params else ()
    gradient_map: GradientMap = {name: {} for name in names}
    for (name, pname), grad, param in zip(keys, grads, params):
        gradient_map[name][pname] = torch.zeros_like(param) if grad is None else grad.detach()
    return float(loss.detach()), gradient_map


def sgd_step(model: ModelState, grads: GradientMap, lr: float, momentum: float,
             weight_decay: float = 0.0) -> ModelState:
    """
    Momentum-SGD update of the layers present in grads; frozen layers are never touched.

    Raises:
        InputError: On negative lr, gradients for frozen/unknown layers or shape mismatch
        NumericError: If any parameter becomes non-finite
    """
    if lr < 0:
        raise InputError(f"Learning rate must be non-negative, got {lr}")
    optimizer = model.optimizer()
    for group in optimizer.param_groups:
        group["lr"] = lr
        group["momentum"] = momentum
        group["weight_decay"] = weight_decay
    optimizer.zero_grad(set_to_none=True)
    for name, entries in grads.items():
        if name in model.mask.frozen:
            raise InputError(f"Gradient supplied for frozen layer '{name}'")
        params = model.layer_params(name)
        for pname, grad in entries.items():
            param = params[pname]
            if tuple(grad.shape) != tuple(param.shape):
                raise InputError(f"Gradient shape {tuple(grad.shape)} does not match {name}.{pname} {tuple(param.shape)}")
            param.grad = grad.detach().clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    model.check_finite()
    return model


def reinit_layers(model: ModelState, k: int, rng_seed: int) -> ModelState:
    """
    Redraws the first k layers from the initialization distribution.

    The generator is consumed layer by layer in model order, so reinitializing
    every layer with the construction seed reproduces a fresh model exactly.

    Raises:
        InputError: If k is outside [0, number of layers]
    """
    if not 0 <= k <= len(model.specs):
        raise InputError(f"k must be in [0, {len(model.specs)}], got {k}")
    generator = torch.Generator()
    generator.manual_seed(int(rng_seed))
    for spec in model.specs[:k]:
        _init_layer(model.net.layers[spec.name], spec.kind, generator)
    if k > 0 and model._optimizer is not None:
        touched = {id(p) for spec in model.specs[:k] for p in model.layer_params(spec.name).values()}
        for param in list(model._optimizer.state.keys()):
            if id(param) in touched:
                del model._optimizer.state[param]
    log.debug(f"Reinitialized first {k} layers with seed {rng_seed}")
    return model


def cyclic_lr(epoch: float, total_epochs: int, lr_max: float) -> float:
    """
    Triangular schedule: 0 -> lr_max over the first 2/5 of training, back to 0 at the end.

    Args:
        epoch: Possibly fractional epoch position
        total_epochs: Training length in epochs
        lr_max: Peak learning rate

    Raises:
        InputError: If total_epochs < 1
    """
    if total_epochs < 1:
        raise InputError(f"total_epochs must be >= 1, got {total_epochs}")
    return float(np.interp([epoch], [0, total_epochs * 2 / 5, total_epochs], [0, lr_max, 0])[0])
