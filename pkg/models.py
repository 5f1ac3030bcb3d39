"""
2D U-Net model.

The contracting path repeats two same-padded 3x3 convolutions with ReLU
followed by 2x2 max pooling, doubling the feature count at each step. The
expansive path upsamples with 2x2 transposed convolutions that halve the
features, concatenates the matching encoder output, and applies two more
3x3 convolutions. A 1x1 convolution maps the last features to class scores,
turned into per-pixel probabilities by a softmax.

Tensors at the module boundary are channels-last, (B, h, w, C), matching
the preprocessing output.

Parameter count, with conv(cin, cout, k) = k*k*cin*cout + cout and widths
w_i = base * 2**i:

    encoder i:   conv(c_i, w_i, 3) + conv(w_i, w_i, 3), c_0 = in_channels, c_i = w_(i-1)
    bottleneck:  conv(w_(d-1), w_d, 3) + conv(w_d, w_d, 3)
    up i:        conv(w_(i+1), w_i, 2)
    decoder i:   conv(2 * w_i, w_i, 3) + conv(w_i, w_i, 3)
    head:        conv(w_0, num_classes, 1)
"""

import errno
import os
import pickle
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch import nn

from exceptions import ConfigInvalid, CorruptFile, DiskFull, IoFailure, ShapeMismatch
from extensions import log_event

CHECKPOINT_FORMAT = "brats-unet2d/1"


@dataclass(frozen=True)
class UNetConfig:
    """
    Architecture hyperparameters.

    Attributes:
        in_channels (int): Input modalities
        num_classes (int): Output classes
        base_features (int): Width of the first encoder level
        depth (int): Number of down-sampling steps
        input_size (Tuple[int, int]): Input (h, w)
    """

    in_channels: int = 2
    num_classes: int = 4
    base_features: int = 32
    depth: int = 4
    input_size: Tuple[int, int] = (128, 128)

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(n) for n in self.input_size))
        self.validate()

    def validate(self) -> None:
        """Check the config invariants.

        Raises:
            ConfigInvalid: If any invariant is violated.
        """
        if self.depth < 1:
            raise ConfigInvalid(f"depth must be >= 1, got {self.depth}")
        if self.base_features < 1:
            raise ConfigInvalid(f"base_features must be >= 1, got {self.base_features}")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ConfigInvalid("need in_channels >= 1 and num_classes >= 2")
        if len(self.input_size) != 2:
            raise ConfigInvalid(f"input_size must be (h, w), got {self.input_size}")
        factor = 2**self.depth
        if any(n < factor or n % factor for n in self.input_size):
            raise ConfigInvalid(
                f"input size {self.input_size} is not divisible by 2**depth = {factor}"
            )

    def encoder_widths(self) -> List[int]:
        return [self.base_features * 2**i for i in range(self.depth)]

    def bottleneck_width(self) -> int:
        return self.base_features * 2**self.depth

    def decoder_widths(self) -> List[int]:
        return list(reversed(self.encoder_widths()))


class DoubleConv(nn.Sequential):
    """conv3x3 -> ReLU -> conv3x3 -> ReLU, same padding."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_channels, out_channels, kernel_size=3, padding=1),
            nn.ReLU(inplace=True),
        )


class UNet(nn.Module):
    """The encoder-decoder network; forward returns class probabilities."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        widths = config.encoder_widths()

        self.encoders = nn.ModuleList()
        in_channels = config.in_channels
        for width in widths:
            self.encoders.append(DoubleConv(in_channels, width))
            in_channels = width
        self.pool = nn.MaxPool2d(kernel_size=2, stride=2)
        self.bottleneck = DoubleConv(widths[-1], config.bottleneck_width())

        self.ups = nn.ModuleList()
        self.decoders = nn.ModuleList()
        in_channels = config.bottleneck_width()
        for width in reversed(widths):
            self.ups.append(nn.ConvTranspose2d(in_channels, width, kernel_size=2, stride=2))
            self.decoders.append(DoubleConv(2 * width, width))
            in_channels = width
        self.head = nn.Conv2d(widths[0], config.num_classes, kernel_size=1)

    def logits(self, x: torch.Tensor) -> torch.Tensor:
        """Class scores for a channels-first batch (B, C_in, h, w)."""
        skips = []
        for encoder in self.encoders:
            x = encoder(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        for up, decoder, skip in zip(self.ups, self.decoders, reversed(skips)):
            x = decoder(torch.cat([up(x), skip], dim=1))
        return self.head(x)

    def forward(self, inputs: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities.

        Args:
            inputs (torch.Tensor): (B, h, w, C_in) channels-last batch.

        Returns:
            torch.Tensor: (B, h, w, num_classes), summing to 1 per pixel.
        """
        check_input_shape(self.config, tuple(inputs.shape))
        scores = self.logits(inputs.permute(0, 3, 1, 2))
        return torch.softmax(scores, dim=1).permute(0, 2, 3, 1)


def check_input_shape(config: UNetConfig, shape: Tuple[int, ...]) -> None:
    """Raise ShapeMismatch unless shape is (B, h, w, in_channels) for the config."""
    expected = (*config.input_size, config.in_channels)
    if len(shape) != 4 or shape[0] < 1 or tuple(shape[1:]) != expected:
        raise ShapeMismatch(f"expected input (B, {expected[0]}, {expected[1]}, {expected[2]}), got {shape}")


def _check_skip_shapes(config: UNetConfig) -> None:
    """Each decoder input must match its encoder output spatially."""
    h, w = config.input_size
    encoder_sizes = [(h // 2**i, w // 2**i) for i in range(config.depth)]
    size = (h // 2**config.depth, w // 2**config.depth)
    for skip in reversed(encoder_sizes):
        size = (size[0] * 2, size[1] * 2)
        assert size == skip, f"skip connection mismatch: {size} vs {skip}"


def _init_parameters(model: nn.Module) -> None:
    for module in model.modules():
        if isinstance(module, (nn.Conv2d, nn.ConvTranspose2d)):
            nn.init.kaiming_normal_(module.weight, mode="fan_in", nonlinearity="relu")
            nn.init.zeros_(module.bias)


def build_unet(config: UNetConfig, seed: int = 0) -> UNet:
    """Build a U-Net with seeded fan-in initialization.

    Args:
        config (UNetConfig): Architecture hyperparameters.
        seed (int): Initialization seed; the global RNG state is untouched.

    Returns:
        UNet: The initialized model in eval mode.

    Raises:
        ConfigInvalid: If the config violates its invariants.
    """
    config.validate()
    _check_skip_shapes(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = UNet(config)
        _init_parameters(model)
    return model.eval()


def forward(model: UNet, inputs: Union[np.ndarray, torch.Tensor]) -> np.ndarray:
    """Run inference on a channels-last batch.

    Returns:
        np.ndarray: (B, h, w, num_classes) probabilities.

    Raises:
        ShapeMismatch: If the batch does not match the model config.
    """
    check_input_shape(model.config, tuple(inputs.shape))
    parameter = next(model.parameters())
    tensor = torch.as_tensor(np.asarray(inputs), dtype=parameter.dtype, device=parameter.device)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        probs = model(tensor)
    model.train(was_training)
    return probs.cpu().numpy()


def count_parameters(model: nn.Module) -> int:
    """Total number of scalar parameters."""
    return sum(p.numel() for p in model.parameters())


def expected_parameter_count(config: UNetConfig) -> int:
    """Closed-form parameter count of build_unet(config); see module docs."""

    def conv(cin: int, cout: int, k: int) -> int:
        return k * k * cin * cout + cout

    widths = config.encoder_widths()
    total = 0
    in_channels = config.in_channels
    for width in widths:
        total += conv(in_channels, width, 3) + conv(width, width, 3)
        in_channels = width
    bottleneck = config.bottleneck_width()
    total += conv(widths[-1], bottleneck, 3) + conv(bottleneck, bottleneck, 3)
    in_channels = bottleneck
    for width in reversed(widths):
        total += conv(in_channels, width, 2)
        total += conv(2 * width, width, 3) + conv(width, width, 3)
        in_channels = width
    return total + conv(widths[0], config.num_classes, 1)


# ============================================================================
# Checkpoints
# ============================================================================


def save_checkpoint(
    model: UNet, path: Union[str, os.PathLike], metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """Write config, parameters and metadata to a torch archive.

    The archive is written to a temporary file first and then moved into
    place, so a reader never sees a partial checkpoint.

    Raises:
        DiskFull: If the device has no space left.
        IoFailure: On any other write error.
    """
    path = Path(path)
    config = asdict(model.config)
    config["input_size"] = list(config["input_size"])
    archive = {
        "format": CHECKPOINT_FORMAT,
        "config": config,
        "state_dict": {k: v.detach().cpu().clone() for k, v in model.state_dict().items()},
        "metadata": dict(metadata or {}),
    }
    tmp_path = path.with_name(path.name + ".tmp")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save(archive, tmp_path)
        os.replace(tmp_path, path)
    except OSError as e:
        if e.errno == errno.ENOSPC:
            raise DiskFull(f"no space left writing {path}", str(path)) from e
        raise IoFailure(f"cannot write checkpoint {path}: {e}", str(path)) from e
    return path


def load_checkpoint(path: Union[str, os.PathLike]) -> Tuple[UNet, Dict[str, Any]]:
    """Restore a model saved by save_checkpoint.

    Returns:
        Tuple[UNet, Dict[str, Any]]: The model in eval mode and its metadata.

    Raises:
        CorruptFile: If the archive is missing, unreadable or incomplete.
    """
    path = Path(path)
    try:
        archive = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError, ValueError, pickle.UnpicklingError) as e:
        raise CorruptFile(f"cannot read checkpoint {path}: {e}") from e
    if not isinstance(archive, dict) or archive.get("format") != CHECKPOINT_FORMAT:
        raise CorruptFile(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")

    config = UNetConfig(**archive["config"])
    model = build_unet(config)
    try:
        model.load_state_dict(archive["state_dict"])
    except RuntimeError as e:
        raise CorruptFile(f"{path} parameters do not match its config: {e}") from e
    log_event("checkpoint_loaded", str(path))
    return model.eval(), archive.get("metadata", {})
