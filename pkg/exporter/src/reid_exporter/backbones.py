"""Feature-extraction backbones.

The stub backbone is bit-stable and content-dependent: it decodes the image,
resizes it to the configured input size, reduces it to the target spatial
grid, and expands the three color channels with a fixed random projection.
The torch backbone wraps a torchvision ResNet50 truncated after its last
convolutional stage; on a 256x128 input it emits an 8x4x2048 map.
"""
from __future__ import annotations

import numpy as np

from .errors import BackboneUnavailable, ImageDecodeError

# profile name -> feature map dims (h, w, c) of the published backbones
PROFILES = {
    "resnet50": (8, 4, 2048),
    "mobilenet": (8, 4, 1024),
}

_STUB_PROJECTION_SEED = 0xC0FFEE


def _decode(image_path, size_hw: tuple[int, int]):
    try:
        from PIL import Image
    except ImportError as exc:  # pragma: no cover
        raise BackboneUnavailable("pillow is required for image decoding") from exc
    try:
        with Image.open(image_path) as img:
            return img.convert("RGB").resize((size_hw[1], size_hw[0]), Image.BILINEAR)
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageDecodeError(f"{image_path}: {exc}") from exc


class StubBackbone:
    """Deterministic drop-in backbone for tests and toy exports."""

    def __init__(self, dims: tuple[int, int, int], input_size: tuple[int, int] = (256, 128)):
        self.dims = tuple(dims)
        self.input_size = tuple(input_size)
        rng = np.random.default_rng(_STUB_PROJECTION_SEED)
        self._projection = rng.normal(size=(3, self.dims[2])).astype(np.float32)

    def extract(self, image_path) -> np.ndarray:
        from PIL import Image

        h, w, _ = self.dims
        img = _decode(image_path, self.input_size)
        grid = np.asarray(img.resize((w, h), Image.BILINEAR), dtype=np.float32) / 255.0
        return grid @ self._projection  # (h, w, c)


class TorchResNet50Backbone:
    """ResNet50 feature maps via torchvision (8x4x2048 on 256x128 inputs)."""

    def __init__(self, input_size: tuple[int, int] = (256, 128), weights: str = "pretrained"):
        self.dims = PROFILES["resnet50"]
        self.input_size = tuple(input_size)
        try:
            import torch
            from torchvision import models
        except ImportError as exc:
            raise BackboneUnavailable("torch/torchvision are not installed") from exc
        try:
            if weights == "pretrained":
                net = models.resnet50(weights=models.ResNet50_Weights.DEFAULT)
            else:
                net = models.resnet50(weights=None)
        except Exception as exc:
            raise BackboneUnavailable(f"could not obtain resnet50 weights: {exc}") from exc
        self._torch = torch
        self._net = torch.nn.Sequential(*list(net.children())[:-2]).eval()
        self._mean = np.array([0.485, 0.456, 0.406], dtype=np.float32)
        self._std = np.array([0.229, 0.224, 0.225], dtype=np.float32)

    def extract(self, image_path) -> np.ndarray:
        img = _decode(image_path, self.input_size)
        arr = (np.asarray(img, dtype=np.float32) / 255.0 - self._mean) / self._std
        tensor = self._torch.from_numpy(arr.transpose(2, 0, 1)[None])
        with self._torch.no_grad():
            out = self._net(tensor)  # (1, 2048, h/32, w/32)
        return out[0].permute(1, 2, 0).numpy().astype(np.float32)


def get_backbone(name: str, profile: str, dims=None, input_size=(256, 128), weights="pretrained"):
    """Resolve a backbone by name for the given profile.

    ``name`` is "stub" or "torch"; ``profile`` selects the published dims
    ("resnet50", "mobilenet") or "toy", which requires explicit ``dims``.
    """
    if profile == "toy":
        if dims is None:
            raise BackboneUnavailable("the toy profile needs explicit dims")
        target = tuple(dims)
    elif profile in PROFILES:
        target = PROFILES[profile]
    else:
        raise BackboneUnavailable(f"unknown profile {profile!r}")

    if name == "stub":
        return StubBackbone(target, input_size)
    if name == "torch":
        if profile != "resnet50":
            raise BackboneUnavailable(
                f"no torch implementation for profile {profile!r}; use the stub backbone"
            )
        return TorchResNet50Backbone(input_size, weights)
    raise BackboneUnavailable(f"unknown backbone {name!r}")
