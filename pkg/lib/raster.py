"""Image and mask rasters plus PNG load/store."""

from dataclasses import dataclass
from pathlib import Path
from typing import Tuple, Union

import numpy as np
from PIL import Image, UnidentifiedImageError

GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114])


class RasterError(ValueError):
    """Raised when a raster is malformed."""
    pass


class RasterIOError(RasterError):
    """Raised when a raster cannot be read or written."""
    pass


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """HxWxC intensities, nominally in [0, 1]; C is 1 or 3."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[..., None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise RasterError(f"Image must be HxW, HxWx1 or HxWx3, got {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise RasterError("Image must not be empty")
        if not np.all(np.isfinite(data)):
            raise RasterError("Image contains non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def gray(self) -> np.ndarray:
        if self.channels == 1:
            return self.data[..., 0]
        return self.data @ GRAY_WEIGHTS


@dataclass(frozen=True, eq=False)
class MaskBuffer:
    """HxW validity mask: 1 is stitched content, 0 is void."""
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3 and data.shape[2] == 1:
            data = data[..., 0]
        if data.ndim != 2:
            raise RasterError(f"Mask must be HxW, got {data.shape}")
        if data.shape[0] == 0 or data.shape[1] == 0:
            raise RasterError("Mask must not be empty")
        if not np.all(np.isfinite(data)):
            raise RasterError("Mask contains non-finite values")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, 'data', data)

    @classmethod
    def ones(cls, width: int, height: int) -> 'MaskBuffer':
        return cls(np.ones((height, width)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def void_fraction(self) -> float:
        return float(np.mean(self.data < 0.5))


PathLike = Union[str, Path]


def _open(path: PathLike) -> Image.Image:
    try:
        with Image.open(path) as img:
            img.load()
            return img
    except FileNotFoundError:
        raise RasterIOError(f"File not found: {path}")
    except (UnidentifiedImageError, OSError) as e:
        raise RasterIOError(f"Cannot read image {path}: {e}")


SIXTEEN_BIT_MODES = ('I;16', 'I;16L', 'I;16B', 'I')


def from_pil(img: Image.Image) -> ImageBuffer:
    """Float image in [0, 1]. 16-bit grayscale is scaled by 1/65535, not clipped to 8 bits."""
    if img.mode in SIXTEEN_BIT_MODES:
        arr = np.asarray(img).astype(np.float64)
        if arr.min() < 0 or arr.max() > 65535:
            raise RasterError(f"Integer image values outside the 16-bit range: [{arr.min():g}, {arr.max():g}]")
        return ImageBuffer(arr / 65535.0)
    if img.mode == 'F':
        raise RasterError("Floating-point images are not supported; save as 8- or 16-bit PNG")
    if img.mode in ('1', 'L'):
        arr = np.asarray(img.convert('L'), dtype=np.float64)
    else:
        arr = np.asarray(img.convert('RGB'), dtype=np.float64)
    return ImageBuffer(arr / 255.0)


def to_pil(image: ImageBuffer) -> Image.Image:
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    if image.channels == 1:
        return Image.fromarray(arr[..., 0])
    return Image.fromarray(arr)


def load_image(path: PathLike) -> ImageBuffer:
    return from_pil(_open(path))


def load_mask(path: PathLike) -> MaskBuffer:
    """Load a mask PNG and binarize it at 0.5."""
    img = _open(path)
    arr = from_pil(img if img.mode in SIXTEEN_BIT_MODES else img.convert('L')).gray()
    return MaskBuffer((arr >= 0.5).astype(np.float64))


def save_image(image: ImageBuffer, path: PathLike):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        to_pil(image).save(path, format='PNG')
    except OSError as e:
        raise RasterIOError(f"Cannot write image {path}: {e}")


def save_mask(mask: MaskBuffer, path: PathLike):
    save_image(ImageBuffer(mask.data), path)


def resize_image(image: ImageBuffer, width: int, height: int) -> ImageBuffer:
    """Bilinear resize on the float data, one channel at a time."""
    channels = []
    for c in range(image.channels):
        band = Image.fromarray(image.data[..., c].astype(np.float32))
        channels.append(np.asarray(band.resize((width, height), Image.BILINEAR), dtype=np.float64))
    return ImageBuffer(np.stack(channels, axis=-1))


def resize_mask(mask: MaskBuffer, width: int, height: int) -> MaskBuffer:
    band = Image.fromarray(mask.data.astype(np.float32))
    resized = np.asarray(band.resize((width, height), Image.BILINEAR), dtype=np.float64)
    return MaskBuffer((resized >= 0.5).astype(np.float64))
