"""Feature extractors for the perception loss.

An extractor maps an HxWxC array to a list of feature arrays and provides the
vector-Jacobian product back to input pixels, which the energy gradient needs.
"""

from abc import ABC, abstractmethod
from typing import List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from .raster import GRAY_WEIGHTS

DERIVATIVE_KERNEL = np.array([-0.5, 0.0, 0.5])


class FeatureExtractor(ABC):
    """Deterministic map from an image array to a feature stack."""

    name = 'abstract'

    @abstractmethod
    def extract(self, data: np.ndarray) -> List[np.ndarray]:
        pass

    @abstractmethod
    def vjp(self, data: np.ndarray, grads: Sequence[np.ndarray]) -> np.ndarray:
        """Gradient w.r.t. data of sum(grads[k] * extract(data)[k])."""
        pass


class IdentityFeatures(FeatureExtractor):
    """phi(x) = x; the perception loss reduces to mean squared pixel error."""

    name = 'identity'

    def extract(self, data: np.ndarray) -> List[np.ndarray]:
        return [np.asarray(data, dtype=np.float64)]

    def vjp(self, data: np.ndarray, grads: Sequence[np.ndarray]) -> np.ndarray:
        return np.asarray(grads[0], dtype=np.float64).reshape(np.shape(data))


class PyramidFeatures(FeatureExtractor):
    """Gaussian pyramid of intensity with x/y derivative channels.

    Level k blurs the gray image with sigmas[k], takes central differences, and
    keeps every 2**(k+1)-th pixel. Every stage is linear with zero padding, so
    the adjoint is exact.
    """

    name = 'pyramid'

    def __init__(self, sigmas: Tuple[float, ...] = (1.0, 2.0, 4.0)):
        self.sigmas = tuple(float(s) for s in sigmas)

    @staticmethod
    def _gray(data: np.ndarray) -> np.ndarray:
        if data.shape[2] == 1:
            return data[..., 0]
        return data @ GRAY_WEIGHTS

    def extract(self, data: np.ndarray) -> List[np.ndarray]:
        gray = self._gray(np.asarray(data, dtype=np.float64))
        features = []
        for level, sigma in enumerate(self.sigmas):
            stride = 2 ** (level + 1)
            blurred = ndimage.gaussian_filter(gray, sigma, mode='constant')
            gx = ndimage.correlate1d(blurred, DERIVATIVE_KERNEL, axis=1, mode='constant')
            gy = ndimage.correlate1d(blurred, DERIVATIVE_KERNEL, axis=0, mode='constant')
            stack = np.stack([blurred, gx, gy])
            features.append(stack[:, ::stride, ::stride])
        return features

    def vjp(self, data: np.ndarray, grads: Sequence[np.ndarray]) -> np.ndarray:
        data = np.asarray(data, dtype=np.float64)
        h, w = data.shape[:2]
        gray_grad = np.zeros((h, w))
        reversed_kernel = DERIVATIVE_KERNEL[::-1]
        for level, (sigma, grad) in enumerate(zip(self.sigmas, grads)):
            stride = 2 ** (level + 1)
            full = np.zeros((3, h, w))
            full[:, ::stride, ::stride] = grad
            blurred_grad = (full[0]
                            + ndimage.correlate1d(full[1], reversed_kernel, axis=1, mode='constant')
                            + ndimage.correlate1d(full[2], reversed_kernel, axis=0, mode='constant'))
            gray_grad += ndimage.gaussian_filter(blurred_grad, sigma, mode='constant')
        if data.shape[2] == 1:
            return gray_grad[..., None]
        return gray_grad[..., None] * GRAY_WEIGHTS


def get_extractor(name: str) -> FeatureExtractor:
    extractors = {
        'pyramid': PyramidFeatures,
        'identity': IdentityFeatures,
    }
    if name not in extractors:
        raise ValueError(f"Unknown feature extractor: {name}. Valid: {', '.join(extractors)}")
    return extractors[name]()


def feature_count(features: Sequence[np.ndarray]) -> int:
    return int(sum(f.size for f in features))
