"""Energy and optimizer configuration, with optional YAML file loading."""

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

import yaml


class ConfigError(Exception):
    """Raised when configuration is invalid."""
    pass


DEFAULT_MESH = (8, 6)
DEFAULT_OMEGA_A = 1.0
DEFAULT_OMEGA_P = 5e-6
DEFAULT_ALPHA = 0.125
DEFAULT_SIZE = (512, 384)


@dataclass(frozen=True)
class OptimizerSettings:
    """Moment-based descent settings; step is in pixels."""
    step: float = 0.5
    iterations: int = 300
    tolerance: float = 1e-6
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    max_halvings: int = 5

    def __post_init__(self):
        if not self.step > 0:
            raise ConfigError(f"Optimizer step must be positive, got {self.step}")
        if self.iterations < 0:
            raise ConfigError(f"Iteration budget must be >= 0, got {self.iterations}")
        if self.tolerance < 0:
            raise ConfigError(f"Tolerance must be >= 0, got {self.tolerance}")
        if self.patience < 1:
            raise ConfigError(f"Patience must be >= 1, got {self.patience}")
        for name in ('beta1', 'beta2'):
            value = getattr(self, name)
            if not 0 <= value < 1:
                raise ConfigError(f"{name} must lie in [0, 1), got {value}")
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_halvings < 0:
            raise ConfigError(f"max_halvings must be >= 0, got {self.max_halvings}")


@dataclass(frozen=True)
class EnergyConfig:
    """Objective weights, mesh resolution and raster size."""
    mesh_u: int = DEFAULT_MESH[0]
    mesh_v: int = DEFAULT_MESH[1]
    omega_a: float = DEFAULT_OMEGA_A
    omega_p: float = DEFAULT_OMEGA_P
    alpha: float = DEFAULT_ALPHA
    image_w: int = DEFAULT_SIZE[0]
    image_h: int = DEFAULT_SIZE[1]
    optimizer: OptimizerSettings = field(default_factory=OptimizerSettings)

    def __post_init__(self):
        if int(self.mesh_u) != self.mesh_u or int(self.mesh_v) != self.mesh_v:
            raise ConfigError(f"Mesh resolution must be integral, got {self.mesh_u}x{self.mesh_v}")
        if self.mesh_u < 1 or self.mesh_v < 1:
            raise ConfigError(f"Mesh resolution must be >= 1x1, got {self.mesh_u}x{self.mesh_v}")
        if not 0 < self.alpha < 1:
            raise ConfigError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.omega_a < 0 or self.omega_p < 0:
            raise ConfigError(f"Weights must be >= 0, got omega_a={self.omega_a}, omega_p={self.omega_p}")
        if self.image_w < 1 or self.image_h < 1:
            raise ConfigError(f"Raster must be non-empty, got {self.image_w}x{self.image_h}")

    @property
    def mesh_shape(self) -> Tuple[int, int]:
        return self.mesh_u + 1, self.mesh_v + 1

    def for_image(self, width: int, height: int) -> 'EnergyConfig':
        return replace(self, image_w=int(width), image_h=int(height))

    def with_mesh(self, u: int, v: int) -> 'EnergyConfig':
        return replace(self, mesh_u=int(u), mesh_v=int(v))

    def to_dict(self) -> Dict:
        return {
            'mesh': f"{self.mesh_u}x{self.mesh_v}",
            'omega_a': self.omega_a,
            'omega_p': self.omega_p,
            'alpha': self.alpha,
            'image': f"{self.image_w}x{self.image_h}",
            'step': self.optimizer.step,
            'iterations': self.optimizer.iterations,
            'tolerance': self.optimizer.tolerance,
        }


def parse_resolution(text: str) -> Tuple[int, int]:
    """Parse 'UxV' into (U, V)."""
    parts = str(text).lower().split('x')
    if len(parts) != 2:
        raise ConfigError(f"Invalid mesh resolution: {text}\nExpected format: UxV (e.g. 8x6)")
    try:
        u, v = int(parts[0]), int(parts[1])
    except ValueError:
        raise ConfigError(f"Invalid mesh resolution: {text}\nExpected format: UxV (e.g. 8x6)")
    if u < 1 or v < 1:
        raise ConfigError(f"Mesh resolution must be >= 1x1, got {text}")
    return u, v


class ConfigFile:
    """YAML configuration loader and validator."""

    SECTIONS = {
        'mesh': {'u': int, 'v': int},
        'energy': {'omega_a': float, 'omega_p': float, 'alpha': float},
        'optimizer': {
            'step': float, 'iterations': int, 'tolerance': float, 'patience': int,
            'beta1': float, 'beta2': float, 'epsilon': float, 'max_halvings': int,
        },
        'synth': {'magnitude': float, 'width': int, 'height': int},
    }

    def __init__(self, config_path: str):
        self.config_path = Path(config_path)
        self.data = self._load()
        self._validate()

    def _load(self) -> Dict:
        """Load YAML configuration file."""
        if not self.config_path.exists():
            raise ConfigError(
                f"Configuration file not found: {self.config_path}\n"
                f"Copy config.example.yaml and adjust it."
            )

        try:
            with open(self.config_path, 'r') as f:
                data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise ConfigError(f"Invalid YAML syntax: {e}")
        if data is None:
            raise ConfigError("Configuration file is empty")
        if not isinstance(data, dict):
            raise ConfigError("Configuration file must hold a mapping of sections")
        return data

    def _validate(self):
        """Validate sections, keys and value types."""
        for section, values in self.data.items():
            if section not in self.SECTIONS:
                raise ConfigError(
                    f"Unknown section '{section}' in config\n"
                    f"Valid sections: {', '.join(self.SECTIONS)}"
                )
            if values is None:
                continue
            if not isinstance(values, dict):
                raise ConfigError(f"Section '{section}' must be a mapping")
            for key, value in values.items():
                expected = self.SECTIONS[section].get(key)
                if expected is None:
                    raise ConfigError(f"Unknown key '{section}.{key}' in config")
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise ConfigError(f"'{section}.{key}' must be a number, got {value!r}")
                if expected is int and int(value) != value:
                    raise ConfigError(f"'{section}.{key}' must be an integer, got {value}")

    def _section(self, name: str) -> Dict:
        return self.data.get(name) or {}

    @property
    def mesh(self) -> Optional[Tuple[int, int]]:
        mesh = self._section('mesh')
        if not mesh:
            return None
        return int(mesh.get('u', DEFAULT_MESH[0])), int(mesh.get('v', DEFAULT_MESH[1]))

    @property
    def synth_magnitude(self) -> Optional[float]:
        return self._section('synth').get('magnitude')

    @property
    def synth_size(self) -> Tuple[int, int]:
        synth = self._section('synth')
        return int(synth.get('width', DEFAULT_SIZE[0])), int(synth.get('height', DEFAULT_SIZE[1]))

    def energy_config(self) -> EnergyConfig:
        optimizer = OptimizerSettings(**{
            key: (int(value) if self.SECTIONS['optimizer'][key] is int else float(value))
            for key, value in self._section('optimizer').items()
        })
        energy = {key: float(value) for key, value in self._section('energy').items()}
        u, v = self.mesh or DEFAULT_MESH
        width, height = self.synth_size
        return EnergyConfig(mesh_u=u, mesh_v=v, image_w=width, image_h=height,
                            optimizer=optimizer, **energy)
