"""Experiment configuration: TOML files validated against a strict schema.

Grammar: TOML tables ``[meta]``, ``[model]``, ``[observable]``,
``[simulation]``, ``[hypotheses]``, ``[lln]``, ``[corrector]``,
``[martingale]``, ``[clt]``, ``[vorticity]``, ``[output]``; typed scalars
and inline arrays only. Unknown keys are rejected.
"""

from copy import deepcopy
import hashlib
import json
import os
from importlib import resources
from typing import List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, ValidationError

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

PRESETS = ("ou-closed-form", "ctmc-oracle", "galerkin-vorticity")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class MetaSection(_Strict):
    name: str = "experiment"
    seed: int = Field(default=0, ge=0, lt=2**64)


class ModelSection(_Strict):
    kind: Literal["ou", "dissipative", "vorticity", "ctmc"]
    # ou
    theta: float = 1.0
    noise_sigma: float = 1.0
    dimension: int = Field(default=1, ge=1)
    # dissipative
    A: Optional[List[List[float]]] = None
    A_diag: Optional[List[float]] = None
    nonlinearity: Literal["zero", "sin", "tanh"] = "zero"
    strength: float = 0.0
    noise_gammas: Union[float, List[float]] = 1.0
    # vorticity
    cutoff: int = 4
    forcing_modes: Optional[List[List[int]]] = None
    forcing_gammas: Optional[List[float]] = None
    eta: float = 0.1
    nonlinear: bool = True
    # ctmc
    generator: Optional[List[List[float]]] = None
    generator_file: Optional[str] = None
    distances: Optional[List[List[float]]] = None
    distances_file: Optional[str] = None
    random_states: Optional[int] = None
    random_seed: int = 0


class ObservableSection(_Strict):
    kind: Literal["coordinate", "linear", "constant", "state-values", "sin-coordinate"] = "coordinate"
    index: int = 0
    coefficients: Optional[List[float]] = None
    offset: float = 0.0
    value: float = 0.0
    values: Optional[List[float]] = None


class SimulationSection(_Strict):
    dt: Optional[float] = Field(default=None, gt=0)
    integrator: Literal["exponential-euler", "euler-maruyama"] = "exponential-euler"
    initial: Union[int, float, List[float]] = 0.0


class HypothesesSection(_Strict):
    enabled: bool = True
    delta: float = Field(default=0.5, gt=0)
    coupling: Literal["synchronous", "independent"] = "synchronous"
    pair: Optional[List[List[float]]] = None
    fit_times: List[float] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0]
    fit_samples: int = Field(default=1000, ge=100)
    lyapunov_times: List[float] = [0.5, 1, 2, 4, 8, 16]
    moment_samples: int = 2000
    ball_radius: float = 1.0
    ball_points: int = 5
    moment_T: float = 4.0
    continuity_times: List[float] = [0.5, 0.25, 0.125, 0.0625, 0.03125, 0.0]
    continuity_samples: int = 4000
    burn_tol: float = 0.01
    stationary_replicas: int = 1000
    stationary_per_replica: int = 4
    cesaro_times: List[float] = [1.0, 2.0, 4.0, 8.0]
    cesaro_samples: int = 1000
    lipschitz_times: List[float] = [0.5, 1.0, 2.0, 3.0]
    lipschitz_samples: int = 2000
    exact_fit_times: List[float] = [0.5, 1, 2, 3, 4, 6, 8]


class LlnSection(_Strict):
    T_list: List[float] = [25.0, 50.0, 100.0, 200.0]
    n_paths: int = Field(default=10000, ge=2)
    n_boot: int = 200


class CorrectorSection(_Strict):
    enabled: bool = True
    tol: float = Field(default=0.01, gt=0)
    n_samples: int = 20000
    grid: Optional[List[List[float]]] = None
    eval_points: Optional[List[List[float]]] = None


class MartingaleSection(_Strict):
    enabled: bool = True
    N: int = Field(default=64, ge=2)
    n_paths: int = 10000
    K: List[int] = [1, 2, 4, 8]
    ell: int = 4
    epsilon: float = 0.5
    n_inner: int = 256
    n_outer: int = 32
    theta_max: float = 3.0
    n_theta: int = 25
    negative_control: bool = True
    sigma2_paths: int = 10000


class CltSection(_Strict):
    enabled: bool = True
    T: float = 200.0
    level: float = 0.01
    allowance: float = 0.2
    bins: int = 40
    bootstrap: int = Field(default=0, ge=0)


class VorticitySection(_Strict):
    n_paths: int = 256
    T: float = 20.0
    record_every: float = 0.5
    n_random_states: int = 100
    initial_scale: float = 0.1
    accept_modes: List[List[List[int]]] = [[[1, 0], [-1, 0], [1, 1], [-1, -1]]]
    reject_modes: List[List[List[int]]] = [[[1, 0], [-1, 0], [0, 1], [0, -1]]]


class OutputSection(_Strict):
    out_dir: str = "out"


class ExperimentConfig(_Strict):
    meta: MetaSection = MetaSection()
    model: ModelSection
    observable: ObservableSection = ObservableSection()
    simulation: SimulationSection = SimulationSection()
    hypotheses: HypothesesSection = HypothesesSection()
    lln: LlnSection = LlnSection()
    corrector: CorrectorSection = CorrectorSection()
    martingale: MartingaleSection = MartingaleSection()
    clt: CltSection = CltSection()
    vorticity: VorticitySection = VorticitySection()
    output: OutputSection = OutputSection()
    _base_dir: str = PrivateAttr(default=".")

    def config_hash(self):
        """Digest of the canonical content; the seed and output paths are excluded."""
        data = self.model_dump(mode="json", exclude={"output": True, "meta": {"seed"}})
        blob = json.dumps(data, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self._base_dir, path)


def _key_path(loc):
    return ".".join(str(p) for p in loc)


def validate_config(data, base_dir="."):
    """Validate a parsed mapping; schema errors name the offending key path."""
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(f"{err['msg']} (input {err.get('input')!r})", _key_path(err["loc"])) from None
    cfg._base_dir = base_dir
    # model-level validation, including the non-degeneracy condition for vorticity forcing
    from .harness import build_model, build_observable

    model = build_model(cfg)
    build_observable(cfg, model)
    return cfg


def parse_config(path, overrides=None):
    """Read and validate a TOML config file. ``overrides`` maps dotted keys to values."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    data = apply_overrides(data, overrides or {})
    return validate_config(data, os.path.dirname(os.path.abspath(path)))


def apply_overrides(data, overrides):
    data = deepcopy(data)
    for key, value in overrides.items():
        node = data
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return data


def preset_text(name):
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return resources.files("markov_clt").joinpath("presets", f"{name}.toml").read_text()


def load_preset(name, overrides=None):
    data = tomllib.loads(preset_text(name))
    data = apply_overrides(data, overrides or {})
    base = str(resources.files("markov_clt").joinpath("presets"))
    return validate_config(data, base)


def parse_override(text):
    """``key.path=value`` with the value parsed as a TOML scalar or array."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like key.path=value")
    key, raw = text.split("=", 1)
    try:
        value = tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        value = raw
    return key.strip(), value
