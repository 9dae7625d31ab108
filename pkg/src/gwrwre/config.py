"""Experiment configuration: TOML files validated into typed models.

A config has a ``[tree]`` section (offspring law), a ``[kernel]`` section
(variant tag plus parameters, or a named built-in), an optional
``[reinforcement]`` section and one section per subcommand.  Everything is
validated before a run starts; errors name the offending field path.
"""

from __future__ import annotations

import hashlib
import json
import shlex
import sys
from pathlib import Path
from typing import Annotated, Any, List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from . import environment as env_mod
from .environment import EnvKernel, EnvState, FiniteMatrixKernel, IIDKernel, TruncationWindow
from .gw_tree import OffspringLaw
from .walk import ReinforcedParams

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class ConfigError(ValueError):
    """Schema or consistency error; the message lists field paths."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# ---------------------------------------------------------------------------
# tree and kernel


class TreeSpec(_Model):
    offspring: List[Tuple[int, float]] = Field(min_length=1)

    @field_validator("offspring")
    @classmethod
    def _valid_law(cls, v):
        OffspringLaw.from_pairs(v)
        return v

    def law(self) -> OffspringLaw:
        return OffspringLaw.from_pairs(self.offspring)


class PointMassKernel(_Model):
    variant: Literal["point-mass"]
    a: float = Field(gt=0)

    def build(self, matrix_form: bool = False) -> EnvKernel:
        return env_mod.point_mass_kernel(self.a)


class IIDDiscreteKernel(_Model):
    variant: Literal["iid"]
    values: List[float] = Field(min_length=1)
    probs: Optional[List[float]] = None

    def build(self, matrix_form: bool = False) -> EnvKernel:
        return IIDKernel(env_mod.DiscreteLaw(self.values, self.probs))


class IIDContinuousKernel(_Model):
    """I.i.d. weights from a ``scipy.stats`` distribution, e.g. ``dist = "uniform"``."""

    variant: Literal["iid-continuous"]
    dist: str
    params: dict = Field(default_factory=dict)

    @field_validator("dist")
    @classmethod
    def _known(cls, v):
        from scipy import stats

        if not isinstance(getattr(stats, v, None), stats.rv_continuous):
            raise ValueError(f"unknown continuous distribution {v!r}")
        return v

    def build(self, matrix_form: bool = False) -> EnvKernel:
        from scipy import stats

        return IIDKernel(env_mod.ContinuousLaw(getattr(stats, self.dist)(**self.params)))


class FiniteKernel(_Model):
    variant: Literal["finite"]
    weights: List[float] = Field(min_length=1)
    matrix: List[List[float]]
    labels: Optional[List[str]] = None
    thresholds: Optional[List[float]] = None

    def build(self, matrix_form: bool = False) -> EnvKernel:
        return FiniteMatrixKernel(self.weights, self.matrix, self.labels, self.thresholds)


BUILTINS = ("dyadic", "exp-mixture")


def parse_builtin(text: str) -> Tuple[str, dict]:
    """``"exp-mixture alpha=0.5"`` -> ``("exp-mixture", {"alpha": 0.5})``."""
    parts = shlex.split(text.replace(",", " "))
    if not parts:
        raise ValueError("empty built-in kernel name")
    name, params = parts[0], {}
    for tok in parts[1:]:
        key, sep, val = tok.partition("=")
        if not sep:
            raise ValueError(f"expected key=value, got {tok!r}")
        params[key] = float(val)
    return name, params


class BuiltinKernel(_Model):
    """Named example kernel, run as a sampler or as its grid discretization.

    ``form = "auto"`` simulates with the exact sampler and switches to the
    grid for matrix computations (cgf tables and classification).
    """

    variant: Literal["builtin"]
    name: str
    form: Literal["auto", "sampler", "grid"] = "auto"
    grid_points: int = Field(256, ge=8)

    @field_validator("name")
    @classmethod
    def _known(cls, v):
        name, params = parse_builtin(v)
        allowed = {"dyadic": {"c", "levels"}, "exp-mixture": {"alpha"}}
        if name not in allowed:
            raise ValueError(f"unknown built-in {name!r}; choose from {', '.join(BUILTINS)}")
        extra = set(params) - allowed[name]
        if extra:
            raise ValueError(f"unknown parameter(s) {sorted(extra)} for {name}")
        if name == "exp-mixture" and "alpha" not in params:
            raise ValueError("exp-mixture needs alpha=...")
        return v

    def build(self, matrix_form: bool = False) -> EnvKernel:
        name, params = parse_builtin(self.name)
        grid = self.form == "grid" or (self.form == "auto" and matrix_form)
        if name == "exp-mixture":
            alpha = params["alpha"]
            return env_mod.exp_mixture_grid(alpha, self.grid_points) if grid else env_mod.exp_mixture_sampler(alpha)
        c = params.get("c", 4.0)
        if grid:
            levels = int(params.get("levels", 40))
            return env_mod.dyadic_grid(c, levels, max(self.grid_points - levels, 8))
        return env_mod.dyadic_sampler(c)


KernelSpec = Annotated[
    Union[PointMassKernel, IIDDiscreteKernel, IIDContinuousKernel, FiniteKernel, BuiltinKernel],
    Field(discriminator="variant"),
]


class StateSpec(_Model):
    """A state of the chain: a finite-kernel ``label`` or a ``weight`` (with optional ``aux``)."""

    label: Optional[str] = None
    weight: Optional[float] = Field(None, gt=0)
    aux: Optional[str] = None

    @model_validator(mode="after")
    def _one_of(self):
        if (self.label is None) == (self.weight is None):
            raise ValueError("give exactly one of label, weight")
        return self

    def resolve(self, kernel: EnvKernel) -> EnvState:
        if isinstance(kernel, FiniteMatrixKernel):
            if self.label is not None:
                labels = [str(x) for x in kernel.aux]
                if self.label not in labels:
                    raise ConfigError(f"state label {self.label!r} is not one of {labels}")
                return kernel.state(labels.index(self.label))
            hits = np.flatnonzero(np.isclose(kernel.weights, self.weight, rtol=1e-12, atol=0))
            if hits.size == 0:
                raise ConfigError(f"no state of the finite kernel has weight {self.weight}")
            return kernel.state(int(hits[0]))
        if self.label is not None:
            raise ConfigError("state labels only apply to finite kernels")
        return EnvState(self.weight, self.aux)


# ---------------------------------------------------------------------------
# reinforcement and subcommand sections


class ReinforcementSpec(_Model):
    """Either ``delta`` (once-reinforced walk) or explicit ``L``, ``p`` and threshold rule.

    ``threshold`` is a number (constant thresholds) or ``"state"`` (read the
    per-state thresholds of a finite kernel, falling back to ``p``).
    """

    delta: Optional[float] = Field(None, gt=-1)
    L: Optional[float] = Field(None, gt=0)
    p: Optional[float] = Field(None, gt=0)
    threshold: Union[float, Literal["state"], None] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.delta is not None:
            if any(x is not None for x in (self.L, self.p, self.threshold)):
                raise ValueError("delta fixes L, p and the threshold; do not set them too")
        elif self.L is None or self.p is None:
            raise ValueError("set delta, or both L and p")
        if isinstance(self.threshold, float) and self.p is not None and self.threshold < self.p:
            raise ValueError(f"threshold {self.threshold} is below p = {self.p}")
        return self

    def params(self) -> ReinforcedParams:
        if self.delta is not None:
            return ReinforcedParams.once_reinforced(self.delta)
        thr = None if self.threshold in (None, "state") else float(self.threshold)
        return ReinforcedParams(self.L, self.p, thr)

    @property
    def constant_threshold(self) -> Optional[float]:
        prm = self.params()
        if isinstance(prm.threshold, float):
            return prm.threshold
        return None


class SimulateSpec(_Model):
    horizon: int = Field(10_000, ge=1)
    replicas: int = Field(1000, ge=1)
    root: Optional[StateSpec] = None


class Grid(_Model):
    start: float
    stop: float
    num: int = Field(ge=1)

    def values(self) -> list:
        return np.linspace(self.start, self.stop, self.num).tolist()


def grid_values(v: Union[Grid, List[float]]) -> list:
    return v.values() if isinstance(v, Grid) else [float(x) for x in v]


class RaySpec(_Model):
    n: List[int] = Field(default_factory=lambda: [10, 20, 40])
    replicas: int = Field(10_000, ge=1)
    method: Literal["auto", "plain", "tilted"] = "auto"
    eps: float = Field(1e-3, gt=0, lt=1)
    ell: Optional[int] = Field(None, ge=1)
    x_star: Optional[StateSpec] = None

    @field_validator("n")
    @classmethod
    def _positive(cls, v):
        if not v or min(v) < 1:
            raise ValueError("levels must be positive integers")
        return v


class LdpSpec(_Model):
    lambdas: Union[Grid, List[float]] = Field(default_factory=lambda: Grid(start=0.0, stop=1.0, num=11))
    k_pieces: int = Field(64, ge=1)
    n: int = Field(10_000, ge=1)
    replicas: int = Field(1000, ge=1)
    start: Optional[StateSpec] = None


Bound = Union[float, Literal["-inf", "inf"]]


def _bound(x) -> float:
    return float(x)


class ClassifySpec(_Model):
    """``windows`` are ``(C, R)`` pairs on the log-weight scale; ``C = "-inf"`` is allowed."""

    b: Optional[float] = Field(None, gt=1)
    criterion: Literal["auto", "iid", "markov", "reinforced", "constant-threshold"] = "auto"
    windows: Optional[List[Tuple[Bound, Bound]]] = None
    eta_grid: Optional[List[Tuple[float, Bound]]] = None
    tol: float = Field(1e-6, ge=0)
    minorization: Optional[Tuple[int, int, float]] = None
    green: bool = False
    green_n_max: int = Field(30, ge=1)
    green_replicas: int = Field(10_000, ge=1)
    eps: float = Field(1e-3, gt=0, lt=1)
    x_star: Optional[StateSpec] = None
    n_terms: int = Field(200, ge=1)

    @field_validator("windows")
    @classmethod
    def _windows(cls, v):
        for c, r in v or []:
            TruncationWindow(_bound(c), _bound(r))
        return v

    def truncation_windows(self) -> Optional[list]:
        if self.windows is None:
            return None
        return [TruncationWindow(_bound(c), _bound(r)) for c, r in self.windows]

    def eta_pairs(self) -> Optional[list]:
        if self.eta_grid is None:
            return None
        return [(float(e), _bound(r)) for e, r in self.eta_grid]


class Axis(_Model):
    """A swept parameter: dotted config path plus explicit values or a linear grid."""

    path: str
    values: Union[Grid, List[float]]

    def points(self) -> list:
        return grid_values(self.values)


class PhaseDiagramSpec(_Model):
    x: Axis
    y: Optional[Axis] = None


class OutputSpec(_Model):
    dir: str = "out"


class ExperimentConfig(_Model):
    seed: int = 0
    threads: int = Field(1, ge=1)
    tree: TreeSpec = Field(default_factory=lambda: TreeSpec(offspring=[(2, 1.0)]))
    kernel: KernelSpec
    root: Optional[StateSpec] = None
    reinforcement: Optional[ReinforcementSpec] = None
    simulate: SimulateSpec = Field(default_factory=SimulateSpec)
    ray: RaySpec = Field(default_factory=RaySpec)
    ldp: LdpSpec = Field(default_factory=LdpSpec)
    classify: ClassifySpec = Field(default_factory=ClassifySpec)
    phase_diagram: Optional[PhaseDiagramSpec] = None
    output: OutputSpec = Field(default_factory=OutputSpec)

    # -- builders ---------------------------------------------------------

    def law(self) -> OffspringLaw:
        return self.tree.law()

    def build_kernel(self, matrix_form: bool = False) -> EnvKernel:
        return self.kernel.build(matrix_form)

    def branching_number(self) -> float:
        return self.classify.b if self.classify.b is not None else self.law().mean

    def root_state(self, kernel: EnvKernel, section: Optional[StateSpec] = None) -> Optional[EnvState]:
        spec = section or self.root
        if spec is not None:
            return spec.resolve(kernel)
        if isinstance(kernel, FiniteMatrixKernel):
            return kernel.state(0)
        return None

    # -- identity -----------------------------------------------------------

    def echo(self) -> dict:
        """The config as plain data, without fields that must not affect results."""
        data = self.model_dump(mode="json")
        data.pop("threads", None)
        data.pop("output", None)
        return data

    def hash(self) -> str:
        """SHA-256 of the canonical echo with the seed removed."""
        data = self.echo()
        data.pop("seed", None)
        blob = json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=True)
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# loading


def _format_errors(err: ValidationError) -> str:
    lines = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"{path}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines)


def validate(data: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as err:
        raise ConfigError(_format_errors(err)) from None


def load(path: Union[str, Path]) -> ExperimentConfig:
    path = Path(path)
    try:
        with path.open("rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from None
    return validate(data)


def with_value(cfg: ExperimentConfig, path: str, value: Any) -> ExperimentConfig:
    """A copy of ``cfg`` with the dotted ``path`` set to ``value`` (revalidated)."""
    data = cfg.model_dump(mode="json")
    keys = path.split(".")
    node = data
    for k in keys[:-1]:
        if not isinstance(node, dict) or k not in node or node[k] is None:
            raise ConfigError(f"{path}: no such config field")
        node = node[k]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ConfigError(f"{path}: no such config field")
    node[keys[-1]] = value
    return validate(data)


def example_config(text: str) -> ExperimentConfig:
    """Config for a short example description.

    ``"iid a=1, b=2"``: point-mass weight ``a`` on a tree with ``b`` children.
    ``"exp-mixture alpha=0.5, b=2"`` and ``"dyadic c=4, b=2"``: built-in kernels.
    ``"once-reinforced delta=1, b=3"``: weights ``1/(1+delta)`` with the
    once-reinforced parameters.  ``b`` must be an integer here; use a config
    file for other offspring laws.
    """
    name, params = parse_builtin(text)
    b = params.pop("b", 2.0)
    if b != int(b) or b < 2:
        raise ConfigError(f"example b must be an integer >= 2, got {b}")
    data: dict = {"tree": {"offspring": [[int(b), 1.0]]}, "classify": {"b": b}}
    if name == "iid":
        data["kernel"] = {"variant": "point-mass", "a": params.pop("a", 1.0)}
    elif name in BUILTINS:
        args = " ".join(f"{k}={v!r}" for k, v in params.items())
        params = {}
        data["kernel"] = {"variant": "builtin", "name": f"{name} {args}".strip()}
    elif name == "once-reinforced":
        delta = params.pop("delta", 1.0)
        data["kernel"] = {"variant": "point-mass", "a": 1.0 / (1.0 + delta)}
        data["reinforcement"] = {"delta": delta}
    else:
        raise ConfigError(f"unknown example {name!r}")
    if params:
        raise ConfigError(f"unused example parameter(s): {sorted(params)}")
    return validate(data)

