"""Experiment config documents (YAML or JSON) and their validation."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .dgp import Experiment, build_dgp
from .errors import ContractViolation
from .missing_data import MissingDataSpec, build_observational_model, build_selection
from .model import BLOCK_FAMILIES, MomentModel, build_block
from .probability import DiscreteLaw

TASKS = ("bound", "score", "oracle", "missing", "estimate", "mc")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class DGPRef(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class LawRef(_Strict):
    file: Optional[str] = None
    inline: Optional[list[list[float]]] = None
    names: Optional[list[str]] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.file is None) == (self.inline is None):
            raise ValueError("law needs exactly one of 'file' or 'inline'")
        return self


class BlockConfig(BaseModel):
    model_config = ConfigDict(extra="allow")
    family: str


class ModelConfig(_Strict):
    blocks: list[BlockConfig] = Field(min_length=1)
    param_dim: int = Field(ge=1)
    theta0: list[float]
    jacobian_mode: Literal["analytic", "fd"] = "analytic"


class SelectionConfig(BaseModel):
    model_config = ConfigDict(extra="allow")
    family: str


class MissingConfig(_Strict):
    variant: Literal["missing-response", "missing-regressor"]
    rho: BlockConfig
    selection: SelectionConfig
    alpha0: list[float]
    delta: int = Field(ge=0)
    parametric: bool = False


class Params(_Strict):
    k_max: Optional[int] = Field(default=None, ge=1)
    tol: float = Field(default=1e-10, gt=0)
    stop_tol: float = Field(default=1e-10, gt=0)
    early_stop: bool = False
    max_iter: int = Field(default=500, ge=1)
    n: int = Field(default=2000, ge=1)
    R: int = Field(default=500, ge=2)
    seed: int = Field(default=0, ge=0)
    m_star: int = Field(default=25, ge=1)
    method: Literal["backfit", "oracle", "sequential", "chamberlain"] = "backfit"
    family: str = "indicator-cells"
    family_params: dict[str, Any] = Field(default_factory=dict)
    theta_init: Optional[list[float]] = None
    workers: int = Field(default=1, ge=1)


class OutputConfig(_Strict):
    path: Optional[str] = None
    format: Literal["json", "csv"] = "json"


class ExperimentConfig(_Strict):
    task: Literal["bound", "score", "oracle", "missing", "estimate", "mc"]
    dgp: Optional[DGPRef] = None
    law: Optional[LawRef] = None
    model: Optional[ModelConfig] = None
    missing: Optional[MissingConfig] = None
    params: Params = Field(default_factory=Params)
    output: OutputConfig = Field(default_factory=OutputConfig)

    @model_validator(mode="after")
    def _sources(self):
        if self.dgp is None and self.law is None:
            raise ValueError("config needs a 'dgp' or a 'law'")
        if self.dgp is not None and self.law is not None:
            raise ValueError("give either 'dgp' or 'law', not both")
        if self.law is not None and self.model is None and self.missing is None:
            raise ValueError("a 'law' needs a 'model' or a 'missing' section")
        if self.model is not None and self.missing is not None:
            raise ValueError("give either 'model' or 'missing', not both")
        return self


def load_config(path: str | Path) -> ExperimentConfig:
    """Parse YAML (a superset of JSON) and validate."""
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ContractViolation("config must be a mapping at the top level")
    return ExperimentConfig.model_validate(data)


def _extras(cfg: BaseModel) -> dict:
    return dict(cfg.model_extra or {})


def _block(cfg: BlockConfig, where: str):
    if cfg.family not in BLOCK_FAMILIES:
        raise ContractViolation(f"{where}.family: unknown block family {cfg.family!r}; known: {sorted(BLOCK_FAMILIES)}")
    try:
        return build_block(cfg.family, **_extras(cfg))
    except TypeError as exc:
        raise ContractViolation(f"{where}: {exc}") from exc


def build_experiment(cfg: ExperimentConfig, base_dir: str | Path = ".") -> Experiment:
    """Law, model and (for missing data) the spec described by ``cfg``."""
    if cfg.dgp is not None:
        try:
            base = build_dgp(cfg.dgp.name, **cfg.dgp.params)
        except TypeError as exc:
            raise ContractViolation(f"dgp.params: {exc}") from exc
        law, model, spec, name = base.law, base.model, base.spec, base.name
    else:
        if cfg.law.file is not None:
            p = Path(cfg.law.file)
            law = DiscreteLaw.load(p if p.is_absolute() else Path(base_dir) / p)
        else:
            arr = np.asarray(cfg.law.inline, dtype=float)
            if arr.ndim != 2 or arr.shape[1] < 2:
                raise ContractViolation("law.inline must be rows of (coordinates..., probability)")
            law = DiscreteLaw(arr[:, :-1], arr[:, -1], tuple(cfg.law.names) if cfg.law.names else None)
        model = spec = None
        name = "custom"
    if cfg.model is not None:
        blocks = tuple(_block(b, f"model.blocks[{i}]") for i, b in enumerate(cfg.model.blocks))
        model = MomentModel(blocks, cfg.model.param_dim, law.dim, np.asarray(cfg.model.theta0),
                            cfg.model.jacobian_mode, law, name)
        spec = None
    if cfg.missing is not None:
        m = cfg.missing
        rho = _block(m.rho, "missing.rho")
        sel_extra = _extras(m.selection)
        try:
            sel = build_selection(m.selection.family, **sel_extra)
        except TypeError as exc:
            raise ContractViolation(f"missing.selection: {exc}") from exc
        spec = MissingDataSpec(m.variant, rho, sel, np.asarray(m.alpha0), m.delta, law.dim)
        model = build_observational_model(spec, law, m.parametric)
    if cfg.task == "missing" and spec is None:
        raise ContractViolation("task 'missing' needs a missing-data design (DGP-C or a 'missing' section)")
    params = dict(cfg.dgp.params) if cfg.dgp is not None else {}
    return Experiment(name, law, model, spec, params)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return json.loads(cfg.model_dump_json(exclude_none=True))
