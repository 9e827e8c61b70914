"""YAML run configuration.

Grammar (all blocks optional unless the subcommand needs them)::

    design: symmetric            # or autism, or a mapping:
    #   dtrs: ["1,1", "1,-1", "-1,."]
    #   p_a1: 0.5
    #   p_a2_given: {"1,0": 0.5}   # keys "a1,r"
    model:
      preset: symmetric-eq5.2    # or autism-eq3.2; or give terms/knot
                                 # (default: the preset matching the design)
      terms: [1, t_pre, ...]     # optional when a preset is used
      knot: 2
      covariates: [L]
      random_effects: intercept-and-slope   # or intercept-only
    estimator: lmm               # lmm | gee-unstructured | gee-exchangeable
                                 # | gee-independence | gee-ar1
    data:
      path: data.csv             # relative to the config file
      center_covariates: true
      columns: {id: id, time: time, y: y, a1: a1, r: r, a2: a2}
    contrasts:
      pairs: [["1,1", "-1,."]]   # empty or absent: every pair
      times: [0, 12, 24, 36]
      omnibus_auc: [0, 36]
    level: 0.95
    simulation:
      preset: simulation2        # simulation1-d0.2 | simulation1-d0.8 | simulation2
      generative: {...}          # or an explicit GenerativeConfig mapping
      sizes: [1000]
      replicates: 1000
      seed: 0
      dropout: false             # true for the default rule, or a mapping
      estimators: [lmm-si, gee-unstructured, lmm-int, gee-exchangeable, gee-independence]
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import yaml

from .design import DtrIndex, SmartDesign, autism_design, symmetric_design
from .errors import SchemaError, ValidationError
from .model import MEAN_PRESETS, INTERCEPT_AND_SLOPE, MeanModel, RandomEffectsSpec
from .simulator import (
    DEFAULT_ESTIMATORS,
    DropoutRule,
    GenerativeConfig,
    simulation1_config,
    simulation2_config,
)

ESTIMATOR_CHOICES = ("lmm", "gee-unstructured", "gee-exchangeable", "gee-independence", "gee-ar1")
SIM_PRESETS = {
    "simulation1-d0.2": lambda: simulation1_config(0.2),
    "simulation1-d0.8": lambda: simulation1_config(0.8),
    "simulation2": simulation2_config,
}


@dataclass
class SimulationBlock:
    generative: GenerativeConfig
    sizes: Tuple[int, ...] = (1000,)
    replicates: int = 1000
    seed: int = 0
    dropout: Optional[DropoutRule] = None
    estimators: Tuple[str, ...] = DEFAULT_ESTIMATORS


@dataclass
class RunConfig:
    design: SmartDesign
    model: MeanModel
    re_spec: RandomEffectsSpec = INTERCEPT_AND_SLOPE
    estimator: str = "lmm"
    data_path: Optional[Path] = None
    center_covariates: bool = True
    columns: dict = field(default_factory=dict)
    pairs: List[Tuple[DtrIndex, DtrIndex]] = field(default_factory=list)
    times: Tuple[float, ...] = ()
    omnibus_auc: Optional[Tuple[float, float]] = None
    level: float = 0.95
    simulation: Optional[SimulationBlock] = None


def _design(block) -> SmartDesign:
    if block is None or block == "symmetric":
        return symmetric_design()
    if block == "autism":
        return autism_design()
    if not isinstance(block, dict):
        raise SchemaError(f"design must be 'symmetric', 'autism' or a mapping, got {block!r}")
    try:
        dtrs = [DtrIndex.parse(str(d)) for d in block["dtrs"]]
        p_a1 = float(block.get("p_a1", 0.5))
        cells = {}
        for key, p in (block.get("p_a2_given") or {}).items():
            a1, r = (int(v) for v in str(key).split(","))
            cells[(a1, r)] = float(p)
    except (KeyError, ValueError) as exc:
        raise SchemaError(f"malformed design block: {exc}") from None
    return SmartDesign(tuple(dtrs), p_a1, cells, name=str(block.get("name", "custom")))


def _model(block, design: SmartDesign) -> Tuple[MeanModel, RandomEffectsSpec]:
    block = dict(block or {})
    re_spec = RandomEffectsSpec(str(block.get("random_effects", "intercept-and-slope")))
    preset = block.get("preset")
    if preset is None and "terms" not in block and design.name in ("symmetric", "autism"):
        preset = "autism-eq3.2" if design.name == "autism" else "symmetric-eq5.2"
    if preset is not None:
        if preset not in MEAN_PRESETS:
            raise SchemaError(f"unknown model preset {preset!r}; choose from {sorted(MEAN_PRESETS)}")
        kwargs = {}
        if "knot" in block:
            kwargs["knot"] = float(block["knot"])
        if "covariates" in block:
            kwargs["covariates"] = tuple(block["covariates"] or ())
        return MEAN_PRESETS[preset](**kwargs), re_spec
    if "terms" not in block or "knot" not in block:
        raise SchemaError("model block needs a preset or both terms and knot")
    terms = tuple(str(t) for t in block["terms"])
    return MeanModel(terms, float(block["knot"]), tuple(block.get("covariates") or ())), re_spec


def _dropout(value) -> Optional[DropoutRule]:
    if value in (None, False):
        return None
    if value is True:
        return DropoutRule()
    if isinstance(value, dict):
        return DropoutRule(**{k: float(v) for k, v in value.items()})
    raise SchemaError(f"dropout must be a boolean or a mapping, got {value!r}")


def _simulation(block) -> Optional[SimulationBlock]:
    if block is None:
        return None
    if "generative" in block:
        gen = GenerativeConfig.from_dict(block["generative"])
    else:
        preset = block.get("preset", "simulation2")
        if preset not in SIM_PRESETS:
            raise SchemaError(f"unknown simulation preset {preset!r}; choose from {sorted(SIM_PRESETS)}")
        gen = SIM_PRESETS[preset]()
    return SimulationBlock(
        generative=gen,
        sizes=tuple(int(n) for n in block.get("sizes", (1000,))),
        replicates=int(block.get("replicates", 1000)),
        seed=int(block.get("seed", 0)),
        dropout=_dropout(block.get("dropout")),
        estimators=tuple(block.get("estimators", DEFAULT_ESTIMATORS)),
    )


def parse_config(doc: dict, base_dir: Path = Path(".")) -> RunConfig:
    if not isinstance(doc, dict):
        raise SchemaError("configuration must be a mapping")
    design = _design(doc.get("design"))
    model, re_spec = _model(doc.get("model"), design)
    estimator = str(doc.get("estimator", "lmm"))
    if estimator not in ESTIMATOR_CHOICES:
        raise SchemaError(f"unknown estimator {estimator!r}; choose from {ESTIMATOR_CHOICES}")
    data = doc.get("data") or {}
    contrasts = doc.get("contrasts") or {}
    pairs = [(DtrIndex.parse(str(a)), DtrIndex.parse(str(b))) for a, b in contrasts.get("pairs") or []]
    auc = contrasts.get("omnibus_auc")
    level = float(doc.get("level", 0.95))
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must lie in (0, 1), got {level}")
    return RunConfig(
        design=design,
        model=model,
        re_spec=re_spec,
        estimator=estimator,
        data_path=(base_dir / data["path"]) if "path" in data else None,
        center_covariates=bool(data.get("center_covariates", True)),
        columns=dict(data.get("columns") or {}),
        pairs=pairs,
        times=tuple(float(t) for t in contrasts.get("times") or ()),
        omnibus_auc=(float(auc[0]), float(auc[1])) if auc else None,
        level=level,
        simulation=_simulation(doc.get("simulation")),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as exc:
        raise SchemaError(f"config file {path} is not valid YAML: {exc}") from None
    return parse_config(doc, path.parent)
