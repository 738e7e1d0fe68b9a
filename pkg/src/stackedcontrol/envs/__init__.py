"""Benchmark environments packaged as :class:`~stackedcontrol.control.ControlProblem` objects."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .energy import (EnergyMultiModel, EnergyMultiProblem, EnergySingleModel, EnergySingleProblem,
                     energy_project, energy_reward, energy_step, generate_devices)
from .execution import (ExecutionModel, ExecutionProblem, canonical_execution_model, execution_price,
                        execution_relative_cost, execution_step)
from .lq import LQToy, default_lq, random_lq
from .markov import MarkovChain, frozen_chain, markov_step, persistent_chain

ENV_SCHEMA_VERSION = 1
KINDS = ("lq", "execution", "energy_single", "energy_multi")


def build_model(spec: dict):
    """Model object (or LQToy) from an environment definition dict.

    A definition with only ``kind`` (plus optional ``horizon`` and, for
    multi-device storage, ``n``/``seed``) yields the canonical instance.
    """
    kind = spec.get("kind")
    if kind not in KINDS:
        raise ValueError(f"environment kind must be one of {KINDS}, got {kind!r}")
    version = spec.get("schema_version", ENV_SCHEMA_VERSION)
    if version != ENV_SCHEMA_VERSION:
        raise ValueError(f"unsupported environment schema_version {version}")
    horizon = spec.get("horizon")
    if kind == "lq":
        if "F" not in spec:
            return default_lq(horizon or 5)
        return LQToy(spec["F"], spec["G"], spec["Q"], spec["R"], spec["Q_T"], spec["noise_cov"], spec["s0"],
                     spec["horizon"], spec.get("control_bound"))
    if kind == "execution":
        if "A" not in spec:
            return canonical_execution_model(horizon or 5, **{k: spec[k] for k in ("n", "m", "seed") if k in spec})
        return ExecutionModel.from_dict(spec)
    if kind == "energy_single":
        return EnergySingleModel.from_dict(spec)
    return EnergyMultiModel.from_dict(spec)


def make_problem(spec: dict, penalty: Optional[float] = None):
    """ControlProblem for a definition; ``penalty`` overrides every coefficient."""
    model = build_model(spec)
    if isinstance(model, LQToy):
        problem = model
    elif isinstance(model, ExecutionModel):
        problem = ExecutionProblem(model)
    elif isinstance(model, EnergySingleModel):
        problem = EnergySingleProblem(model, output_head=spec.get("output_head", "linear"))
    else:
        problem = EnergyMultiProblem(model, output_head=spec.get("output_head", "linear"))
    return problem.with_penalty(penalty)


def model_to_dict(model) -> dict:
    d = model.to_dict()
    d["schema_version"] = ENV_SCHEMA_VERSION
    return d


__all__ = [
    "EnergyMultiModel", "EnergyMultiProblem", "EnergySingleModel", "EnergySingleProblem", "ExecutionModel",
    "ExecutionProblem", "LQToy", "MarkovChain", "build_model", "canonical_execution_model", "default_lq",
    "energy_project", "energy_reward", "energy_step", "execution_price", "execution_relative_cost",
    "execution_step", "frozen_chain", "generate_devices", "make_problem", "markov_step", "model_to_dict",
    "persistent_chain", "random_lq",
]
