"""Checkpoints, value tables, run configs and CSV tables.

Checkpoint layout (``.npz``, format version 1)::

    format_version                      int64 scalar
    meta                                JSON string: horizon, widths, head,
                                        use_batchnorm, skip_first_bn
    policy/input_shift, input_scale, action_scale, action_offset
    t{t}/dense{k}/W, t{t}/dense{k}/b
    t{t}/bn{k}/gamma, beta, moving_mean, moving_var
    t{t}/bn{k}/hyper                    [epsilon, momentum]

Every array is stored as float64, so a load reproduces the policy bit for bit.
"""
from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from .baselines.energy_dp import TABLE_FORMAT_VERSION, ValueTable
from .control import StackedPolicy, TrainingConfig
from .nets import BatchNormLayer, DenseLayer, Subnetwork

CHECKPOINT_VERSION = 1
CONFIG_SCHEMA_VERSION = 1


def save_checkpoint(policy: StackedPolicy, path) -> None:
    arrays: Dict[str, np.ndarray] = {
        "format_version": np.array(CHECKPOINT_VERSION),
        "meta": np.array(json.dumps({
            "horizon": policy.horizon,
            "widths": policy.subnets[0].widths,
            "output_head": policy.subnets[0].output_head,
            "use_batchnorm": policy.use_batchnorm,
            "skip_first_bn": policy.skip_first_bn,
        })),
        "policy/input_shift": policy.input_shift,
        "policy/input_scale": policy.input_scale,
        "policy/action_scale": policy.action_scale,
        "policy/action_offset": policy.action_offset,
    }
    for t, net in enumerate(policy.subnets):
        for k, layer in enumerate(net.dense):
            arrays[f"t{t}/dense{k}/W"] = layer.W
            arrays[f"t{t}/dense{k}/b"] = layer.b
        for k, bn in enumerate(net.bn):
            for name in ("gamma", "beta", "moving_mean", "moving_var"):
                arrays[f"t{t}/bn{k}/{name}"] = getattr(bn, name)
            arrays[f"t{t}/bn{k}/hyper"] = np.array([bn.epsilon, bn.momentum])
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> StackedPolicy:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        meta = json.loads(str(data["meta"]))
        subnets = []
        for t in range(meta["horizon"]):
            n_dense = len(meta["widths"]) + 1
            dense = [DenseLayer(data[f"t{t}/dense{k}/W"].copy(), data[f"t{t}/dense{k}/b"].copy())
                     for k in range(n_dense)]
            bn = []
            for k in range(n_dense - 1):
                eps, mom = data[f"t{t}/bn{k}/hyper"]
                bn.append(BatchNormLayer(*(data[f"t{t}/bn{k}/{n}"].copy()
                                           for n in ("gamma", "beta", "moving_mean", "moving_var")),
                                         float(eps), float(mom)))
            subnets.append(Subnetwork(dense, bn, meta["output_head"]))
        return StackedPolicy(subnets, meta["use_batchnorm"], meta["skip_first_bn"],
                             data["policy/input_shift"].copy(), data["policy/input_scale"].copy(),
                             data["policy/action_scale"].copy(), data["policy/action_offset"].copy())


def save_value_table(table: ValueTable, path) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, format_version=np.array(TABLE_FORMAT_VERSION), r_grid=table.r_grid,
                 wind_levels=table.wind_levels, price_levels=table.price_levels,
                 demand_levels=table.demand_levels, values=table.values, charge=table.charge,
                 discharge=table.discharge)


def load_value_table(path) -> ValueTable:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["format_version"])
        if version != TABLE_FORMAT_VERSION:
            raise ValueError(f"unsupported value table format version {version}")
        return ValueTable(*(data[k].copy() for k in ("r_grid", "wind_levels", "price_levels", "demand_levels",
                                                     "values", "charge", "discharge")))


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending field."""


@dataclass
class RunConfig:
    environment: dict
    training: TrainingConfig
    seeds: List[int] = field(default_factory=lambda: [0])
    eval_samples: int = 100_000
    out: str = "runs"
    source: Optional[str] = None

    def to_dict(self) -> dict:
        t = self.training.to_dict()
        t.pop("seed")
        return {"schema_version": CONFIG_SCHEMA_VERSION, "environment": self.environment, "training": t,
                "seeds": list(self.seeds), "eval_samples": self.eval_samples, "out": self.out}


def _field(d, key, kind, where):
    if key not in d:
        raise ConfigError(f"{where}.{key}: missing")
    value = d[key]
    if not isinstance(value, kind):
        raise ConfigError(f"{where}.{key}: expected {kind}, got {type(value).__name__}")
    return value


def parse_config(raw: dict, base_dir: Optional[Path] = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config: top level must be an object")
    version = raw.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"schema_version: unsupported value {version}")
    env = dict(_field(raw, "environment", dict, "config"))
    if "file" in env:
        path = Path(env.pop("file"))
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"environment.file: no such file {str(path)!r}")
        with open(path) as fh:
            loaded = json.load(fh)
        loaded.update(env)
        env = loaded
    if "kind" not in env:
        raise ConfigError("environment.kind: missing")
    training = dict(raw.get("training", {}))
    allowed = set(TrainingConfig.__dataclass_fields__) - {"seed"}
    unknown = set(training) - allowed
    if unknown:
        raise ConfigError(f"training.{sorted(unknown)[0]}: unknown field")
    seeds = raw.get("seeds", [0])
    if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        raise ConfigError("seeds: expected a nonempty list of nonnegative integers")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds: values must be distinct")
    try:
        tc = TrainingConfig(seed=seeds[0], **training)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"training: {exc}") from None
    eval_samples = raw.get("eval_samples", 100_000)
    if not isinstance(eval_samples, int) or eval_samples < 2:
        raise ConfigError("eval_samples: expected an integer >= 2")
    return RunConfig(env, tc, seeds, eval_samples, str(raw.get("out", "runs")))


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config: no such file {str(path)!r}")
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: invalid JSON ({exc})") from None
    cfg = parse_config(raw, path.parent)
    cfg.source = str(path)
    return cfg


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in columns])


def read_csv(path) -> List[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
