"""Run configuration: one YAML file with model/cluster/compute/overlap/search/paths sections."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import yaml

from .cluster import BandwidthProfile, ClusterConfig, ProfileError, cluster_problems, load_profile
from .cost import DEFAULT_SLOWDOWN, DEFAULT_UPDATE_BANDWIDTH, ComputeModel, EstimatorOptions, OverlapModel
from .model import MODEL_KEYS, PRESETS, ModelConfig, model_problems, preset as model_preset

SECTIONS = {
    "model": set(MODEL_KEYS) | {"preset"},
    "cluster": {"total_gpus", "gpus_per_node", "gpu_memory_capacity_bytes"},
    "compute": {"mode", "peak_flops", "efficiency", "table_csv", "head_table_csv"},
    "overlap": {"slowdown_ratio"},
    "search": {"top_k", "memory_slack", "oss_variant", "update_bandwidth"},
    "paths": {"bandwidth_csv"},
}
INT_KEYS = set(MODEL_KEYS) | {"total_gpus", "gpus_per_node", "top_k"}
FLOAT_KEYS = {"gpu_memory_capacity_bytes", "peak_flops", "efficiency", "slowdown_ratio",
              "memory_slack", "update_bandwidth"}


class ConfigError(ValueError):
    def __init__(self, problems):
        self.problems = list(problems) if not isinstance(problems, str) else [problems]
        super().__init__("\n".join(self.problems))


class ConfigParseError(ConfigError):
    pass


@dataclass
class RunConfig:
    model: ModelConfig
    cluster: ClusterConfig
    compute: ComputeModel = field(default_factory=ComputeModel)
    overlap: OverlapModel = field(default_factory=OverlapModel)
    options: EstimatorOptions = field(default_factory=EstimatorOptions)
    top_k: int = 10
    memory_slack: float = 1.0
    bandwidth_csv: str | None = None
    profile: BandwidthProfile | None = None


def _read_yaml(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigParseError(f"{path}: cannot read ({exc.strerror})") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        problem = getattr(exc, "problem", None) or str(exc)
        raise ConfigParseError(f"{path}: parse error at {where}: {problem}") from None
    if data is None:
        raise ConfigParseError(f"{path}: empty configuration")
    if not isinstance(data, dict):
        raise ConfigParseError(f"{path}: top level must be a mapping of sections")
    return data


def _coerce(key, value, problems):
    if key in INT_KEYS:
        if isinstance(value, bool):
            problems.append(f"{key}: must be an integer, got {value!r}")
            return value
        if isinstance(value, float) and value.is_integer():
            return int(value)
        if isinstance(value, str):
            try:
                f = float(value)
            except ValueError:
                problems.append(f"{key}: must be an integer, got {value!r}")
                return value
            if f.is_integer():
                return int(f)
        if not isinstance(value, int):
            problems.append(f"{key}: must be an integer, got {value!r}")
        return value
    if key in FLOAT_KEYS:
        try:
            return float(value)
        except (TypeError, ValueError):
            problems.append(f"{key}: must be a number, got {value!r}")
    return value


def _read_compute_table(path, problems) -> dict:
    table = {}
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    key = (int(row["b"]), int(row["seq_per_gpu"]), int(row["hidden_per_gpu"]))
                    table[key] = float(row["forward_seconds"])
                except (KeyError, TypeError, ValueError):
                    problems.append(f"{path}:{lineno}: expected b,seq_per_gpu,hidden_per_gpu,forward_seconds")
    except OSError as exc:
        problems.append(f"compute table {path}: {exc.strerror}")
    return table


def load_config(path=None, preset: str | None = None, overrides: dict | None = None,
                data: dict | None = None) -> RunConfig:
    """Parse, validate and assemble a :class:`RunConfig`.

    ``overrides`` maps ``"section.key"`` to a value and wins over the file.
    Every validation failure is collected and raised together.
    """
    if data is None:
        data = _read_yaml(path) if path is not None else {}
    base = os.path.dirname(os.path.abspath(path)) if path is not None else os.getcwd()
    problems = []
    sections = {}
    for name, body in data.items():
        if name not in SECTIONS:
            problems.append(f"unknown section {name!r}")
            continue
        if body is None:
            body = {}
        if not isinstance(body, dict):
            problems.append(f"{name}: must be a mapping")
            continue
        for key in body:
            if key not in SECTIONS[name]:
                problems.append(f"unknown key {name}.{key}")
        sections[name] = dict(body)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        name, key = dotted.split(".", 1)
        sections.setdefault(name, {})[key] = value
    if preset is not None:
        sections.setdefault("model", {})["preset"] = preset
    for name, body in sections.items():
        for key, value in list(body.items()):
            body[key] = _coerce(key, value, problems)
    if problems:
        raise ConfigError(problems)

    m = sections.get("model", {})
    preset_name = m.get("preset")
    model_fields = {}
    if preset_name is not None:
        if str(preset_name).lower() not in PRESETS:
            problems.append(f"model.preset: unknown preset {preset_name!r}; choose from {sorted(PRESETS)}")
        else:
            base_model = model_preset(str(preset_name))
            # preset defaults: 4k context, 4M-token global batch
            model_fields = base_model.to_dict()
    model_fields.update({k: v for k, v in m.items() if k != "preset"})
    model_fields.setdefault("bytes_per_element", 2)
    model = None
    missing = [k for k in MODEL_KEYS if k not in model_fields]
    if missing:
        problems.extend(f"model.{k}: missing" for k in missing)
    else:
        probe = type("Probe", (), model_fields)
        bad = model_problems(probe)
        if bad:
            problems.extend(f"model.{p}" for p in bad)
        else:
            model = ModelConfig(**{k: model_fields[k] for k in MODEL_KEYS})

    c = sections.get("cluster", {})
    cluster = None
    missing = [k for k in SECTIONS["cluster"] if k not in c]
    if missing:
        problems.extend(f"cluster.{k}: missing" for k in sorted(missing))
    else:
        probe = type("Probe", (), {"total_gpus": c["total_gpus"], "gpus_per_node": c["gpus_per_node"],
                                   "gpu_memory_capacity": c["gpu_memory_capacity_bytes"]})
        bad = cluster_problems(probe)
        if bad:
            problems.extend(f"cluster.{p}" for p in bad)
        else:
            cluster = ClusterConfig(c["total_gpus"], c["gpus_per_node"], c["gpu_memory_capacity_bytes"])

    comp = dict(sections.get("compute", {}))
    compute = None
    table = head = {}
    if "table_csv" in comp:
        table = _read_compute_table(os.path.join(base, comp.pop("table_csv")), problems)
    if "head_table_csv" in comp:
        head = _read_compute_table(os.path.join(base, comp.pop("head_table_csv")), problems)
    try:
        compute = ComputeModel(table=table, head_table=head, **comp)
        if compute.mode == "profiled" and not compute.table:
            problems.append("compute.table_csv: required when mode is profiled")
    except (TypeError, ValueError) as exc:
        problems.append(f"compute: {exc}")

    overlap = None
    try:
        overlap = OverlapModel(sections.get("overlap", {}).get("slowdown_ratio", DEFAULT_SLOWDOWN))
    except ValueError as exc:
        problems.append(f"overlap.slowdown_ratio: {exc}")

    srch = sections.get("search", {})
    options = None
    try:
        options = EstimatorOptions(srch.get("update_bandwidth", DEFAULT_UPDATE_BANDWIDTH),
                                   srch.get("oss_variant", "printed"))
    except ValueError as exc:
        problems.append(f"search: {exc}")
    top_k = srch.get("top_k", 10)
    if isinstance(top_k, int) and top_k < 1:
        problems.append("search.top_k: must be >= 1")
    slack = srch.get("memory_slack", 1.0)
    if isinstance(slack, float) and slack <= 0:
        problems.append("search.memory_slack: must be positive")

    profile = None
    csv_path = sections.get("paths", {}).get("bandwidth_csv")
    if csv_path is not None:
        csv_path = os.path.join(base, str(csv_path))
        if not os.path.exists(csv_path):
            problems.append(f"paths.bandwidth_csv: {csv_path} does not exist")
        else:
            try:
                profile = load_profile(csv_path)
            except ProfileError as exc:
                problems.append(f"paths.bandwidth_csv: {exc}")

    if problems:
        raise ConfigError(problems)
    return RunConfig(model, cluster, compute, overlap, options, top_k, slack, csv_path, profile)
