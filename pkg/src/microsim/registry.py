"""File-based registration of APIs, services, instances, VMs and scenario knobs.

Four documents describe a run:

* ``application.json`` -- APIs and the service call graph
* ``instances.yaml``   -- one pod/container manifest per replica set (multi-doc)
* ``cluster.json``     -- the VMs
* ``scenario.toml``    -- flat key/value simulation parameters

Every loader raises a :class:`ConfigError` subclass carrying the JSON-style
path of the offending field; nothing here raises bare ``KeyError``/``TypeError``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import (
    Api,
    Deployment,
    InstanceKind,
    InstanceSpec,
    ModelError,
    ReplicaSet,
    Service,
    ServiceGraph,
    Vm,
    build_graph,
)


class ConfigError(Exception):
    def __init__(self, path: str, message: str, source: str | None = None):
        self.path = path
        self.message = message
        self.source = source
        super().__init__(self._render())

    def _render(self) -> str:
        where = f"{self.source}: " if self.source else ""
        return f"{where}{self.path}: {self.message}"

    def with_source(self, source: str) -> ConfigError:
        self.source = source
        self.args = (self._render(),)
        return self


class SchemaError(ConfigError):
    pass


class ValidationError(ConfigError):
    pass


# -- scenario configuration -------------------------------------------------


@dataclass
class GeneratorConfig:
    num_clients: int = 100
    spawn_rate: float = 10.0
    wait_min: float = 5.0
    wait_max: float = 15.0
    time_limit: float = 600.0
    num_limit: float = math.inf
    # "stationary": a new client's first request lands at a random phase of
    # its wait cycle; "immediate": it fires on its first tick
    initial_phase: str = "stationary"


@dataclass
class CloudletConfig:
    mean_length: float = 1000.0
    std_dev: float = 0.0
    overrides: dict[str, tuple[float, float]] = field(default_factory=dict)


@dataclass
class ScalingConfig:
    policy: str = "none"
    check_interval: float = 10.0
    upper_threshold: float = 0.8
    lower_threshold: float = 0.2
    consecutive_breaches: int = 3
    vs_factor: float = 2.0


@dataclass
class MigrationConfig:
    vm_overload_threshold: float | None = None


@dataclass
class SchedulerConfig:
    lb_policy: str = "MaxIdle"
    queue_order: str = "fifo"
    max_concurrency: int | None = None
    starvation_timeout: float = 60.0
    retain_finished: bool = True


@dataclass
class UsageConfig:
    cpu_per_cloudlet: float | None = None
    parallelism: float = 1.0
    idle_cpu_floor: float = 0.0
    # idle use as a fraction of requested shares (runtime overhead that
    # grows with the allocation)
    idle_cpu_fraction: float = 0.0
    ram_per_cloudlet: float = 0.0
    idle_ram_floor: float = 0.0
    bw_per_derivation: float = 0.0
    gate_bandwidth: bool = False


@dataclass
class ScenarioConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    cloudlet: CloudletConfig = field(default_factory=CloudletConfig)
    scaling: ScalingConfig = field(default_factory=ScalingConfig)
    migration: MigrationConfig = field(default_factory=MigrationConfig)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    usage: UsageConfig = field(default_factory=UsageConfig)
    slo_threshold_ms: float = 3000.0
    seed: int = 0
    metrics_sample_interval: float = 1.0
    include_wait_in_delay: bool = True
    end_time: float | None = None
    max_paths: int = 10_000

    def validate(self) -> ScenarioConfig:
        g = self.generator
        if not (isinstance(g.num_clients, int) and g.num_clients > 0):
            raise ValidationError("num_clients", "must be a positive integer")
        if not g.spawn_rate > 0:
            raise ValidationError("spawn_rate", "must be positive")
        if not 0 < g.wait_min <= g.wait_max:
            raise ValidationError("wait_interval", f"need 0 < p0 <= p1, got [{g.wait_min}, {g.wait_max}]")
        if math.isinf(g.time_limit) and math.isinf(g.num_limit):
            raise ValidationError("time_limit", "time_limit and num_limit cannot both be unbounded")
        if g.time_limit < 0 or g.num_limit <= 0:
            raise ValidationError("num_limit", "limits must be positive")
        if g.initial_phase not in ("stationary", "immediate"):
            raise ValidationError("initial_phase", "must be 'stationary' or 'immediate'")
        c = self.cloudlet
        for name, (mean, std) in [("*", (c.mean_length, c.std_dev)), *c.overrides.items()]:
            if not mean > 0 or std < 0:
                raise ValidationError(
                    f"cloudlet_overrides.{name}" if name != "*" else "cloudlet_mean_length",
                    "need mean > 0 and std >= 0",
                )
        s = self.scaling
        if not 0 < s.upper_threshold <= 1:
            raise ValidationError("upper_threshold", "must be in (0, 1]")
        if not 0 <= s.lower_threshold < s.upper_threshold:
            raise ValidationError("lower_threshold", "must be in [0, upper_threshold)")
        if not s.vs_factor > 0:
            raise ValidationError("vs_factor", "must be positive")
        if s.consecutive_breaches < 1:
            raise ValidationError("consecutive_breaches", "must be >= 1")
        if not s.check_interval > 0:
            raise ValidationError("check_interval", "must be positive")
        u = self.usage
        if not u.parallelism > 0:
            raise ValidationError("parallelism", "must be positive")
        for key in ("idle_cpu_floor", "idle_cpu_fraction", "ram_per_cloudlet", "idle_ram_floor", "bw_per_derivation"):
            if getattr(u, key) < 0:
                raise ValidationError(key, "must be >= 0")
        if u.cpu_per_cloudlet is not None and u.cpu_per_cloudlet < 0:
            raise ValidationError("cpu_per_cloudlet", "must be >= 0")
        if self.metrics_sample_interval < 0:
            raise ValidationError("metrics_sample_interval", "must be >= 0")
        if self.scheduler.max_concurrency is not None and self.scheduler.max_concurrency < 1:
            raise ValidationError("max_concurrency", "must be >= 1")
        return self


# flat TOML key -> (section attribute or None, field name)
_SCENARIO_KEYS: dict[str, tuple[str | None, str]] = {
    "num_clients": ("generator", "num_clients"),
    "spawn_rate": ("generator", "spawn_rate"),
    "time_limit": ("generator", "time_limit"),
    "num_limit": ("generator", "num_limit"),
    "initial_phase": ("generator", "initial_phase"),
    "cloudlet_mean_length": ("cloudlet", "mean_length"),
    "cloudlet_std_dev": ("cloudlet", "std_dev"),
    "scaling_policy": ("scaling", "policy"),
    "check_interval": ("scaling", "check_interval"),
    "upper_threshold": ("scaling", "upper_threshold"),
    "lower_threshold": ("scaling", "lower_threshold"),
    "consecutive_breaches": ("scaling", "consecutive_breaches"),
    "vs_factor": ("scaling", "vs_factor"),
    "vm_overload_threshold": ("migration", "vm_overload_threshold"),
    "lb_policy": ("scheduler", "lb_policy"),
    "queue_order": ("scheduler", "queue_order"),
    "max_concurrency": ("scheduler", "max_concurrency"),
    "starvation_timeout": ("scheduler", "starvation_timeout"),
    "retain_finished": ("scheduler", "retain_finished"),
    "cpu_per_cloudlet": ("usage", "cpu_per_cloudlet"),
    "parallelism": ("usage", "parallelism"),
    "idle_cpu_floor": ("usage", "idle_cpu_floor"),
    "idle_cpu_fraction": ("usage", "idle_cpu_fraction"),
    "ram_per_cloudlet": ("usage", "ram_per_cloudlet"),
    "idle_ram_floor": ("usage", "idle_ram_floor"),
    "bw_per_derivation": ("usage", "bw_per_derivation"),
    "gate_bandwidth": ("usage", "gate_bandwidth"),
    "slo_threshold_ms": (None, "slo_threshold_ms"),
    "seed": (None, "seed"),
    "metrics_sample_interval": (None, "metrics_sample_interval"),
    "include_wait_in_delay": (None, "include_wait_in_delay"),
    "end_time": (None, "end_time"),
    "max_paths": (None, "max_paths"),
}

_INT_KEYS = {"num_clients", "consecutive_breaches", "max_concurrency", "seed", "max_paths"}
_BOOL_KEYS = {"retain_finished", "include_wait_in_delay", "gate_bandwidth"}
_STR_KEYS = {"initial_phase", "scaling_policy", "lb_policy", "queue_order"}


def _coerce(key: str, value: Any) -> Any:
    if key in _BOOL_KEYS:
        if not isinstance(value, bool):
            raise SchemaError(key, f"expected boolean, got {type(value).__name__}")
        return value
    if key in _STR_KEYS:
        if not isinstance(value, str):
            raise SchemaError(key, f"expected string, got {type(value).__name__}")
        return value
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SchemaError(key, f"expected number, got {type(value).__name__}")
    if key in _INT_KEYS:
        if isinstance(value, float) and not value.is_integer():
            raise SchemaError(key, "expected integer")
        return int(value)
    return float(value)


def scenario_from_mapping(doc: dict[str, Any]) -> ScenarioConfig:
    cfg = ScenarioConfig()
    for key, value in doc.items():
        if key == "wait_interval":
            if (not isinstance(value, list) or len(value) != 2
                    or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)):
                raise SchemaError("wait_interval", "expected [p0, p1]")
            cfg.generator.wait_min, cfg.generator.wait_max = float(value[0]), float(value[1])
            continue
        if key == "cloudlet_overrides":
            if not isinstance(value, dict):
                raise SchemaError(key, "expected table of service = [mean, std]")
            for svc, pair in value.items():
                if (not isinstance(pair, list) or len(pair) != 2
                        or not all(isinstance(v, (int, float)) for v in pair)):
                    raise SchemaError(f"{key}.{svc}", "expected [mean, std]")
                cfg.cloudlet.overrides[svc] = (float(pair[0]), float(pair[1]))
            continue
        if key not in _SCENARIO_KEYS:
            raise SchemaError(key, "unknown scenario key")
        section, attr = _SCENARIO_KEYS[key]
        target = getattr(cfg, section) if section else cfg
        setattr(target, attr, _coerce(key, value))
    return cfg.validate()


def load_scenario(text: str) -> ScenarioConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise SchemaError("$", f"invalid TOML: {exc}") from None
    return scenario_from_mapping(doc)


def _toml_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def dump_scenario(cfg: ScenarioConfig) -> str:
    lines = []
    g = cfg.generator
    lines.append(f"wait_interval = [{g.wait_min!r}, {g.wait_max!r}]")
    for key, (section, attr) in _SCENARIO_KEYS.items():
        target = getattr(cfg, section) if section else cfg
        value = getattr(target, attr)
        if value is None:
            continue
        lines.append(f"{key} = {_toml_value(value)}")
    if cfg.cloudlet.overrides:
        body = ", ".join(
            f"{json.dumps(k)} = [{m!r}, {s!r}]" for k, (m, s) in cfg.cloudlet.overrides.items()
        )
        lines.append(f"cloudlet_overrides = {{ {body} }}")
    return "\n".join(lines) + "\n"


# -- application (APIs + services) -------------------------------------------


def _expect(obj: Any, typ: type | tuple, path: str) -> Any:
    # bool is an int subclass; never accept it where a number is expected
    if isinstance(obj, bool) or not isinstance(obj, typ):
        raise SchemaError(path, f"expected {_typename(typ)}, got {type(obj).__name__}")
    return obj


def _typename(typ: type | tuple) -> str:
    if isinstance(typ, tuple):
        return " or ".join(t.__name__ for t in typ)
    return typ.__name__


def _field(obj: dict, key: str, typ: type | tuple, path: str, default: Any = ...) -> Any:
    if key not in obj:
        if default is ...:
            raise SchemaError(f"{path}.{key}", "missing required field")
        return default
    return _expect(obj[key], typ, f"{path}.{key}")


def load_application(json_doc: str, max_paths: int = 10_000) -> tuple[list[Api], list[Service]]:
    try:
        doc = json.loads(json_doc)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    _expect(doc, dict, "$")

    services: list[Service] = []
    for i, raw in enumerate(_field(doc, "services", list, "$")):
        path = f"$.services[{i}]"
        _expect(raw, dict, path)
        name = _field(raw, "name", str, path)
        labels = _field(raw, "labels", list, path, default=[])
        calls = _field(raw, "calls", list, path, default=[])
        for j, lab in enumerate(labels):
            _expect(lab, str, f"{path}.labels[{j}]")
        for j, callee in enumerate(calls):
            _expect(callee, str, f"{path}.calls[{j}]")
        services.append(Service(name, frozenset(labels), tuple(calls)))

    apis: list[Api] = []
    for i, raw in enumerate(_field(doc, "apis", list, "$")):
        path = f"$.apis[{i}]"
        _expect(raw, dict, path)
        name = _field(raw, "name", str, path)
        entry = _field(raw, "entry", str, path)
        weight = float(_field(raw, "weight", (int, float), path, default=1.0))
        if not weight > 0:
            raise ValidationError(f"{path}.weight", "must be positive")
        apis.append(Api(name, entry, weight))
    if not apis:
        raise ValidationError("$.apis", "at least one API is required")

    # resolves names and checks acyclicity; model errors propagate unchanged
    build_graph(services, apis, max_paths=max_paths)
    return apis, services


def normalized_weights(apis: list[Api]) -> dict[str, float]:
    total = sum(a.weight for a in apis)
    return {a.name: a.weight / total for a in apis}


def dump_application(apis: list[Api], services: list[Service]) -> str:
    doc = {
        "apis": [{"name": a.name, "weight": a.weight, "entry": a.entry_service} for a in apis],
        "services": [
            {"name": s.name, "labels": sorted(s.labels), "calls": list(s.calls)} for s in services
        ],
    }
    return json.dumps(doc, indent=2) + "\n"


# -- instances ---------------------------------------------------------------


def _number(obj: dict, key: str, path: str, default: Any = ..., integer: bool = False) -> float:
    v = _field(obj, key, (int, float), path, default)
    if integer and not float(v).is_integer():
        raise SchemaError(f"{path}.{key}", "expected integer")
    if v < 0:
        raise ValidationError(f"{path}.{key}", "must be non-negative")
    return int(v) if integer else float(v)


def load_instances(yaml_docs: str) -> list[ReplicaSet]:
    try:
        docs = [d for d in yaml.safe_load_all(yaml_docs) if d is not None]
    except yaml.YAMLError as exc:
        raise SchemaError("$", f"invalid YAML: {exc}") from None

    out: list[ReplicaSet] = []
    seen: set[str] = set()
    for i, doc in enumerate(docs):
        path = f"$[{i}]"
        _expect(doc, dict, path)
        api_version = _field(doc, "apiVersion", str, path, default="sim/v1")
        if api_version != "sim/v1":
            raise SchemaError(f"{path}.apiVersion", f"unsupported version {api_version!r}")
        kind_raw = _field(doc, "kind", str, path)
        try:
            kind = InstanceKind(kind_raw)
        except ValueError:
            raise SchemaError(f"{path}.kind", f"expected Pod, Container or UserDefined, got {kind_raw!r}") from None
        meta = _field(doc, "metadata", dict, path)
        name = _field(meta, "name", str, f"{path}.metadata")
        if name in seen:
            raise ValidationError(f"{path}.metadata.name", f"duplicate name {name!r}")
        seen.add(name)
        labels = _field(meta, "labels", list, f"{path}.metadata")
        for j, lab in enumerate(labels):
            _expect(lab, str, f"{path}.metadata.labels[{j}]")

        spec = _field(doc, "spec", dict, path)
        sp = f"{path}.spec"
        replicas = _number(spec, "replicas", sp, integer=True)
        requests = _field(spec, "requests", dict, sp)
        limits = _field(spec, "limits", dict, sp)
        req_shares = _number(requests, "shares", f"{sp}.requests")
        req_ram = _number(requests, "ram", f"{sp}.requests")
        lim_shares = _number(limits, "shares", f"{sp}.limits")
        lim_ram = _number(limits, "ram", f"{sp}.limits")
        if req_shares > lim_shares:
            raise ValidationError(f"{sp}.requests.shares", f"request {req_shares:g} exceeds limit {lim_shares:g}")
        if req_ram > lim_ram:
            raise ValidationError(f"{sp}.requests.ram", f"request {req_ram:g} exceeds limit {lim_ram:g}")
        min_r = _number(spec, "minReplicas", sp, default=replicas, integer=True)
        max_r = _number(spec, "maxReplicas", sp, default=max(replicas, min_r), integer=True)
        if min_r < 1 and max_r < 1:
            raise ValidationError(f"{sp}.maxReplicas", "must be >= 1")
        if replicas > max_r:
            raise ValidationError(f"{sp}.replicas", "exceeds maxReplicas")
        if min_r > max_r:
            raise ValidationError(f"{sp}.minReplicas", "exceeds maxReplicas")

        template = InstanceSpec(
            kind=kind,
            labels=frozenset(labels),
            requested_shares=req_shares,
            limit_shares=lim_shares,
            requested_ram=req_ram,
            limit_ram=lim_ram,
            bandwidth=_number(spec, "bandwidth", sp, default=0.0),
            size=_number(spec, "size", sp, default=0.0),
        )
        rs = ReplicaSet(name=name, template=template, min_replicas=min_r, max_replicas=max_r)
        for _ in range(replicas):
            rs.replicas.append(rs.mint().id)
        out.append(rs)
    return out


def _num_out(v: float) -> int | float:
    return int(v) if float(v).is_integer() else v


def dump_instances(replica_sets: list[ReplicaSet]) -> str:
    docs = []
    for rs in replica_sets:
        t = rs.template
        docs.append({
            "apiVersion": "sim/v1",
            "kind": t.kind.value,
            "metadata": {"name": rs.name, "labels": sorted(t.labels)},
            "spec": {
                "replicas": len(rs.replicas),
                "size": _num_out(t.size),
                "bandwidth": _num_out(t.bandwidth),
                "requests": {"shares": _num_out(t.requested_shares), "ram": _num_out(t.requested_ram)},
                "limits": {"shares": _num_out(t.limit_shares), "ram": _num_out(t.limit_ram)},
                "minReplicas": rs.min_replicas,
                "maxReplicas": rs.max_replicas,
            },
        })
    return yaml.safe_dump_all(docs, sort_keys=False)


# -- cluster -----------------------------------------------------------------


def load_cluster(doc: str) -> list[Vm]:
    try:
        raw = json.loads(doc)
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"invalid JSON: {exc.msg} at line {exc.lineno}") from None
    _expect(raw, dict, "$")
    vms_raw = _field(raw, "vms", list, "$")
    if not vms_raw:
        raise ValidationError("$.vms", "cluster must contain at least one VM")
    vms: list[Vm] = []
    seen: set[str] = set()
    for i, v in enumerate(vms_raw):
        path = f"$.vms[{i}]"
        _expect(v, dict, path)
        vm_id = _field(v, "id", str, path)
        if vm_id in seen:
            raise ValidationError(f"{path}.id", f"duplicate VM id {vm_id!r}")
        seen.add(vm_id)
        num_pes = _number(v, "numPes", path, integer=True)
        if num_pes < 1:
            raise ValidationError(f"{path}.numPes", "must be >= 1")
        mips = _number(v, "mipsPerPe", path)
        if not mips > 0:
            raise ValidationError(f"{path}.mipsPerPe", "must be positive")
        vms.append(Vm(
            id=vm_id,
            mips_per_pe=mips,
            num_pes=num_pes,
            ram=_number(v, "ram", path),
            bw=_number(v, "bw", path),
        ))
    return vms


def dump_cluster(vms: list[Vm]) -> str:
    doc = {"vms": [
        {"id": vm.id, "mipsPerPe": _num_out(vm.mips_per_pe), "numPes": vm.num_pes,
         "ram": _num_out(vm.ram), "bw": _num_out(vm.bw)}
        for vm in vms
    ]}
    return json.dumps(doc, indent=2) + "\n"


# -- whole scenario ------------------------------------------------------------


@dataclass
class Scenario:
    apis: list[Api]
    services: list[Service]
    replica_sets: list[ReplicaSet]
    vms: list[Vm]
    config: ScenarioConfig

    def graph(self) -> ServiceGraph:
        return build_graph(self.services, self.apis, max_paths=self.config.max_paths)

    def deployment(self) -> Deployment:
        # fresh copies so one Scenario can seed several independent runs
        rsets = [
            ReplicaSet(rs.name, rs.template, list(rs.replicas), rs.min_replicas,
                       rs.max_replicas, rs.next_index)
            for rs in self.replica_sets
        ]
        vms = [Vm(v.id, v.mips_per_pe, v.num_pes, v.ram, v.bw, v.total_shares) for v in self.vms]
        return Deployment.from_replica_sets(self.graph(), rsets, vms)


SCENARIO_FILES = ("application.json", "instances.yaml", "cluster.json", "scenario.toml")


def _read(path: Path) -> str:
    try:
        return path.read_text()
    except FileNotFoundError:
        raise ConfigError("$", "file not found", source=str(path)) from None
    except OSError as exc:
        raise ConfigError("$", f"cannot read: {exc.strerror}", source=str(path)) from None


def load_scenario_files(
    application: Path,
    instances: Path,
    cluster: Path,
    scenario: Path | None = None,
) -> Scenario:
    sources = [(application, "application"), (instances, "instances"), (cluster, "cluster")]
    if scenario is not None:
        sources.append((scenario, "scenario"))
    texts = {}
    for path, key in sources:
        texts[key] = _read(Path(path))

    def guarded(fn, key, path):
        try:
            return fn(texts[key])
        except ConfigError as exc:
            raise exc.with_source(str(path)) from None
        except ModelError as exc:
            raise ValidationError("$", str(exc), source=str(path)) from None

    cfg = guarded(load_scenario, "scenario", scenario) if scenario is not None else ScenarioConfig()
    apis, services = guarded(lambda t: load_application(t, cfg.max_paths), "application", application)
    replica_sets = guarded(load_instances, "instances", instances)
    vms = guarded(load_cluster, "cluster", cluster)
    return Scenario(apis, services, replica_sets, vms, cfg)


def load_scenario_dir(directory: Path) -> Scenario:
    d = Path(directory)
    if not d.is_dir():
        raise ConfigError("$", "scenario directory not found", source=str(d))
    scen = d / "scenario.toml"
    return load_scenario_files(
        d / "application.json",
        d / "instances.yaml",
        d / "cluster.json",
        scen if scen.exists() else None,
    )


def config_field_names() -> list[str]:
    return ["wait_interval", "cloudlet_overrides", *_SCENARIO_KEYS]


__all__ = [
    "ConfigError", "SchemaError", "ValidationError", "ScenarioConfig", "GeneratorConfig",
    "CloudletConfig", "ScalingConfig", "MigrationConfig", "SchedulerConfig", "UsageConfig",
    "Scenario", "load_application", "load_instances", "load_cluster", "load_scenario",
    "load_scenario_files", "load_scenario_dir", "dump_application", "dump_instances",
    "dump_cluster", "dump_scenario", "normalized_weights", "scenario_from_mapping",
    "SCENARIO_FILES",
]
