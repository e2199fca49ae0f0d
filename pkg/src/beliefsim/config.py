"""Run-config files (YAML or JSON) and agent construction from them.

Example::

    agent: {kind: degroot, params: {alpha: 0.5, initial: {kind: uniform}}}
    stimuli: {source: synth, params: {n_participants: 50, n_peers: 5}}
    seed: 7
    parallelism: 4
    output_path: out/degroot.jsonl

Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agents import (
    DeGrootAgent,
    HomophilyAgent,
    InitialPolicy,
    RandomFollowAgent,
    ReplayAgent,
    StubbornAgent,
)
from .core import TraceError, load_cohort
from .engine import PlanError, StimulusPlan, SynthConfig, stimuli_from_cohort, synthesize_stimuli
from .llmagent import AuditLog, LLMAgent, ModelEndpoint

AGENT_KINDS = ("degroot", "stubborn", "homophily", "random_follow", "replay", "llm")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


@dataclass
class SimulationConfig:
    agent: dict
    stimuli: dict
    output_path: Path
    endpoint: dict | None = None
    parallelism: int = 1
    seed: int = 0
    rounds: int = 3
    label: str | None = None
    audit_path: Path | None = None
    min_complete_fraction: float = 0.95
    base_dir: Path = field(default_factory=Path)


def _get(d: dict, key: str, where: str, kind=None, required=True, default=None):
    name = f"{where}.{key}" if where else key
    if key not in d or d[key] is None:
        if required:
            raise ConfigError(name, "missing required field")
        return default
    value = d[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(name, f"expected {getattr(kind, '__name__', kind)}")
    if kind is int and isinstance(value, bool):
        raise ConfigError(name, "expected int")
    return value


def load_config(path) -> SimulationConfig:
    path = Path(path)
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError("config", f"not valid YAML/JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config", "top level must be a mapping")
    return parse_config(doc, base_dir=path.parent)


def parse_config(doc: dict, base_dir: Path = Path(".")) -> SimulationConfig:
    agent = _get(doc, "agent", "", dict)
    kind = _get(agent, "kind", "agent", str)
    if kind not in AGENT_KINDS:
        raise ConfigError("agent.kind", f"unknown kind {kind!r}; expected one of {AGENT_KINDS}")
    stimuli = _get(doc, "stimuli", "", dict)
    source = _get(stimuli, "source", "stimuli", str)
    if source not in ("file", "synth"):
        raise ConfigError("stimuli.source", "must be 'file' or 'synth'")
    if source == "file":
        _get(stimuli, "path", "stimuli", str)
    endpoint = _get(doc, "endpoint", "", dict, required=kind == "llm")
    if kind == "llm":
        if "base_url" not in endpoint and "base_url_env" not in endpoint:
            raise ConfigError("endpoint.base_url", "missing required field")
        _get(endpoint, "model_name", "endpoint", str)
    audit = _get(doc, "audit_path", "", str, required=False)
    cfg = SimulationConfig(
        agent=agent,
        stimuli=stimuli,
        endpoint=endpoint,
        output_path=_under(base_dir, _get(doc, "output_path", "", str)),
        parallelism=_get(doc, "parallelism", "", int, required=False, default=1),
        seed=_get(doc, "seed", "", int, required=False, default=0),
        rounds=_get(doc, "rounds", "", int, required=False, default=3),
        label=_get(doc, "label", "", str, required=False),
        audit_path=_under(base_dir, audit) if audit else None,
        min_complete_fraction=float(
            _get(doc, "min_complete_fraction", "", (int, float), required=False, default=0.95)
        ),
        base_dir=base_dir,
    )
    if cfg.parallelism < 1:
        raise ConfigError("parallelism", "must be positive")
    if not 0.0 <= cfg.min_complete_fraction <= 1.0:
        raise ConfigError("min_complete_fraction", "must lie in [0, 1]")
    return cfg


def _under(base: Path, p: str) -> Path:
    path = Path(p)
    return path if path.is_absolute() else base / path


def _resolve(cfg: SimulationConfig, p: str) -> Path:
    return _under(cfg.base_dir, p)


def build_plan(cfg: SimulationConfig) -> StimulusPlan:
    if cfg.stimuli["source"] == "file":
        return stimuli_from_cohort(load_cohort(_resolve(cfg, cfg.stimuli["path"])))
    params = dict(cfg.stimuli.get("params") or {})
    params.setdefault("rounds", cfg.rounds)
    for key in ("peer_pmf",):
        if key in params:
            params[key] = tuple(params[key])
    try:
        if "statements" in params:
            params["statements"] = tuple(
                (s["topic"], s["statement"], s.get("is_true")) for s in params["statements"]
            )
        synth = SynthConfig(**params)
    except (TypeError, KeyError, PlanError) as exc:
        raise ConfigError("stimuli.params", str(exc)) from None
    return synthesize_stimuli(synth, cfg.seed)


def _initial(params: dict, where: str) -> InitialPolicy:
    spec = params.get("initial") or {}
    try:
        return InitialPolicy(**spec)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.initial", str(exc)) from None


def build_endpoint(cfg: SimulationConfig) -> ModelEndpoint:
    ep = dict(cfg.endpoint or {})
    env_name = ep.pop("base_url_env", None)
    if env_name:
        if not os.environ.get(env_name):
            raise ConfigError("endpoint.base_url_env", f"environment variable {env_name} is not set")
        ep["base_url"] = os.environ[env_name]
    try:
        return ModelEndpoint(**ep)
    except (TypeError, ValueError) as exc:
        raise ConfigError("endpoint", str(exc)) from None


def build_agent(cfg: SimulationConfig, spec: dict | None = None, where: str = "agent", lenient=False):
    spec = spec if spec is not None else cfg.agent
    kind = spec.get("kind")
    params = dict(spec.get("params") or {})
    seed = params.get("seed", cfg.seed)
    try:
        if kind == "degroot":
            return DeGrootAgent(alpha=params.get("alpha", 0.5), initial=_initial(params, where), seed=seed)
        if kind == "stubborn":
            return StubbornAgent(initial=_initial(params, where), seed=seed)
        if kind in ("homophily", "random_follow"):
            base_spec = params.get("base") or {"kind": "degroot"}
            base = build_agent(cfg, base_spec, f"{where}.params.base", lenient)
            if kind == "homophily":
                return HomophilyAgent(base=base)
            return RandomFollowAgent(base=base, seed=seed)
        if kind == "replay":
            return ReplayAgent(load_cohort(_resolve(cfg, _get(params, "source", f"{where}.params", str))))
        if kind == "llm":
            audit = AuditLog(audit_path(cfg))
            return LLMAgent(
                build_endpoint(cfg),
                audit_log=audit,
                lenient=lenient or bool(params.get("lenient", False)),
                parse_retries=params.get("parse_retries"),
            )
    except (ConfigError, TraceError):
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}.params", str(exc)) from None
    raise ConfigError(f"{where}.kind", f"unknown kind {kind!r}")


def audit_path(cfg: SimulationConfig) -> Path:
    if cfg.audit_path is not None:
        return cfg.audit_path
    return cfg.output_path.with_name(cfg.output_path.name + ".audit.jsonl")
