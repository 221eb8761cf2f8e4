"""Scenario files: YAML documents validated into :class:`Scenario`.

A scenario may name another scenario (or a shipped preset) under
``extends``; the child's keys are deep-merged over the parent's.
Validation errors are reported with the line of the offending key.
"""

from __future__ import annotations

import copy
import math
from importlib import resources
from pathlib import Path
from typing import Any, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from typing_extensions import Annotated

SCHEMA_VERSION = 1
PRESET_PACKAGE = "nakasim.presets"


class ConfigError(ValueError):
    """A scenario could not be loaded; the message carries line numbers when known."""


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


# -- nodes, transactions, network ----------------------------------------

class NodeGroup(_Model):
    kind: Literal["honest", "observer", "corrupt"] = "honest"
    count: int = Field(1, ge=1)
    power: int = Field(1, ge=0)
    k: Optional[int] = Field(None, ge=1)  # per-node confirmation depth (merchants)
    role: Optional[Literal["merchant", "late_joiner"]] = None
    join: int = Field(0, ge=0)
    leave: Optional[int] = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "NodeGroup":
        if self.kind == "observer" and self.power != 0:
            raise ValueError("observers have zero power")
        if self.leave is not None and self.leave <= self.join:
            raise ValueError("leave must come after join")
        return self


class TxSchedule(_Model):
    rounds: list[int] = []
    every: Optional[int] = Field(None, ge=1)
    start: int = Field(1, ge=1)
    end: Optional[int] = None

    def issue_rounds(self, max_rounds: int) -> list[int]:
        out = set(r for r in self.rounds if 1 <= r <= max_rounds)
        if self.every:
            end = min(self.end if self.end is not None else max_rounds, max_rounds)
            out.update(range(self.start, end + 1, self.every))
        return sorted(out)


class PartitionSpec(_Model):
    groups: list[list[int]]
    start: int = Field(ge=0)
    end: int = Field(ge=0)


class DelayRuleSpec(_Model):
    delay: int = Field(ge=0)
    kind: Optional[Literal["block", "tx"]] = None
    sender: Optional[int] = None
    recipient: Optional[int] = None
    ids: Optional[list[int]] = None


class NetworkSpec(_Model):
    default_delay: Optional[int] = Field(None, ge=0)
    tx_delay: int = Field(0, ge=0)
    rules: list[DelayRuleSpec] = []
    partitions: list[PartitionSpec] = []


# -- attacks ---------------------------------------------------------------

class PrivateForkSpec(_Model):
    kind: Literal["private_fork"]
    attacker_power: int = Field(ge=0)
    target_tx: int = Field(0, ge=0)
    margin: int = Field(1, ge=1)
    trigger: Literal["merchant_finalized", "first_confirm", "all_confirmed"] = "merchant_finalized"
    start: Literal["trigger", "immediate"] = "trigger"
    fork_at: Literal["tx_parent", "genesis"] = "tx_parent"
    post_release_rounds: int = Field(20, ge=0)


class HistoryRewriteSpec(_Model):
    kind: Literal["history_rewrite"]
    attacker_power: int = Field(ge=0)
    depth_back: int = Field(ge=1)
    start_round: int = Field(ge=1)
    margin: int = Field(1, ge=1)
    post_release_rounds: int = Field(20, ge=0)


class BriberySpec(_Model):
    kind: Literal["bribery"]
    p_b: float = Field(ge=0)
    p_b_tilde: float = Field(ge=0)
    c: float = Field(ge=0)
    psi_a: float = Field(0.0, ge=0)
    x: float = Field(1.0, ge=0)
    n_miners: int = Field(ge=1)
    k: int = Field(6, ge=1)
    pivotality_threshold: float = Field(0.01, gt=0, le=1)
    target_tx: int = Field(0, ge=0)
    margin: int = Field(1, ge=1)
    post_release_rounds: int = Field(20, ge=0)


class PartitionAttackSpec(_Model):
    kind: Literal["partition"]
    groups: list[list[int]]
    start: int = Field(ge=0)
    end: int = Field(ge=0)


class SplitBrainSpec(_Model):
    kind: Literal["split_brain"]
    rho: float = Field(gt=0, lt=1)
    corrupt_per_honest: int = Field(ge=1)
    isolation_end: int = Field(ge=1)
    late_joiner_round: int = Field(ge=1)

    @model_validator(mode="after")
    def _check(self) -> "SplitBrainSpec":
        if self.corrupt_per_honest != math.ceil(1 / self.rho - 1e-12):
            raise ValueError(f"corrupt_per_honest must equal ceil(1/rho) = {math.ceil(1 / self.rho)}")
        if self.late_joiner_round < self.isolation_end:
            raise ValueError("late_joiner_round must be >= isolation_end")
        return self


AttackSpec = Annotated[
    Union[PrivateForkSpec, HistoryRewriteSpec, BriberySpec, PartitionAttackSpec, SplitBrainSpec],
    Field(discriminator="kind"),
]


# -- everything else -------------------------------------------------------

class RecoverySpec(_Model):
    rounds: list[int] = []
    seed: int = 0


class EconSpec(_Model):
    c: float = Field(ge=0)
    p_b: float = Field(ge=0)
    p_b_tilde: Optional[float] = Field(None, ge=0)
    psi_a: float = Field(0.0, ge=0)
    community_response: Literal["none", "no_recoup"] = "none"


class LivenessSpec(_Model):
    t_conf: Union[int, Literal["auto"]] = "auto"
    quantile: float = Field(0.999, gt=0, le=1)
    calibration_trials: int = Field(300, ge=1)
    phi: float = Field(0.1, gt=0, lt=1)
    after: Union[int, Literal["recovery"], None] = None


class BoundsSpec(_Model):
    epsilon: float = Field(0.2, ge=0, lt=1)
    phi: float = Field(0.1, gt=0, lt=1)
    window: int = Field(ge=1)
    windows_per_trace: int = Field(1, ge=1)


class SweepSpec(_Model):
    key: str
    values: list[Any]


class GateSpec(_Model):
    property: Literal["consistency", "liveness", "recovery_lemma", "bounds"]
    protocol: Optional[Literal["nakamoto", "stubborn"]] = None


class TraceSpec(_Model):
    level: Literal["full", "compact"] = "full"


PROPERTIES = ("consistency", "liveness", "recovery_lemma", "bounds")


class Scenario(_Model):
    version: int = SCHEMA_VERSION
    name: str = "scenario"
    description: str = ""
    seed: int = 0
    trials: int = Field(1, ge=1)
    max_rounds: int = Field(ge=1)
    protocol: Literal["nakamoto", "stubborn"] = "nakamoto"
    delta: int = Field(ge=0)
    p: float = Field(ge=0, le=1)
    k: int = Field(ge=1)
    nodes: list[NodeGroup]
    txs: TxSchedule = TxSchedule()
    network: NetworkSpec = NetworkSpec()
    attack: Optional[AttackSpec] = None
    recovery: Optional[RecoverySpec] = None
    econ: Optional[EconSpec] = None
    liveness: LivenessSpec = LivenessSpec()
    bounds: Optional[BoundsSpec] = None
    verify: list[Literal["consistency", "liveness", "recovery_lemma", "bounds"]] = ["consistency"]
    hard_gates: list[GateSpec] = []
    sweep: Optional[SweepSpec] = None
    paired: list[Literal["nakamoto", "stubborn"]] = []
    trace: TraceSpec = TraceSpec()

    @model_validator(mode="after")
    def _check(self) -> "Scenario":
        if self.version != SCHEMA_VERSION:
            raise ValueError(f"unsupported scenario version {self.version}")
        n_nodes = sum(g.count for g in self.nodes)
        if n_nodes == 0:
            raise ValueError("scenario needs at least one node")
        if self.total_power() < 1:
            raise ValueError("total mining power must be >= 1")
        merchants = sum(g.count for g in self.nodes if g.role == "merchant")
        if merchants > 1:
            raise ValueError("at most one merchant node")
        if isinstance(self.attack, PrivateForkSpec) and self.attack.trigger == "merchant_finalized" \
                and not merchants:
            raise ValueError("merchant_finalized trigger needs a node with role: merchant")
        for g in self.nodes:
            if g.join > self.max_rounds:
                raise ValueError(f"join round {g.join} beyond max_rounds")
        if isinstance(self.attack, SplitBrainSpec):
            honest = sum(g.count for g in self.nodes
                         if g.kind == "honest" and g.role is None and g.join == 0)
            corrupt = sum(g.count for g in self.nodes if g.kind == "corrupt")
            if corrupt != self.attack.corrupt_per_honest * honest:
                raise ValueError(f"split_brain needs corrupt_per_honest x honest = "
                                 f"{self.attack.corrupt_per_honest * honest} corrupt nodes, got {corrupt}")
            if not any(g.role == "late_joiner" and g.join == self.attack.late_joiner_round
                       for g in self.nodes):
                raise ValueError("split_brain needs a late_joiner node joining at late_joiner_round")
        if isinstance(self.attack, BriberySpec) and self.econ is not None:
            raise ValueError("bribery carries its own economics; drop the econ section")
        return self

    # -- derived quantities --------------------------------------------
    def attacker_power(self) -> int:
        a = self.attack
        return getattr(a, "attacker_power", 0) if a is not None else 0

    def total_power(self) -> int:
        return sum(g.count * g.power for g in self.nodes) + self.attacker_power()

    def corrupt_power(self) -> int:
        return sum(g.count * g.power for g in self.nodes if g.kind == "corrupt") + self.attacker_power()

    def rho(self) -> float:
        return self.corrupt_power() / self.total_power()


# -- loading -----------------------------------------------------------------

def _line_map(node: yaml.Node, path: tuple = (), out: Optional[dict] = None) -> dict:
    """Map each key path in a composed YAML document to its 1-based line."""
    if out is None:
        out = {}
    out.setdefault(path, node.start_mark.line + 1)
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = (*path, k.value)
            out[key] = k.start_mark.line + 1
            _line_map(v, key, out)
            out[key] = k.start_mark.line + 1
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            _line_map(v, (*path, i), out)
    return out


def _parse_yaml(text: str, source: str) -> tuple[dict, dict]:
    try:
        node = yaml.compose(text)
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{source}:{mark.line + 1}" if mark else source
        raise ConfigError(f"{where}: invalid YAML: {getattr(exc, 'problem', exc)}") from None
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{source}:1: scenario must be a mapping")
    return data, (_line_map(node) if node is not None else {})


def deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in over.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def preset_names() -> list[str]:
    root = resources.files(PRESET_PACKAGE)
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_text(name: str) -> str:
    path = resources.files(PRESET_PACKAGE) / f"{name}.yaml"
    if not path.is_file():
        raise ConfigError(f"unknown preset {name!r}; known presets: {', '.join(preset_names())}")
    return path.read_text()


def _resolve(text: str, source: str, base_dir: Optional[Path], seen: tuple = ()) -> tuple[dict, dict]:
    data, lines = _parse_yaml(text, source)
    parent = data.pop("extends", None)
    if parent is None:
        return data, lines
    if not isinstance(parent, str):
        raise ConfigError(f"{source}:{lines.get(('extends',), 1)}: extends must be a preset name or path")
    if parent in seen:
        raise ConfigError(f"{source}: circular extends via {parent!r}")
    candidate = (base_dir / parent) if base_dir is not None else Path(parent)
    if parent.endswith((".yaml", ".yml")) and candidate.is_file():
        ptext, psource, pdir = candidate.read_text(), str(candidate), candidate.parent
    else:
        ptext, psource, pdir = preset_text(parent), f"preset:{parent}", None
    pdata, _ = _resolve(ptext, psource, pdir, (*seen, parent))
    return deep_merge(pdata, data), lines


def parse_override(item: str) -> tuple[list, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    path = [int(p) if p.isdigit() else p for p in key.strip().split(".")]
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError:
        value = raw
    return path, value


def apply_overrides(data: dict, overrides: list[str]) -> dict:
    return _apply(data, [(item, *parse_override(item)) for item in overrides])


def _apply(data: dict, changes: list[tuple[str, list, Any]]) -> dict:
    data = copy.deepcopy(data)
    for item, path, value in changes:
        cur: Any = data
        for i, part in enumerate(path[:-1]):
            nxt = path[i + 1]
            if isinstance(cur, list):
                if not isinstance(part, int) or part >= len(cur):
                    raise ConfigError(f"override {item!r}: bad list index {part}")
                cur = cur[part]
                continue
            if part not in cur or cur[part] is None:
                cur[part] = [] if isinstance(nxt, int) else {}
            cur = cur[part]
        last = path[-1]
        if isinstance(cur, list):
            if not isinstance(last, int) or last >= len(cur):
                raise ConfigError(f"override {item!r}: bad list index {last}")
        cur[last] = value
    return data


def _format_errors(exc: ValidationError, lines: dict, source: str) -> str:
    msgs = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        line = None
        # discriminated unions add the tag to the location; drop parts until a key matches
        for cut in range(len(loc), -1, -1):
            probe = tuple(p for p in loc[:cut])
            if probe in lines:
                line = lines[probe]
                break
            stripped = tuple(p for p in probe if p not in _TAGS)
            if stripped in lines:
                line = lines[stripped]
                break
        where = f"{source}:{line}" if line else source
        field = ".".join(str(p) for p in loc if p not in _TAGS) or "<root>"
        msgs.append(f"{where}: {field}: {err['msg']}")
    return "\n".join(msgs)


_TAGS = {"private_fork", "history_rewrite", "bribery", "partition", "split_brain"}


def scenario_from_data(data: dict, lines: Optional[dict] = None, source: str = "<scenario>") -> Scenario:
    try:
        return Scenario.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc, lines or {}, source)) from None


def load_scenario(path: Optional[Union[str, Path]] = None, preset: Optional[str] = None,
                  overrides: Optional[list[str]] = None, text: Optional[str] = None) -> Scenario:
    """Load a scenario from a file, a preset name, or literal YAML text."""
    if sum(x is not None for x in (path, preset, text)) != 1:
        raise ConfigError("give exactly one of a scenario path, a preset name, or text")
    if path is not None:
        p = Path(path)
        try:
            raw = p.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read scenario {path}: {exc.strerror}") from None
        data, lines = _resolve(raw, str(p), p.parent)
        source = str(p)
    elif preset is not None:
        data, lines = _resolve(preset_text(preset), f"preset:{preset}", None)
        source = f"preset:{preset}"
    else:
        data, lines = _resolve(text, "<text>", Path.cwd())
        source = "<text>"
    if overrides:
        data = apply_overrides(data, overrides)
    return scenario_from_data(data, lines, source)


def scenario_dict(scn: Scenario) -> dict:
    return scn.model_dump(mode="json")


def with_changes(scn: Scenario, **changes: Any) -> Scenario:
    """A validated copy of ``scn`` with top-level fields replaced."""
    data = scenario_dict(scn)
    data.update(changes)
    return Scenario.model_validate(data)


def set_path(scn: Scenario, key: str, value: Any) -> Scenario:
    path = [int(p) if p.isdigit() else p for p in key.split(".")]
    return Scenario.model_validate(_apply(scenario_dict(scn), [(key, path, value)]))
