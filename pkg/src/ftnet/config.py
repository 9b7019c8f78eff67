"""Campaign configuration: an INI-style file with one section per module.

Every key can also be given on the command line (see ``cli``); the file
written by ``serialize`` parses back to an equal config and re-serializes
to the same bytes.
"""

from __future__ import annotations

import configparser
import dataclasses
import shlex
from dataclasses import dataclass, field, fields

from .fuzzer.campaign import SchedulerConfig
from .orchestrator import DEFAULT_DRAIN_MS, DEFAULT_READY_GRACE_MS, DEFAULT_TIMEOUT_MS, PeerSpec, Role, Side
from .testbed import peers as testbed_peers

MODES = ("fault", "baseline", "identity-check", "reproduce")


class ConfigError(ValueError):
    pass


@dataclass
class CampaignSection:
    mode: str = "fault"
    seed: int = 0
    iterations: int = 2000
    wall_time_s: float = 0.0
    workers: int = 1
    output_dir: str = "ftn-out"
    identity_runs: int = 5
    transcript: str = ""
    crash_entry: str = ""


@dataclass
class OrchestratorSection:
    timeout_ms: int = DEFAULT_TIMEOUT_MS
    drain_ms: int = DEFAULT_DRAIN_MS
    ready_grace_ms: int = DEFAULT_READY_GRACE_MS


@dataclass
class TestbedSection:
    transport: str = "tcp"
    integrity: str = "crc+hmac"
    arm: str = ""
    nonce_seed: str = "fresh"
    reply_timeout_ms: int = 300


@dataclass
class PeerSection:
    """Custom peer; an empty entry and executable selects the testbed peer."""

    entry: str = ""
    executable: str = ""
    args: str = ""
    side: str = ""
    env: str = ""
    instrumented: bool = True
    clean_exit_codes: str = "0"


@dataclass
class CampaignConfig:
    campaign: CampaignSection = field(default_factory=CampaignSection)
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    orchestrator: OrchestratorSection = field(default_factory=OrchestratorSection)
    testbed: TestbedSection = field(default_factory=TestbedSection)
    weird: PeerSection = field(default_factory=PeerSection)
    target: PeerSection = field(default_factory=PeerSection)

    def validate(self) -> "CampaignConfig":
        c = self.campaign
        if c.mode not in MODES:
            raise ConfigError(f"campaign.mode: expected one of {', '.join(MODES)}, got {c.mode!r}")
        if c.iterations <= 0 and c.wall_time_s <= 0:
            raise ConfigError("campaign.iterations: budget must be positive")
        if c.iterations < 0 or c.wall_time_s < 0:
            raise ConfigError("campaign.iterations: budgets must not be negative")
        if c.workers < 1:
            raise ConfigError("campaign.workers: must be at least 1")
        if c.identity_runs < 2:
            raise ConfigError("campaign.identity_runs: need at least 2 runs to compare")
        s = self.scheduler
        if not 0.0 <= s.p_favored <= 1.0:
            raise ConfigError("scheduler.p_favored: must lie in [0, 1]")
        if min(s.weight_stream, s.weight_splice, s.weight_extend) < 0 or \
                s.weight_stream + s.weight_splice + s.weight_extend == 0:
            raise ConfigError("scheduler.weight_*: weights must be non-negative and not all zero")
        if s.probes_per_site < 0 or not 0 < s.crash_threshold:
            raise ConfigError("scheduler.crash_threshold: must be positive")
        o = self.orchestrator
        if min(o.timeout_ms, o.drain_ms, o.ready_grace_ms) <= 0:
            raise ConfigError("orchestrator: timeouts must be positive")
        t = self.testbed
        if t.transport not in ("tcp", "udp"):
            raise ConfigError(f"testbed.transport: expected tcp or udp, got {t.transport!r}")
        if t.integrity not in ("none", "crc", "crc+hmac"):
            raise ConfigError(f"testbed.integrity: unknown mode {t.integrity!r}")
        if t.nonce_seed != "fresh":
            try:
                int(t.nonce_seed)
            except ValueError:
                raise ConfigError("testbed.nonce_seed: expected 'fresh' or an integer") from None
        for name in ("weird", "target"):
            peer = getattr(self, name)
            if peer.side and peer.side not in (Side.CLIENT.value, Side.SERVER.value):
                raise ConfigError(f"{name}.side: expected Client or Server, got {peer.side!r}")
        return self

    # peers

    @property
    def nonce_seed(self) -> int | None:
        return None if self.testbed.nonce_seed == "fresh" else int(self.testbed.nonce_seed)

    def peer_specs(self) -> tuple[PeerSpec, PeerSpec]:
        t = self.testbed
        weird, target = testbed_peers.tinychat_pair(t.transport, t.integrity, self.nonce_seed, t.arm,
                                                    t.reply_timeout_ms)
        weird = self._custom(self.weird, Role.WEIRD, weird)
        target = self._custom(self.target, Role.TARGET, target)
        for spec in (weird, target):
            spec.startup_grace_ms = self.orchestrator.ready_grace_ms
        return weird, target

    @staticmethod
    def _custom(section: PeerSection, role: Role, default: PeerSpec) -> PeerSpec:
        if not section.entry and not section.executable:
            return default
        env = dict(item.split("=", 1) for item in shlex.split(section.env))
        return PeerSpec(role, Side(section.side or default.side.value), shlex.split(section.args),
                        executable=section.executable or None, entry=section.entry or None, env=env,
                        instrumented=section.instrumented,
                        clean_exit_codes=tuple(int(x) for x in section.clean_exit_codes.split(",") if x.strip()))

    def orchestrator_kwargs(self) -> dict:
        return {"timeout_ms": self.orchestrator.timeout_ms, "drain_ms": self.orchestrator.drain_ms}


SECTIONS = tuple(f.name for f in fields(CampaignConfig))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def serialize(config: CampaignConfig) -> str:
    lines = []
    for section in SECTIONS:
        if lines:
            lines.append("")
        lines.append(f"[{section}]")
        for f in fields(getattr(config, section)):
            lines.append(f"{f.name} = {_format(getattr(getattr(config, section), f.name))}")
    return "\n".join(lines) + "\n"


def _convert(kind, text: str, where: str):
    text = text.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind in (int, "int"):
            return int(text)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{where}: cannot read {text!r} as {getattr(kind, '__name__', kind)}") from None
    return text


def field_types(section: str) -> dict[str, object]:
    cls = type(getattr(CampaignConfig(), section))
    return {f.name: f.type for f in fields(cls)}


def set_value(config: CampaignConfig, section: str, key: str, text: str, where: str | None = None) -> None:
    types = field_types(section)
    where = where or f"{section}.{key}"
    if key not in types:
        raise ConfigError(f"{where}: unknown key {section}.{key}")
    setattr(getattr(config, section), key, _convert(types[key], text, where))


def _line_of(text: str, section: str, key: str) -> int | None:
    current = None
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
        elif current == section and stripped.split("=", 1)[0].strip() == key:
            return number
    return None


def parse(text: str, name: str = "<config>") -> CampaignConfig:
    parser = configparser.ConfigParser(interpolation=None, empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=name)
    except configparser.Error as exc:
        raise ConfigError(f"{name}: {exc}") from None
    config = CampaignConfig()
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{name}: unknown section [{section}]")
        for key, value in parser.items(section):
            line = _line_of(text, section, key)
            where = f"{name}:{line}: {section}.{key}" if line else f"{name}: {section}.{key}"
            set_value(config, section, key, value, where)
    return config.validate()


def load(path: str) -> CampaignConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse(text, path)


def dump(config: CampaignConfig, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(serialize(config))


def copy(config: CampaignConfig) -> CampaignConfig:
    return dataclasses.replace(config, **{s: dataclasses.replace(getattr(config, s)) for s in SECTIONS})
