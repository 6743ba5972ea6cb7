"""Network configuration: JSON loading with field-level diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from importlib import resources
from pathlib import Path

from qkdnet.core import LinkParams, ProtocolParams, SourceParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    id: str
    endpoints: tuple[str, str]
    link_params: LinkParams
    protocol_params: ProtocolParams
    source_params: SourceParams
    n_z_block: int
    qber_z_intrinsic: float = 0.0
    f_ec: float = 1.2
    n_z_full: int | None = None
    targets: dict = field(default_factory=dict)


@dataclass(frozen=True)
class NetworkConfig:
    nodes: list[str]
    links: list[LinkConfig]
    scenario: dict = field(default_factory=dict)
    name: str = ""
    trusted_nodes: list[str] = field(default_factory=list)

    def link(self, link_id: str) -> LinkConfig:
        for lk in self.links:
            if lk.id == link_id:
                return lk
        raise ConfigError(f"unknown link {link_id!r}; have {[l.id for l in self.links]}")

    def link_between(self, a: str, b: str) -> LinkConfig:
        for lk in self.links:
            if set(lk.endpoints) == {a, b}:
                return lk
        raise ConfigError(f"no link between {a} and {b}")


def _build(cls, raw, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    extra = set(raw) - names
    if extra:
        raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where}: {e}") from None


def parse_config(raw: dict) -> NetworkConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level: expected an object")
    for key in ("nodes", "links"):
        if key not in raw:
            raise ConfigError(f"top level: missing field {key!r}")
    nodes = raw["nodes"]
    if not isinstance(nodes, list) or len(set(nodes)) != len(nodes):
        raise ConfigError("nodes: expected a list of unique node ids")
    links, seen = [], set()
    for i, lr in enumerate(raw["links"]):
        where = f"links[{i}]"
        if not isinstance(lr, dict):
            raise ConfigError(f"{where}: expected an object")
        for key in ("id", "endpoints", "link_params", "n_z_block"):
            if key not in lr:
                raise ConfigError(f"{where}: missing field {key!r}")
        if lr["id"] in seen:
            raise ConfigError(f"{where}.id: duplicate link id {lr['id']!r}")
        seen.add(lr["id"])
        ends = lr["endpoints"]
        if not isinstance(ends, list) or len(ends) != 2 or ends[0] == ends[1]:
            raise ConfigError(f"{where}.endpoints: expected two distinct node ids")
        for e in ends:
            if e not in nodes:
                raise ConfigError(f"{where}.endpoints: undeclared node {e!r}")
        nz = lr["n_z_block"]
        if not isinstance(nz, int) or nz <= 0:
            raise ConfigError(f"{where}.n_z_block: expected a positive integer")
        extra = set(lr) - {f.name for f in fields(LinkConfig)}
        if extra:
            raise ConfigError(f"{where}: unknown field(s) {sorted(extra)}")
        links.append(
            LinkConfig(
                id=lr["id"],
                endpoints=tuple(ends),
                link_params=_build(LinkParams, lr["link_params"], f"{where}.link_params"),
                protocol_params=_build(ProtocolParams, lr.get("protocol_params", {}), f"{where}.protocol_params"),
                source_params=_build(SourceParams, lr.get("source_params", {}), f"{where}.source_params"),
                n_z_block=nz,
                qber_z_intrinsic=float(lr.get("qber_z_intrinsic", 0.0)),
                f_ec=float(lr.get("f_ec", 1.2)),
                n_z_full=lr.get("n_z_full"),
                targets=dict(lr.get("targets", {})),
            )
        )
    trusted = raw.get("trusted_nodes", [])
    for t in trusted:
        if t not in nodes:
            raise ConfigError(f"trusted_nodes: undeclared node {t!r}")
    return NetworkConfig(nodes, links, dict(raw.get("scenario", {})), raw.get("name", ""), list(trusted))


def load_config(path) -> NetworkConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"{path}: {e.strerror}") from None
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from None
    try:
        return parse_config(raw)
    except ConfigError as e:
        raise ConfigError(f"{path}: {e}") from None


def preset_path(name: str = "trieste-g20") -> Path:
    return Path(str(resources.files("qkdnet") / "presets" / f"{name}.json"))


def load_preset(name: str = "trieste-g20") -> NetworkConfig:
    return load_config(preset_path(name))
