"""TOML configuration for backend roles and pipeline defaults.

Secrets never live in the file: each backend role names the environment
variable that holds its API key. Example:

    [backend.think]
    base_url = "http://localhost:8000/v1"
    model = "some-model"
    key_env = "THINK_API_KEY"

    [runtime]
    strategy = "revert"
    clock = "wall"
    delimiters = ["\n"]
    bov = "<bov>"
    eov = "<eov>"
    con = "<con>"
    max_verbal_tokens = 256
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib  # py311+
except ModuleNotFoundError:  # pragma: no cover - environment-dependent
    import tomli as tomllib

from .interleave import ControlTokens

ROLES = ("think", "verbalizer", "builder", "judge")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class BackendRole:
    base_url: str
    model: str
    key_env: str | None = None

    def api_key(self) -> str | None:
        if not self.key_env:
            return None
        return os.environ.get(self.key_env)


@dataclass(frozen=True)
class CliConfig:
    backends: dict[str, BackendRole] = field(default_factory=dict)
    control_tokens: ControlTokens = field(default_factory=ControlTokens)
    strategy: str = "revert"
    clock: str = "wall"
    delimiters: tuple[str, ...] = ("\n",)
    max_verbal_tokens: int = 256

    def require_backend(self, role: str) -> BackendRole:
        if role not in self.backends:
            raise ConfigError(
                f"backend role {role!r} is not configured; add a [backend.{role}] section"
            )
        return self.backends[role]


def load_config(path: str | Path | None) -> CliConfig:
    """Load configuration; a missing path yields built-in defaults."""
    if path is None:
        return CliConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with p.open("rb") as f:
        data = tomllib.load(f)
    backends: dict[str, BackendRole] = {}
    for role, section in (data.get("backend") or {}).items():
        if role not in ROLES:
            raise ConfigError(f"unknown backend role {role!r}; expected one of {ROLES}")
        try:
            backends[role] = BackendRole(
                base_url=section["base_url"],
                model=section["model"],
                key_env=section.get("key_env"),
            )
        except KeyError as exc:
            raise ConfigError(f"[backend.{role}] missing field {exc}") from exc
    runtime = data.get("runtime") or {}
    tokens = ControlTokens(
        bov=runtime.get("bov", "<bov>"),
        eov=runtime.get("eov", "<eov>"),
        con=runtime.get("con", "<con>"),
    )
    return CliConfig(
        backends=backends,
        control_tokens=tokens,
        strategy=runtime.get("strategy", "revert"),
        clock=runtime.get("clock", "wall"),
        delimiters=tuple(runtime.get("delimiters", ["\n"])),
        max_verbal_tokens=int(runtime.get("max_verbal_tokens", 256)),
    )


def http_backend_for(config: CliConfig, role: str):
    from .backends import HttpBackend

    spec = config.require_backend(role)
    return HttpBackend(
        base_url=spec.base_url, model=spec.model, api_key=spec.api_key()
    )
