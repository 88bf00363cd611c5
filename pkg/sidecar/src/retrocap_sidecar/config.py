"""Service configuration: listen address, model roles, batching."""

from __future__ import annotations

import os
from dataclasses import dataclass

LISTEN_ENV = "MEACAP_LISTEN"
DEFAULT_LISTEN = "127.0.0.1:8421"


class ConfigError(ValueError):
    """Raised when the service configuration is unusable."""


def parse_listen(value: str) -> tuple[str, int]:
    """Split a host:port listen address, validating the port."""
    host, sep, port_text = value.rpartition(":")
    if not sep or not host:
        raise ConfigError(f"listen address must be host:port, got {value!r}")
    try:
        port = int(port_text)
    except ValueError:
        raise ConfigError(f"listen port must be an integer, got {port_text!r}") from None
    if not 1 <= port <= 65535:
        raise ConfigError(f"listen port out of range: {port}")
    return host, port


@dataclass(frozen=True)
class ServiceConfig:
    """Everything serve() needs: where to listen, which models fill the
    four roles, and how requests are batched.

    The model identifiers are deployment hooks; the bundled lite backend
    ignores them and synthesizes deterministic embeddings instead.
    """

    host: str = "127.0.0.1"
    port: int = 8421
    backend: str = "lite"
    cross_modal_model: str = "clip-vit-base-patch32"
    sentence_model: str = "all-MiniLM-L6-v2"
    lm_model: str = "keywords-to-sentence-bart"
    scorer_model: str = "blip2-image-text-matching"
    device: str = "cpu"
    max_batch: int = 256
    seed: int = 0

    def __post_init__(self) -> None:
        if not 1 <= self.port <= 65535:
            raise ConfigError(f"port out of range: {self.port}")
        if self.max_batch < 1:
            raise ConfigError(f"max_batch must be >= 1, got {self.max_batch}")

    @property
    def listen(self) -> str:
        return f"{self.host}:{self.port}"

    @classmethod
    def from_environment(cls, **overrides) -> "ServiceConfig":
        """Defaults, then MEACAP_LISTEN, then explicit overrides."""
        listen = overrides.pop("listen", None) or os.environ.get(LISTEN_ENV)
        if listen:
            host, port = parse_listen(listen)
            overrides.setdefault("host", host)
            overrides.setdefault("port", port)
        return cls(**overrides)
