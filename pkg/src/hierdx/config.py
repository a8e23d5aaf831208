"""Tool configuration and structured logging."""

from __future__ import annotations

import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from hierdx.generation import DEFAULT_CREDENTIAL_ENV
from hierdx.reward import GRAN_SCALE, TAG_PRESETS

DATA_DIR = Path(__file__).parent / "data"


@dataclass
class ToolConfig:
    taxonomy: str = str(DATA_DIR / "taxonomy.json")
    ddx: str = str(DATA_DIR / "ddx.json")
    generator_url: str | None = None
    generator_model: str = "gpt-4o-mini"
    generator_temperature: float = 0.7
    generator_timeout: float = 30.0
    generator_retries: int = 2
    credential_env: str = DEFAULT_CREDENTIAL_ENV
    p_local: float = 0.5
    n_opts: int = 4
    gran_scale: float = GRAN_SCALE
    tag_preset: str = "rl"
    seeds: dict[str, int] = field(default_factory=lambda: {"synthesize": 0, "mcq": 0, "simulate": 0})

    def __post_init__(self) -> None:
        if not 0 < self.gran_scale <= 1:
            raise ValueError("gran_scale must lie in (0, 1]")
        if self.n_opts < 2:
            raise ValueError("n_opts must be >= 2")
        if not 0 <= self.p_local <= 1:
            raise ValueError("p_local must lie in [0, 1]")
        if self.tag_preset not in TAG_PRESETS:
            raise ValueError(f"unknown tag preset {self.tag_preset!r}")

    @classmethod
    def load(cls, path: str | Path | None) -> ToolConfig:
        if path is None:
            return cls()
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class JsonFormatter(logging.Formatter):
    """One JSON object per log line."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": round(record.created, 3),
            "level": record.levelname.lower(),
            "logger": record.name,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def setup_logging(level: str = "warning") -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter())
    root = logging.getLogger("hierdx")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False
