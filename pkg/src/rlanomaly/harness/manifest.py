from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .. import __version__


@dataclass
class RunManifest:
    """What a run was configured with and which files it wrote."""

    name: str
    config_hash: str
    code_version: str
    seeds: list
    config: dict
    started: str
    finished: str | None = None
    artifacts: list = field(default_factory=list)

    @classmethod
    def start(cls, config, name: str) -> RunManifest:
        return cls(
            name=name,
            config_hash=config.digest(),
            code_version=__version__,
            seeds=list(config.seeds),
            config=config.canonical(),
            started=_now(),
        )

    def add(self, path) -> Path:
        path = Path(path)
        if str(path) not in self.artifacts:
            self.artifacts.append(str(path))
        return path

    def finish(self, path) -> Path:
        self.finished = _now()
        path = Path(path)
        self.add(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        return path

    @classmethod
    def load(cls, path) -> RunManifest:
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")
