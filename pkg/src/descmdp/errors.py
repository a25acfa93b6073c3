"""Error categories surfaced by the CLI as exit codes plus a JSON line on stderr."""

from __future__ import annotations

EXIT_CODES = {
    "internal": 1,
    "config": 2,
    "io": 3,
    "contract": 4,
    "scene": 5,
    "weights": 6,
    "archive": 7,
}


class HarnessError(Exception):
    """An error with a machine-readable category and optional path."""

    category = "internal"

    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = None if path is None else str(path)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.category]

    def to_dict(self) -> dict:
        d = {"error": self.category, "exit_code": self.exit_code, "message": str(self)}
        if self.path is not None:
            d["path"] = self.path
        return d


class ConfigError(HarnessError):
    category = "config"


class ArchiveIOError(HarnessError):
    category = "io"


class ContractError(HarnessError):
    category = "contract"


class SceneError(HarnessError):
    category = "scene"


class WeightsError(HarnessError):
    category = "weights"


class ArchiveError(HarnessError):
    category = "archive"
