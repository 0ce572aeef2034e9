"""Name-keyed registries for pipeline stages and baseline trainers."""

from typing import Generic, TypeVar

from core.errors import UsageError

T = TypeVar("T")


class Registry(Generic[T]):
    """Registry of named entries."""

    def __init__(self, kind: str):
        self.kind = kind
        self._entries: dict[str, T] = {}

    def register(self, name: str, entry: T) -> T:
        """Register an entry."""
        self._entries[name] = entry
        return entry

    def unregister(self, name: str) -> bool:
        if name in self._entries:
            del self._entries[name]
            return True
        return False

    def get(self, name: str) -> T:
        """Entry by name; unknown names are a usage error."""
        try:
            return self._entries[name]
        except KeyError:
            raise UsageError(f"unknown {self.kind} '{name}' (known: {', '.join(self.get_names())})") from None

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def get_names(self) -> list[str]:
        return list(self._entries)


stages: Registry = Registry("stage")
baselines: Registry = Registry("baseline")
