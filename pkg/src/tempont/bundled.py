"""Access to the model and scenario files shipped inside the package."""

from __future__ import annotations

from importlib import resources
from pathlib import Path


def model_path(name: str) -> Path:
    """Filesystem path of a bundled model (``tpcc``, ``hlf``, ``tpcc-hlf-bridge``)."""
    return _data_path("models", name)


def scenario_path(name: str) -> Path:
    """Filesystem path of a bundled simulation scenario config."""
    return _data_path("scenarios", name)


def list_bundled() -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    for kind in ("models", "scenarios"):
        folder = resources.files("tempont") / kind
        out[kind] = sorted(p.name for p in folder.iterdir() if p.name.endswith(".json"))
    return out


def _data_path(kind: str, name: str) -> Path:
    if not name.endswith(".json"):
        name += ".json"
    path = resources.files("tempont") / kind / name
    if not path.is_file():
        known = ", ".join(list_bundled()[kind])
        raise FileNotFoundError(f"no bundled {kind[:-1]} {name!r} (have: {known})")
    return Path(str(path))
