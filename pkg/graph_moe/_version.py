from pathlib import Path

import tomlkit

PYPROJECT_PATH = Path(__file__).parent.parent / "pyproject.toml"


def read_version(pyproject_path: Path = PYPROJECT_PATH) -> str:
    """Version string from the poetry manifest, recorded in every run manifest."""
    with open(pyproject_path, "r") as pyproject:
        manifest = tomlkit.parse(pyproject.read())
    return str(manifest["tool"]["poetry"]["version"])


__VERSION__ = read_version()
