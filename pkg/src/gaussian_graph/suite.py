"""The standard synthetic suite shipped with the package."""

from __future__ import annotations

import os
from importlib import resources

from .synth import load_scene_file

SUITE = ("room", "spheres", "tilted_plane")


def scene_path(name: str) -> str:
    if os.path.exists(name):
        return name
    path = resources.files("gaussian_graph") / "data" / f"{name}.json"
    if not path.is_file():
        raise FileNotFoundError(f"no built-in scene {name!r} and no such file")
    return str(path)


def load_scene(name: str):
    """(scene, rig) for a built-in suite name or a scene JSON path."""
    return load_scene_file(scene_path(name))


def standard_suite():
    return [(name, *load_scene(name)) for name in SUITE]
