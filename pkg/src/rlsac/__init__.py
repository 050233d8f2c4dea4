"""Reinforcement-learned minimal-set sampling for robust model fitting."""

from .scenes import F_TASK, LINE_TASK, SceneData, load_scene, make_scene, save_scene

__version__ = "0.1.0"

__all__ = ["F_TASK", "LINE_TASK", "SceneData", "load_scene", "make_scene", "save_scene"]
