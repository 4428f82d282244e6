import numpy as np
import pytest

from jolimas.detect import detect_in_image, segment
from jolimas.shading import (
    Material,
    MorphTemplate,
    Scene,
    gen_plane_cylinder_sequence,
    render,
)

DEFAULT_TAU = 0.7


@pytest.fixture(scope="session")
def plane_scene():
    """Default plane scene (kappa = 0 of the morph family)."""
    return gen_plane_cylinder_sequence(steps=2, views_per_step=6, kappa_max=0.5)[0]


@pytest.fixture(scope="session")
def plane_render(plane_scene):
    view = plane_scene.views[0]
    return plane_scene, view, render(plane_scene, view)


@pytest.fixture(scope="session")
def plane_observation(plane_render):
    scene, view, img = plane_render
    obs = detect_in_image(view, scene.surface, img, DEFAULT_TAU)
    return scene, view, img, obs
