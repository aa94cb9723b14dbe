import numpy as np
import pytest

from dsmatch import SceneSpec, build_index, make_scene


@pytest.fixture(scope="session")
def terrain_scene():
    """Small ridged-terrain scene: mesh, exact sample cloud, index."""
    mesh, cloud = make_scene(
        SceneSpec(kind="ridged-terrain", extent_x=20.0, extent_y=20.0, gsd=0.5, amplitude=1.5, seed=3)
    )
    return mesh, cloud, build_index(mesh)


@pytest.fixture(scope="session")
def blocks_scene():
    """Building-blocks scene with roof edges, large enough for mm-level recovery."""
    mesh, cloud = make_scene(
        SceneSpec(kind="building-blocks", extent_x=60.0, extent_y=60.0, gsd=0.5, amplitude=6.0, seed=11)
    )
    return mesh, cloud, build_index(mesh)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
