import numpy as np
import pytest

from alignkit import ops
from alignkit.synthdata import SceneParams, make_scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def translated_pair(shift, size=64, seed=3):
    """Two frames of a textured scene, the second displaced by `shift` px.

    The backward flow satisfying warp(b, flow) = a is exactly `shift`.
    """
    params = SceneParams(seed=seed, size=(size, size), frames=2,
                         velocity=(float(shift[0]), float(shift[1])))
    frames, flows = make_scene(params)
    return frames[0], frames[1], flows[0]
