import numpy as np
import pytest

from sslprof import synthgen
from sslprof.dataio import FLUORESCENT, CellImage


def random_image(rng, h=16, w=16, kinds=(FLUORESCENT,) * 5) -> CellImage:
    pixels = rng.random((h, w, len(kinds)), dtype=np.float32)
    return CellImage(pixels=pixels, channel_kinds=tuple(kinds))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """One cell line, one plate, 6 wells x 9 sites of 32x32 images."""
    out = tmp_path_factory.mktemp("small_data")
    cfg = synthgen.SynthConfig(
        n_cell_lines=1,
        n_plates_per_line=1,
        n_well_positions=6,
        n_perturbations=3,
        sites_per_well=9,
        image_size=(32, 32),
        seed=7,
        nuisance_strength=1.0,
    )
    manifest = synthgen.generate_dataset(cfg, out)
    return cfg, manifest
