import numpy as np
import pytest
from PIL import Image


def _synth_image(rng, base_color, size=64):
    """Noisy color-block image with a few shapes, deterministic per rng."""
    px = np.tile(np.array(base_color, dtype=np.float64), (size, size, 1))
    px += rng.normal(0, 18.0, px.shape)
    # A couple of rectangles so patch statistics vary spatially.
    for _ in range(3):
        x0, y0 = rng.integers(0, size - 12, 2)
        w, h = rng.integers(6, 12, 2)
        px[y0:y0 + h, x0:x0 + w] += rng.uniform(-60, 60, 3)
    return Image.fromarray(np.clip(px, 0, 255).astype(np.uint8), "RGB")


@pytest.fixture
def toy_dataset(tmp_path):
    """Two classes, 3 images each, visually distinct color statistics."""
    rng = np.random.default_rng(7)
    specs = {"crimson_widget": (190, 40, 40), "teal_gadget": (30, 150, 160)}
    for name, color in specs.items():
        folder = tmp_path / "data" / name
        folder.mkdir(parents=True)
        for i in range(3):
            _synth_image(rng, color).save(folder / f"img_{i:02d}.png")
    return tmp_path / "data"
