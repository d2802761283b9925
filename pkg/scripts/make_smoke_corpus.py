"""Regenerate the bundled 256x256 smoke corpus from scikit-image sample data."""
from pathlib import Path

import numpy as np
import skimage.data as data
from PIL import Image

OUT = Path(__file__).resolve().parents[1] / "src" / "caesr" / "data" / "smoke"

# name -> (loader, downscale-before-crop, crop top-left)
SOURCES = {
    "astronaut": (data.astronaut, 2, (0, 0)),
    "chelsea": (data.chelsea, 1, (20, 100)),
    "coffee": (data.coffee, 1, (80, 180)),
    "rocket": (data.rocket, 1, (120, 190)),
    "ihc": (data.immunohistochemistry, 1, (128, 128)),
    "hubble": (data.hubble_deep_field, 2, (100, 120)),
    "retina": (data.retina, 4, (48, 48)),
    "camera": (data.camera, 2, (0, 0)),
}


def main():
    OUT.mkdir(parents=True, exist_ok=True)
    for name, (loader, down, (top, left)) in SOURCES.items():
        img = loader()
        if img.ndim == 2:
            img = np.stack([img] * 3, axis=-1)
        im = Image.fromarray(img[..., :3])
        if down > 1:
            im = im.resize((im.width // down, im.height // down), Image.LANCZOS)
        im.crop((left, top, left + 256, top + 256)).save(OUT / f"{name}.png")


if __name__ == "__main__":
    main()
