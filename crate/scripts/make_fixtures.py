"""Regenerate the natural-image fixtures under crates/core/tests/data/natural.

The crops come from the public-domain sample images bundled with
scikit-image, scikit-learn and matplotlib. Test images and training crops
are taken from different source photographs so the two sets never overlap.

Test references must be normally exposed: mean intensity within [0.4, 0.8]
after resizing. Each test image is the full center square when that
qualifies, otherwise the most central half-size crop that does.
"""

import os

import numpy as np
from PIL import Image

SK = "/usr/local/lib/python3.10/dist-packages/skimage/data"
SKL = "/usr/local/lib/python3.10/dist-packages/sklearn/datasets/images"
MPL = "/usr/local/lib/python3.10/dist-packages/matplotlib/mpl-data/sample_data"
OUT = os.path.join(os.path.dirname(__file__), "..", "crates", "core", "tests", "data", "natural")
RES = 128
EXPOSED = (0.4, 0.8)


def load(path):
    return Image.open(path).convert("RGB")


def crop_resize(img, box):
    return img.crop(box).resize((RES, RES), Image.LANCZOS)


def center_square(img):
    w, h = img.size
    s = min(w, h)
    return ((w - s) // 2, (h - s) // 2, (w - s) // 2 + s, (h - s) // 2 + s)


def exposed_crop(img):
    w, h = img.size
    s = min(w, h)
    candidates = [center_square(img)]
    hs = s // 2
    grid = []
    for i in range(5):
        for j in range(5):
            x, y = round(i * (w - hs) / 4), round(j * (h - hs) / 4)
            grid.append(((x + hs / 2 - w / 2) ** 2 + (y + hs / 2 - h / 2) ** 2, x, y))
    candidates += [(x, y, x + hs, y + hs) for _, x, y in sorted(grid)]
    for box in candidates:
        crop = crop_resize(img, box)
        if EXPOSED[0] <= np.asarray(crop, dtype=float).mean() / 255 <= EXPOSED[1]:
            return crop
    raise ValueError("no normally exposed crop")


def main():
    test = {
        "chelsea": load(f"{SK}/chelsea.png"),
        "coffee": load(f"{SK}/coffee.png"),
        "astronaut": load(f"{SK}/astronaut.png"),
        "flower": load(f"{SKL}/flower.jpg"),
        "china": load(f"{SKL}/china.jpg"),
    }
    os.makedirs(f"{OUT}/test", exist_ok=True)
    for name, img in test.items():
        exposed_crop(img).save(f"{OUT}/test/{name}.png")

    train_sources = {
        "rocket": load(f"{SK}/rocket.jpg"),
        "hopper": load(f"{MPL}/grace_hopper.jpg"),
        "moto_l": load(f"{SK}/motorcycle_left.png"),
        "moto_r": load(f"{SK}/motorcycle_right.png"),
        "ihc": load(f"{SK}/ihc.png"),
        "retina": load(f"{SK}/retina.jpg"),
    }
    os.makedirs(f"{OUT}/train", exist_ok=True)
    rng = np.random.default_rng(2024)
    count = 0
    per_source = {"rocket": 4, "hopper": 3, "moto_l": 3, "moto_r": 2, "ihc": 2, "retina": 2}
    for name, img in train_sources.items():
        w, h = img.size
        for k in range(per_source[name]):
            s = int(rng.integers(min(w, h) // 3, min(w, h) // 2 + 1))
            x = int(rng.integers(0, w - s + 1))
            y = int(rng.integers(0, h - s + 1))
            crop_resize(img, (x, y, x + s, y + s)).save(f"{OUT}/train/{name}_{k}.png")
            count += 1
    print(f"wrote {len(test)} test and {count} train images")


if __name__ == "__main__":
    main()
