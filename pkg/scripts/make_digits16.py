"""Export the reduced-digits benchmark as an IDX pair.

Takes scikit-learn's 8x8 handwritten digits (classes 0..5), upscales each
image 2x to 16x16, adds seeded Gaussian pixel noise so the duplicated pixels
do not inflate the robustness margins, quantizes to uint8 range and writes
the train split as IDX files. Everything downstream (training, certification,
attack experiments) loads the result through the normal idx dataset path, so
this script is the only place scikit-learn is touched.

Usage: python scripts/make_digits16.py [outdir]   (default: data/digits16)
"""
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from fedcert.data import LabeledDataset, save_idx


def build_digits16(classes: int = 6, noise: float = 0.05, seed: int = 11) -> LabeledDataset:
    from sklearn.datasets import load_digits

    d = load_digits()
    keep = d.target < classes
    x8 = (d.images[keep] / 16.0).astype(np.float64)
    labels = d.target[keep].astype(np.int64)
    rng = np.random.default_rng(seed)
    x = np.kron(x8, np.ones((2, 2))) + rng.normal(0, noise, size=(len(labels), 16, 16))
    # quantize to the uint8 grid so the IDX round trip is exact
    x = np.round(np.clip(x, 0.0, 1.0) * 255.0) / 255.0
    order = rng.permutation(len(labels))
    return LabeledDataset(images=x[order][:, None, :, :], labels=labels[order],
                          name="digits16")


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    outdir = Path(args[0]) if args else Path("data/digits16")
    outdir.mkdir(parents=True, exist_ok=True)
    data = build_digits16()
    save_idx(data, outdir / "images.idx", outdir / "labels.idx")
    print(f"wrote {len(data.labels)} images to {outdir}/(images|labels).idx")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
