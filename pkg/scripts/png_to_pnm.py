"""Convert an image/mask folder (PNG, JPG, ...) into PPM/PGM files plus a manifest.

Images and masks are paired by file stem:

    python scripts/png_to_pnm.py --images DUTS-TE/img --masks DUTS-TE/gt --out data/duts_te

Needs Pillow (``pip install Pillow``); graftnet itself reads only PPM/PGM.
"""

import argparse
from pathlib import Path

import numpy as np
from PIL import Image

from graftnet.data import DatasetManifest, write_manifest, write_pnm

EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


def _by_stem(folder):
    return {p.stem: p for p in sorted(Path(folder).iterdir()) if p.suffix.lower() in EXTS}


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--images", required=True)
    ap.add_argument("--masks", required=True)
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    images, masks = _by_stem(args.images), _by_stem(args.masks)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for stem in sorted(images.keys() & masks.keys()):
        img = np.asarray(Image.open(images[stem]).convert("RGB"))
        msk = np.asarray(Image.open(masks[stem]).convert("L"))
        if img.shape[:2] != msk.shape:
            print(f"skip {stem}: image {img.shape[:2]} vs mask {msk.shape}")
            continue
        ip, mp = out / f"{stem}.ppm", out / f"{stem}.pgm"
        write_pnm(ip, img)
        write_pnm(mp, msk)
        entries.append((stem, ip, mp))
    missing = (images.keys() ^ masks.keys())
    if missing:
        print(f"{len(missing)} files without a partner were ignored")
    write_manifest(DatasetManifest(out, entries), out / "manifest.tsv")
    print(f"wrote {len(entries)} pairs to {out / 'manifest.tsv'}")


if __name__ == "__main__":
    main()
