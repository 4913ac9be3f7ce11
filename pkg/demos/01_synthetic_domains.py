"""
Two synthetic domains
=====================

A toy stand-in for a pair of re-ID datasets: sprites whose clothing colours
carry the identity, rendered over two different backgrounds, with a hue
rotation and darkening on the target side. The two train sets hold different
people, as two real datasets would. Everything below runs in a few seconds.

    python demos/01_synthetic_domains.py [out_dir]
"""
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from translearn.datamodel import SyntheticConfig, generate_synthetic, load_dataset, tree_digest

out = Path(sys.argv[1] if len(sys.argv) > 1 else "data/toy")

##############################################################################
# Generate. The output is a pure function of the config, so a second call
# rewrites nothing and the tree digest stays put.

config = SyntheticConfig()
records = generate_synthetic(config, out)
print(f"{len(records)} images under {out}, digest {tree_digest(out)[:16]}")

##############################################################################
# Each domain uses the usual three-folder layout and Market-style file names
# (``0003_c2s1_000041_00.png`` -> person 3, camera 2).

src = load_dataset(out / "source", "synthetic", "source")
tgt = load_dataset(out / "target", "synthetic", "target")
for ds in (src, tgt):
    print(ds.domain.value, ds.counts(), "train ids:", len(ds.id_map))
print("first sample:", src.train[0].image_path.name, "pid", src.train[0].person_id, "cam", src.train[0].camera_id)

##############################################################################
# Train identities are re-indexed to contiguous class labels.

print("pid -> class:", {p: src.id_map.pid_to_index[p] for p in src.id_map.index_to_pid[:4]}, "...")

##############################################################################
# A contact sheet of the query split, which renders the same test people in
# both domains: top row source, bottom row target, one image per identity.

def first_of_each(ds, n=10):
    seen, picks = set(), []
    for s in ds.query:
        if len(seen) == n:
            break
        if s.person_id not in seen:
            seen.add(s.person_id)
            picks.append(np.asarray(Image.open(s.image_path)))
    return np.concatenate(picks, axis=1)

sheet = np.concatenate([first_of_each(src), first_of_each(tgt)], axis=0)
Image.fromarray(sheet).resize((sheet.shape[1] * 2, sheet.shape[0] * 2), Image.NEAREST).save(out / "contact_sheet.png")
print("wrote", out / "contact_sheet.png")
