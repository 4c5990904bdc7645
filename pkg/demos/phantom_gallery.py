"""
Phantom gallery
===============

Generate a handful of synthetic cross-sections and look at how the
generator knobs change them. Each phantom is a bright implant disk,
a trabecular bone annulus around it, and (optionally) radial streak
artifacts that mimic metal scatter. Images land in demos/output/.
"""

from pathlib import Path

import numpy as np

import microvolumetry as mv

out = Path(__file__).parent / "output" / "gallery"
out.mkdir(parents=True, exist_ok=True)

variants = {
    "default": mv.PhantomSpec(size=128, seed=1),
    "dense_bone": mv.PhantomSpec(size=128, seed=1, bone_density=0.8),
    "sparse_bone": mv.PhantomSpec(size=128, seed=1, bone_density=0.2),
    "no_streaks": mv.PhantomSpec(size=128, seed=1, artifact_streaks=0),
    "heavy_streaks": mv.PhantomSpec(size=128, seed=1, artifact_streaks=10),
}

for name, spec in variants.items():
    image, mask = mv.generate_phantom(spec)
    mv.write_pgm(image, out / f"{name}.pgm")
    mv.write_pgm(mask, out / f"{name}_mask.pgm")
    counts = np.bincount(mask.ravel(), minlength=3)
    print(f"{name:>14}: background {counts[0]:>5}  bone {counts[1]:>5}  implant {counts[2]:>4}")

print(f"\nwrote {2 * len(variants)} PGM files to {out}")
print("masks use 0=background, 1=bone, 2=implant (view with any PNM viewer)")
