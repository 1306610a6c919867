"""Generate each synthetic dataset family and verify its oracle by hand.

The three families cover the three translation layouts: silhouette images
to styled fills, short captions to styled shape images, and content
curves to spectral-envelope-styled frame sequences.  Style labels live in
a sidecar consumed only by the evaluation oracles; the model never sees
them.

Run:  python demos/01_datasets_and_oracles.py
"""

import os
import tempfile

import numpy as np

from m3dgan.synthdata import (
    CaptionImageSpec,
    EnvelopeOracle,
    PaletteOracle,
    SequenceStyleSpec,
    ShapeClassOracle,
    ShapeStyleSpec,
    export_ppm,
    gen_colored_shapes,
    gen_sequence_styles,
    gen_toy_captions,
    load_dataset,
    save_dataset,
)

out = tempfile.mkdtemp(prefix="m3d_demo_")

print("== colored shapes (image -> image) ==")
shapes = gen_colored_shapes(ShapeStyleSpec(resolution=32, k_styles=4, n_examples=200, seed=11))
palette_oracle = PaletteOracle(4)
shape_oracle = ShapeClassOracle()
hits_style = sum(palette_oracle.classify(ex.target) == s for ex, s in zip(shapes.examples, shapes.style_labels))
hits_shape = sum(shape_oracle.classify(ex.source) == c for ex, c in zip(shapes.examples, shapes.content_labels))
print(f"  {len(shapes)} examples; style oracle {hits_style}/{len(shapes)}, shape oracle {hits_shape}/{len(shapes)}")
export_ppm(shapes.examples[0].target, os.path.join(out, "shape0.ppm"))
print(f"  wrote {out}/shape0.ppm for eyeballing")

print("== toy captions (text -> image) ==")
captions = gen_toy_captions(CaptionImageSpec(resolution=32, n_examples=100, seed=11))
words = [captions.vocab[int(t)] for t in captions.examples[0].source.data]
print(f"  vocab: {captions.vocab}")
print(f"  example caption ids {captions.examples[0].source.data} -> {' '.join(w for w in words if w != '<pad>')}")

print("== styled sequences (sequence -> sequence) ==")
waves = gen_sequence_styles(SequenceStyleSpec(n_examples=100, seed=11))
env_oracle = EnvelopeOracle(4, 8)
hits = sum(env_oracle.classify(ex.target) == s for ex, s in zip(waves.examples, waves.style_labels))
print(f"  envelope oracle {hits}/{len(waves)}")
a, b = waves.examples[0], waves.examples[1]
print(f"  pair shares content: {np.array_equal(a.source.data, b.source.data)}; styles "
      f"{waves.style_labels[0]} vs {waves.style_labels[1]}")

print("== persistence round-trip ==")
save_dataset(shapes, os.path.join(out, "shapes"))
back = load_dataset(os.path.join(out, "shapes"))
print(f"  save -> load equal: {back.equals(shapes)}")
print(f"artifacts in {out}")
