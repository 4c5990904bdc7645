"""
Small training run
==================

The full pipeline end to end at toy scale: generate a dataset, train a
depth-1 network for a few epochs, predict, and score the predictions.
Takes well under a minute. The CLI does exactly this via
`microvolumetry gen/train/predict/evaluate`; here we call the library.
"""

from pathlib import Path

import numpy as np

import microvolumetry as mv

root = Path(__file__).parent / "output" / "small_run"
data = root / "data"
root.mkdir(parents=True, exist_ok=True)

mv.make_dataset(data, 12, mv.PhantomSpec(size=32, seed=0), seed=21)
print(f"dataset: 12 pairs at 32x32 under {data}")

config = mv.RunConfig(
    dataset=str(data),
    checkpoint=str(root / "model.ckpt"),
    metrics=str(root / "metrics.csv"),
    depth=1,
    base_channels=8,
    input_size=32,
    epochs=40,
    batch_size=2,
    lr=0.005,
    seed=21,
    split="0.25",
)


def every_tenth(line):
    # the log callback sees one status line plus one CSV row per epoch
    head = line.split(",")[0]
    if not head.isdigit() or int(head) % 10 in (0, 1):
        print(line)


result = mv.run_training(config, log=every_tenth)

# predict on the validation-ish slice of the data and score it
params, net = mv.load_checkpoint(result.checkpoint_path)
counts = np.zeros((3, 3), dtype=np.int64)
for img_path, mask_path in mv.load_manifest(data):
    scores, _ = mv.forward(params, net, mv.image_to_tensor(mv.read_pgm(img_path)),
                           want_cache=False)
    counts += mv.confusion(mv.argmax_channel(scores)[0], mv.read_mask(mask_path))

print(f"\nwhole-dataset accuracy {mv.pixel_accuracy(counts):.4f}")
for k, name in enumerate(("background", "bone", "implant")):
    print(f"dice {name:>10}: {mv.dice(counts, k):.4f}")
print("(depth 1 trades the implant class for speed; the depth-4 configuration")
print(" in the acceptance tests reaches ~0.99 accuracy on held-out phantoms)")
