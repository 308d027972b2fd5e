"""Fit the desk detector to one synthetic fault image, then detect on it.

Takes about a minute on one core. Writes the scene and its channel-mean
feature maps to ./overfit_out.
"""
from pathlib import Path

import numpy as np

from lrfdet.backbone import channel_mean_map, tap_output, to_uint8
from lrfdet.detector import DetectorConfig, detect
from lrfdet.synth import SceneSpec, SyntheticCorpus, write_pgm, write_ppm
from lrfdet.train import TrainConfig, train

out = Path("overfit_out")
out.mkdir(exist_ok=True)

image, ann = next(s for s in SyntheticCorpus(SceneSpec(seed=7), 50) if s[1].has_fault)
print("planted:", [(o.cls, o.fault, o.box) for o in ann.objects])
write_ppm(out / "scene.ppm", image)

config = TrainConfig.desk(images_per_iter=1).with_total_iters(300)
state = train([(image, ann)], config, DetectorConfig.desk())
for row in state.log[::50]:
    print(f"iter {row['iter']:4d}  lr {row['lr']:.4f}  loss {row['total']:.4f}")

for det in detect(state.params, image[None]):
    print(f"{det.class_name:6s} {det.score:.3f} {np.round(det.box, 1)}")

for tap in ("MP1", "MP3", "MP5"):
    fmap = channel_mean_map(tap_output(state.params, image[None], tap, state.params.config.inference_mode))
    write_pgm(out / f"{tap}.pgm", to_uint8(fmap))
print("feature maps in", out)
