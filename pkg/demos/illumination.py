"""How much do the early feature maps change when a scene is darkened or brightened?

Prints cosine similarity between channel-mean maps of the scaled and
original image at three taps, for a freshly initialized backbone.
"""
from lrfdet.detector import DetectorConfig, build_detector
from lrfdet.profiler import illumination_similarity
from lrfdet.synth import SceneSpec, generate_scene

params = build_detector(DetectorConfig.desk(), seed=0)
image, _ = generate_scene(SceneSpec(seed=1), 0)
table = illumination_similarity(params, image, [0.5, 0.8, 1.25, 2.0])
print("alpha   " + "  ".join(f"{t:>6s}" for t in next(iter(table.values()))))
for alpha, row in table.items():
    print(f"{alpha:5.2f}   " + "  ".join(f"{v:6.3f}" for v in row.values()))
