"""Size and compute of the backbone next to SqueezeNet 1.0, at 224x224."""
from lrfdet.profiler import profile_network, rfdnet_profile, squeezenet_arch

rfd = rfdnet_profile(224)
print(rfd.table())

sq = profile_network(squeezenet_arch(), 224)
print(f"SqueezeNet 1.0: {sq.params:,} params, {sq.megabytes:.2f} MB ({sq.mebibytes:.2f} MiB), "
      f"{sq.mult_adds / 1e6:.1f}M mult-adds")
print(f"parameter ratio {sq.params / rfd.params:.2f}, compute ratio {sq.mult_adds / rfd.mult_adds:.2f}")
