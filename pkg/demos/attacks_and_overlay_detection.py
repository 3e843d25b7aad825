"""
Attacking an image and finding a pasted copy
============================================

"""

import numpy as np
from copydet import synth
from copydet.imaging import AttackSpec, apply_attack, to_grayscale
from copydet.preprocess import detect_pasted_region, route_variants

# a procedural reference: random shapes over a textured background
ref = synth.procedural_image(seed=1, width=360, height=320)
print("reference", ref.width, "x", ref.height)

# every attack is a (kind, params, seed) record, so it can be replayed exactly
for spec in [AttackSpec("rotate", {"degrees": 20}), AttackSpec("gaussian-blur", {"sigma": 1.5}),
             AttackSpec("jpeg-recompress", {"quality": 30}), AttackSpec("flip-h")]:
    img, _ = apply_attack(ref, spec)
    print(f"{spec.kind:16s} -> {img.width}x{img.height}")

# overlay-paste shrinks the reference into a random background and reports the box;
# the detector has to find that rectangle blind.  It misses some pastes, and this
# reference is one of the harder ones, so several draws are shown.
found = None
for seed in range(6):
    rng = np.random.default_rng(seed)
    spec = synth.sample_attack("overlay-paste", rng, (ref.width, ref.height))
    query, record = apply_attack(ref, spec, "ref")
    box = detect_pasted_region(to_grayscale(query))
    print("pasted at", record.box, "-> detected IoU", round(box.iou(record.box), 3) if box else None)
    if box is not None and found is None:
        found, hit = box, query

# routing: the global branch sees the crop, local recall runs on both variants
routed = route_variants(hit, found)
print("global input:", (routed.global_input.width, routed.global_input.height),
      " local variants:", [(v.width, v.height) for v in routed.local_inputs])
