"""
SIFT keypoints and ratio-test matching
======================================

How many keypoints survive a rotation, a downscale and a mirror flip.
"""

from copydet import synth
from copydet.imaging import flip_horizontal, resize_min_edge, rotate, to_grayscale
from copydet.matcher import QueryVariant, match_with_flip, pairwise_match_count
from copydet.sift import extract

img = synth.procedural_image(seed=7, width=320, height=320)
gray = to_grayscale(img)
ref = extract(gray, image_id="ref")
print(len(ref), "keypoints; columns are x, y, scale, orientation, response")
print(ref.keypoints[:3].round(2))

# a query descriptor matches when nearest / second-nearest distance < 1/1.8
for name, q in [("rotate 30", to_grayscale(rotate(img, 30))),
                ("half size", resize_min_edge(gray, 160)),
                ("mirror", flip_horizontal(gray))]:
    fq = extract(q)
    n = pairwise_match_count(fq, ref)
    print(f"{name:10s} {n:4d} / {len(fq)} matched ({n / len(fq):.0%})")

# SIFT is not mirror invariant, so the matcher also tries the flipped query
mirror = QueryVariant(flip_horizontal(img), target_edge=320)
print("mirror, plain:", pairwise_match_count(mirror.features, ref), " with flip:", match_with_flip(mirror, ref))
