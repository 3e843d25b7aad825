"""
Micro-average precision
=======================

"""

from copydet.evalkit import ground_truth_from_pairs, micro_ap

gt = ground_truth_from_pairs([("q1", "r7"), ("q2", "r3"), ("q4", "r1")])
submission = [("q1", "r7", 40), ("q3", "r2", 31), ("q2", "r3", 22), ("q2", "r9", 5)]

curve = micro_ap(submission, gt)
for (rec, prec), score in zip(curve.points, curve.scores):
    print(f"score {score:5.1f}  precision {prec:.3f}  recall {rec:.3f}")
# q4 was never submitted, so recall tops out at 2/3
print("micro AP", round(curve.micro_ap, 4), "= (1/1 + 2/3) / 3")
