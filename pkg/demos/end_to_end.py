"""
End-to-end run through the command line
=======================================

A small corpus, attacked queries plus distractors, then the full three-branch
pipeline and the same run without the global branch.
"""

import sys
import tempfile
from pathlib import Path

from copydet.cli import main

n_refs = int(sys.argv[1]) if len(sys.argv) > 1 else 60
root = Path(tempfile.mkdtemp(prefix="copydet-demo-"))
print("working in", root)

main(["synth", "--count", str(n_refs), "--output", str(root / "refs")])
main(["synth", "--count", str(n_refs // 3), "--prefix", "other", "--seed-offset", "900000",
      "--output", str(root / "others")])
main(["augment", "--references", str(root / "refs"), "--generate", str(n_refs // 3),
      "--kinds", "crop,rotate,flip-h,gaussian-blur,jpeg-recompress,overlay-paste",
      "--distractors", str(root / "others"), "--output", str(root / "set")])
main(["extract", "--corpus", str(root / "refs"), "--output", str(root / "refs.sft")])
main(["index", "--features", str(root / "refs.sft"), "--output", str(root / "refs.ldx")])
main(["embed", "--corpus", str(root / "refs"), "--output", str(root / "refs.gem")])

common = ["--queries", str(root / "set" / "queries"), "--index", str(root / "refs.ldx"),
          "--embeddings", str(root / "refs.gem"), "--ground-truth", str(root / "set" / "ground_truth.csv")]
print("\nall branches:")
main(["run", *common, "--output", str(root / "fused")])
print("\nlocal recall only:")
main(["run", *common, "--branches", "local,crop", "--output", str(root / "local")])
print("\nfirst rows of", root / "fused" / "submission.csv")
print("".join((root / "fused" / "submission.csv").open().readlines()[:6]))
