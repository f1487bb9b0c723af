"""Run the whole pipeline on synthetic traffic and print the report.

Stages: ingest -> kg -> corpus -> pretrain -> train -> evaluate. Every
artifact is hashed into manifest.json; run this script twice and the
second run finds everything up to date.

    python demos/03_pipeline.py [out_dir]
"""

import logging
import sys

from trafficsem import pipeline

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = sys.argv[1] if len(sys.argv) > 1 else "demo_run"

cfg = pipeline.PipelineConfig(
    synth={"num_classes": 4, "per_class": 300, "seed": 0},
    pretrain={"steps": 300},
    reasoner={"steps": 300},
)
root = pipeline.run_pipeline(cfg, out, resume=True)
print()
print(pipeline.report(root))
