"""Full CLI pipeline on the toy corpus, then correlate set statistics with a made-up delta.

Run: python demos/05_statistics_and_report.py [outdir]
"""
import json
import shutil
import sys
import tempfile
from importlib import resources
from pathlib import Path

from calset.cli import main, run_toy_pipeline

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="calset-demo-"))
out.mkdir(parents=True, exist_ok=True)
for name in ("toy_examples.jsonl", "toy_beams.jsonl"):
    with resources.as_file(resources.files("calset") / "data" / name) as p:
        shutil.copy(p, out)

strategies = ["random:sample", "quality:high", "margin:max", "margin:min", "diversity:max", "likelihood:top_beam"]
run_toy_pipeline(out, seed=0, strategies={"relevance": strategies, "faithfulness": ["margin:max"]})
print(f"artifacts in {out}:")
for p in sorted(out.iterdir()):
    print("  ", p.name)

# pretend each strategy was used for calibration and produced this downstream change
# keys are the stats file names without the .stats.jsonl suffix
deltas = {"relevance_random-sample": 0.02, "relevance_quality-high": 0.05, "relevance_margin-max": 0.12,
          "relevance_margin-min": -0.04, "relevance_diversity-max": 0.07, "relevance_likelihood-top_beam": 0.01}
(out / "deltas.json").write_text(json.dumps(deltas))
stats_files = [str(out / f"{run}.stats.jsonl") for run in deltas]
main(["report", *stats_files, "--downstream", str(out / "deltas.json"), "--out", str(out / "report_with_deltas.jsonl")])
