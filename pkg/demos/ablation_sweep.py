"""
A small ablation sweep through the command line
===============================================

Same as ``dpml gen-data`` followed by ``dpml ablate``, driven from Python.
The sweep directory keeps one cell per (row, seed) so an interrupted sweep
resumes where it stopped.
"""

import sys
import tempfile
from pathlib import Path

from dpml.cli import main

work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="dpml_"))
cfg = work / "sweep.cfg"
work.mkdir(parents=True, exist_ok=True)
cfg.write_text("""\
synth_n_stocks = 8
synth_n_days = 60
synth_slots_per_day = 24
synth_base_range = 9.5,10.5
alpha = 1e-4
beta = 0.5
lr = 1e-4
epochs = 10
spans_per_stock = 8
latent_dim = 4
""")

main(["gen-data", "--config", str(cfg), "--out", str(work / "panel.csv")])
main(["ablate", "--config", str(cfg), "--data", str(work / "panel.csv"), "--out", str(work / "sweep")])
print(f"results in {work / 'sweep'}")
