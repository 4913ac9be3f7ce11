"""
Desk-scale comparison
=====================

Direct transfer, CycleGAN + fine-tuning, SPGAN + fine-tuning and eSPGAN on the
synthetic domains, all starting from the same source-trained learner. One
seed takes tens of minutes on a single CPU core.

    python demos/04_desk_comparison.py [data_dir] [seed ...]
"""
import logging
import sys
import warnings

from translearn.datamodel import generate_synthetic
from translearn.experiment import desk_comparison, toy_config

warnings.filterwarnings("ignore")
logging.basicConfig(level=logging.INFO, format="%(message)s")

data = sys.argv[1] if len(sys.argv) > 1 else "data/toy"
seeds = [int(s) for s in sys.argv[2:]] or [0]

generate_synthetic(toy_config().synthetic, data)

rows = {}
for seed in seeds:
    rows[seed] = desk_comparison(toy_config(seed, data))

##############################################################################
# Target rank-1 (single query, P=1 average pooling).

methods = list(next(iter(rows.values())))
print(f"{'seed':>6}" + "".join(f"{m:>10}" for m in methods))
for seed, res in rows.items():
    print(f"{seed:>6}" + "".join(f"{100 * res[m]['rank1']:>10.1f}" for m in methods))
if len(rows) > 1:
    mean = {m: sum(r[m]["rank1"] for r in rows.values()) / len(rows) for m in methods}
    print(f"{'mean':>6}" + "".join(f"{100 * mean[m]:>10.1f}" for m in methods))
