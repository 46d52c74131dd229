"""Train AdapterFL and the independent-member baseline on the smoke config and compare.

Both runs share data, partition and dispatch seeds, so the only difference is
whether the three members share their feature-extraction block. About two
minutes on one core.
"""

import sys
from pathlib import Path

from adapterfl import config, run_training

cfg_path = Path(__file__).resolve().parents[1] / "configs" / "smoke.toml"
out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs") / "demo"

final = {}
for method in ("adapterfl", "fedbase"):
    cfg = config.load(cfg_path)
    cfg.method = method
    records = run_training(cfg, out / method)
    final[method] = {r.model_id: r.test_accuracy for r in records if r.round == cfg.rounds}

print(f"{'member':<6} {'adapterfl':>10} {'fedbase':>10}")
for mid in final["adapterfl"]:
    print(f"{mid:<6} {final['adapterfl'][mid]:>10.3f} {final['fedbase'][mid]:>10.3f}")
print(f"metrics written under {out}")
