"""Cut the standard prototype zoo where representations agree, then rebuild a model group.

Run with ``python demos/partition_and_reassemble.py``. Takes about ten seconds.
"""

from adapterfl import build_group, default_zoo, partition_search, synthetic_dataset
from adapterfl.similarity import sample_probes

data = synthetic_dataset(10, (3, 32, 32), n_train=512, n_test=2, seed=0)
zoo = default_zoo("standard")
for proto in zoo:
    print(f"{proto.level}: {proto.arch_id:<13} {proto.params / 1e6:6.2f}M params, {len(proto.cut_candidates)} candidate cuts")

result = partition_search(zoo, sample_probes(data.x_train, 256, seed=0))
print(f"\nanchor {result.anchor_id}, cuts {result.cuts}, objective {result.objective:.3f}")

group = build_group(zoo, result, "L")
for model_id, n in group.param_counts().items():
    print(f"{model_id}: {n / 1e6:.3f}M params")
