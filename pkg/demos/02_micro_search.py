"""A complete architecture search in about a minute.

Generates a tiny synthetic splice dataset, runs the bilevel search with a
3-operation registry, and prints the event schedule (warmup, alternating
arch/weight steps, probes, prunes, rate updates) plus the genotype it found.

Run: python3 demos/02_micro_search.py
"""

from collections import Counter

from forgenas.data import SplitSpec, assign_splits, generate_synthetic
from forgenas.search import SearchConfig, search

dataset = generate_synthetic(seed=0, n=64, domain="splice", size=16)
assign_splits(dataset, SplitSpec("even_half"), seed=0)

config = SearchConfig(
    epochs=6, warmup_epochs=2, prune_period=3,
    batch_size=16, init_channels=4, init_sample_rate=0.5, num_groups=1,
    probe_interval=1, probe_batch=8,
    registry_names=("skip_connect", "SepCDC_3x3_0.7", "DilCDC_3x3_0.5"),
    seed=0,
)

result = search(config, dataset)

print("per-epoch event phases:")
for epoch in range(1, config.epochs + 1):
    counts = Counter(e["phase"] for e in result.events
                     if e["epoch"] == epoch)
    print(f"  epoch {epoch}: {dict(counts)}")

prunes = [e for e in result.events if e["phase"] == "prune"]
for e in prunes:
    alive = set(e["alive"].values())
    print(f"prune at epoch {e['epoch']}: alive ops per edge now {alive}")

print("\nweight loss per epoch:",
      [round(v, 3) for v in result.curves["weight_loss"]])
print("\ndiscretized genotype:")
print(result.genotype.to_json())
