"""
Merging experts trained from separate inits
===========================================

Ten toy experts, each trained from its own random init on its own task,
are merged cumulatively. Every expert is near perfect on its task, yet the
merge falls to chance as soon as a second expert joins. The script writes
``spectrum.svg`` next to itself.
"""

from pathlib import Path

from mergelab.toy import ExperimentConfig, spectrum_from_experts, spectrum_summary, train_experts
from mergelab.toy.pipeline import spectrum_svg

cfg = ExperimentConfig(n_tasks=10, init_mode="independent", seed=0)
es = train_experts(cfg.tasks(), "independent", cfg)
print("expert accuracies:", " ".join(f"{es.expert_accuracy(i):.3f}" for i in range(10)))

###############################################################################
# Mean accuracy over the tasks already in the merge, for each merge size k.

for method in ("linear", "ties", "dare_ties"):
    summary = spectrum_summary(spectrum_from_experts(es, cfg.order_seed, cfg.method(method), cfg.seed))
    print(f"{method:>9}: " + " ".join(f"{v:.2f}" for v in summary.values()))

rows = spectrum_from_experts(es, cfg.order_seed, cfg.method("linear"), cfg.seed)
svg = spectrum_svg(rows, chance=0.25, title="linear merges, independent init")
(Path(__file__).with_name("spectrum.svg")).write_text(svg)
