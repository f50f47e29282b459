"""Toy-scale reproduction: train S00 (no LID) and S20 (LID into the 2nd-pass
decoder), then print the WER and LID accuracy tables.

Run: python demos/04_toy_experiment.py [epochs]

Takes several minutes per system on one CPU core.
"""
import sys

from cascade_lid.cascade import CascadeModel, toy_config
from cascade_lid.synthdata import GeneratorConfig, generate, split
from cascade_lid.training import TrainConfig, evaluate, train

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else TrainConfig().epochs

corpus = generate(GeneratorConfig(), 2200, seed=11)
train_set, test_set = split(corpus, [2000 / 2200, 200 / 2200], seed=11)
print(f"{len(train_set)} train / {len(test_set)} test utterances, {len(corpus.locales)} locales")

for name, injection in [("S00", "none"), ("S20", "fig1a")]:
    model = CascadeModel(toy_config(injection=injection))
    result, _ = train(model, train_set, TrainConfig(epochs=epochs),
                      log=lambda row: print(name, {k: round(v, 3) for k, v in row.items()}))
    print(f"\n{name}: {result.steps} steps in {result.seconds:.0f}s")
    print(evaluate(model, test_set).text(name), "\n")
