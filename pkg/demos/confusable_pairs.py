"""Relations that share trigger words and differ only in entity types.

Trains with and without entity type prompts, then asks each model to choose
between the two members of every confusable pair.

    python3 demos/confusable_pairs.py
"""

from rocre.dataio import NONE_LABEL
from rocre.infer import evaluate, predict_restricted_many
from rocre.synthetic import SynthConfig, generate_synthetic
from rocre.trainer import TrainConfig, train

corpus = generate_synthetic(SynthConfig(confusable=True, visual_informative_fraction=0.0, seed=648))
world = corpus.world
for entry in corpus.catalog.entries:
    partner = world.partner(entry.label)
    if partner and entry.label < partner:
        print(f"pair: {entry.label} <-> {partner}")

cases = [i for i in corpus.eval if i.gold_relation != NONE_LABEL and world.partner(i.gold_relation)]
candidates = [(i.gold_relation, world.partner(i.gold_relation)) for i in cases]
base = TrainConfig(epochs=50, seed=648)
for name, cfg in [("with types", base), ("without types", base.variant(use_types=False))]:
    model, _ = train(cfg, corpus.train, corpus.catalog)
    preds = predict_restricted_many(model, cases, candidates)
    acc = sum(p.predicted_label == i.gold_relation for p, i in zip(preds, cases)) / len(cases)
    print(f"{name:14s} F1 {evaluate(model, corpus.eval).f1:.3f}  pair accuracy {acc:.3f}")
