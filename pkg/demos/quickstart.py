"""Train a small retrieval model on a synthetic corpus and inspect predictions.

    python3 demos/quickstart.py
"""

from rocre.infer import evaluate, predict
from rocre.synthetic import SynthConfig, bayes_predict, generate_synthetic
from rocre.trainer import TrainConfig, train

corpus = generate_synthetic(SynthConfig(K=6, n_train=600, n_eval=200, seed=648))
print(f"{len(corpus.train)} train / {len(corpus.eval)} eval, {len(corpus.catalog)} relations")

model, report = train(TrainConfig(epochs=10, seed=648), corpus.train, corpus.catalog, corpus.eval)
for h in report.eval_history:
    print(f"epoch {h['epoch']:2d}  F1 {h['f1']:.3f}")

m = evaluate(model, corpus.eval)
print(f"final: acc {m.accuracy:.3f}  P {m.precision:.3f}  R {m.recall:.3f}  F1 {m.f1:.3f}")

for inst in corpus.eval[:5]:
    p = predict(model, inst, topk=3)
    ranked = ", ".join(f"{label} {score:.2f}" for label, score in p.ranked)
    print(" ".join(inst.tokens))
    print(f"  gold {inst.gold_relation}  oracle {bayes_predict(inst, corpus.world)}  model [{ranked}]")
