"""Regenerate the frozen golden files. Run only when an output format changes on purpose.

    python3 tests/fixtures/make_golden.py
"""

import hashlib
import json
import sys
import tempfile
from pathlib import Path

import numpy as np

HERE = Path(__file__).parent
sys.path.insert(0, str(HERE.parent.parent))

from rocre.cli import main  # noqa: E402
from rocre.dataio import build_vocab, load_corpus, load_lexicon, load_relation_catalog  # noqa: E402
from rocre.infer import dump_attention  # noqa: E402
from rocre.model import ModelConfig, RocModel  # noqa: E402
from rocre.pair_encoder import encode_pair, encode_text, mark_instance  # noqa: E402
from rocre.rel_encoder import RelEncoderConfig  # noqa: E402
from tests.conftest import fixture_encoder_config  # noqa: E402

GOLDEN = HERE / "golden"
SEED = 648


def array_digest(a: np.ndarray) -> str:
    """sha256 of the float64 values rounded to 10 decimals (absorbs BLAS summation order)."""
    return hashlib.sha256(np.round(np.asarray(a, dtype=np.float64), 10).tobytes()).hexdigest()


def fixture_model() -> tuple[RocModel, list]:
    corpus = load_corpus(HERE / "corpus3.jsonl", HERE / "visual", load_lexicon(HERE / "lexicon.json"))
    catalog = load_relation_catalog(HERE / "catalog8.json")
    config = ModelConfig(
        fixture_encoder_config(retain_attention=True),
        RelEncoderConfig(num_layers=1, num_heads=2, ffn_width=16),
    )
    return RocModel.initialize(config, build_vocab(corpus), catalog, SEED), corpus


def reference_run(workdir: Path) -> dict:
    cfg = str(HERE / "reference_config.json")
    data, run, ev = workdir / "data", workdir / "run", workdir / "eval"
    for argv in (
        ["gen-synth", "--config", cfg, "--out", str(data)],
        ["train", "--config", cfg, "--data", str(data), "--out", str(run)],
        ["eval", "--checkpoint", str(run / "model.ckpt"), "--data", str(data), "--out", str(ev)],
    ):
        if main(argv) != 0:
            raise SystemExit(f"reference step failed: {argv}")
    report = json.loads((run / "report.json").read_text())
    report.pop("wall_time")
    return {"report": report, "eval_metrics": json.loads((ev / "metrics.json").read_text())}


def compute() -> dict:
    model, corpus = fixture_model()
    inst = corpus[0]
    x_t = encode_text(mark_instance(inst, model.vocab, model.encoder), model.params, model.encoder).data
    h_e = encode_pair(inst, model.params, model.encoder, model.vocab).h_e
    with tempfile.TemporaryDirectory() as d:
        dump_attention(model, inst, Path(d) / "attn.csv")
        attn = (Path(d) / "attn.csv").read_bytes()
        ref = reference_run(Path(d))
    return {
        "vocab": build_vocab(corpus).to_dict(),
        "checksums": {
            "x_t": array_digest(x_t),
            "h_e": array_digest(h_e),
            "attention_csv": hashlib.sha256(attn).hexdigest(),
        },
        "h_e": h_e.tolist(),
        **ref,
    }


if __name__ == "__main__":
    out = compute()
    GOLDEN.mkdir(exist_ok=True)
    (GOLDEN / "vocab.json").write_text(json.dumps(out["vocab"]) + "\n")
    (GOLDEN / "checksums.json").write_text(json.dumps({**out["checksums"], "h_e_values": out["h_e"]}, indent=2) + "\n")
    (GOLDEN / "reference_report.json").write_text(json.dumps(out["report"], indent=2) + "\n")
    (GOLDEN / "reference_eval_metrics.json").write_text(json.dumps(out["eval_metrics"], indent=2) + "\n")
    print("golden files written to", GOLDEN)
