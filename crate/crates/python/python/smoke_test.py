"""Smoke test for the compiled extension.

Build with `cargo build -p vqa-robust-py --release --features extension-module`,
copy target/release/libvqa_robust_py.so to vqa_robust_py.so somewhere on
PYTHONPATH and run this script.
"""

import json
import math
import pathlib
import sys

import vqa_robust_py as vr

FIXTURES = pathlib.Path(__file__).resolve().parents[2] / "core" / "tests" / "fixtures"


def close(a, b, tol=1e-9):
    assert abs(a - b) <= tol, (a, b)


def main():
    assert vr.normalize("The Right, lower lobe!") == ["right", "lower", "lobe"]
    close(vr.token_recall("the right lower lobe", "the lower lobe"), 2 / 3)
    assert vr.closed_accuracy("yes", "Yes, there is") == 1.0

    close(vr.cluster_mad([1, 1, 1, 0]), 0.375)
    close(vr.cluster_cv([1, 1, 1, 0]), 100 / math.sqrt(3))
    assert vr.cluster_cv([0, 0]) is None

    close(vr.cosine_sim([1.0, 2.0], [2.0, 4.0]), 1.0)
    assert vr.mean_pool([[1.0, 2.0], [3.0, 4.0]]) == [2.0, 3.0]
    value, grad = vr.ar_cross_entropy([[0.0] * 4] * 3, [0, 1, 2])
    close(value, 3 * math.log(4))
    assert len(grad) == 3 and len(grad[0]) == 4
    close(vr.info_nce([1.0, 0.0], [[2.0, 0.0]], [[1.0, 0.0]], 0.5), math.log(2))

    assert vr.rule_word_perturb("is there a fracture", 3) == "is there any fracture"

    report = json.loads(
        vr.score_files(
            str(FIXTURES / "hand5_clusters.jsonl"),
            str(FIXTURES / "hand5_predictions.jsonl"),
            "model-a",
        )
    )
    close(report["answer_types"]["open_recall"], 55.0)

    run = vr.toy_run([("mode", "ccl"), ("steps", "50")])
    assert run["mode"] == "ccl" and run["final_loss"] < run["initial_loss"]

    print("smoke test ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
