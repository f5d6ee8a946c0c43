"""Smoke test for the Python bindings.

Build first:  pip install --no-build-isolation ./crates/py
Then run:     python python/smoke.py
"""

import math
import tempfile

import ovd_distill as od


def check_ops():
    scores = [[2.0, 0.1, -0.3], [0.0, 1.5, 0.2], [0.4, -0.1, 1.0]]
    loss = od.contrastive_loss(scores)
    assert loss > 0 and math.isfinite(loss), loss

    # Diagonal scores on the attention side: the two distillation
    # denominators must then agree.
    diag = [scores[i][i] for i in range(3)]
    a = od.distillation_loss(scores, diag, attention_positive=False)
    b = od.distillation_loss(scores, diag, attention_positive=True)
    assert abs(a - b) < 1e-12, (a, b)

    # Two concepts, each fully attending to its own block: margin 2.
    att = [[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]
    assert od.divergence(att, [2, 1], alpha=0.5) == 0.0
    assert abs(od.divergence(att, [2, 1], alpha=3.0) - 2.0) < 1e-12

    truth = [{"boxes": [[0, 0, 10, 10]], "labels": ["star"]}]
    results = [[{"bbox": [0, 0, 10, 10], "label": "star", "confidence": 0.9}]]
    report = od.ap50(results, truth, ["circle"], ["star"])
    assert report["novel"] == 1.0, report

    try:
        od.contrastive_loss([[1.0, 2.0], [3.0]])
    except ValueError:
        pass
    else:
        raise AssertionError("ragged matrix accepted")


def check_training():
    cfg = od.Config()
    with tempfile.TemporaryDirectory() as tmp:
        cfg.set("data_dir", tmp)
        cfg.set("corpus.detection_count", "16")
        cfg.set("corpus.caption_count", "24")
        cfg.set("corpus.eval_count", "8")
        counts = od.generate_data(cfg)
        assert counts == (16, 24, 8), counts

        session = od.Session(cfg)
        s1, trace = session.train("1", epochs=1)
        assert trace and all(math.isfinite(x) for x in trace)
        s2, _ = session.train("2", epochs=1, start=s1)
        report = session.evaluate(s2)
        for key in ("ap50_novel", "ap50_base", "mlm_accuracy", "attention_tv"):
            assert 0.0 <= report[key] <= 1.0, report
        dets = session.detect(s2, 0)
        assert all(0.0 <= d["confidence"] <= 1.0 for d in dets)

    try:
        cfg.set("batch_size", "0")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid override accepted")


if __name__ == "__main__":
    check_ops()
    check_training()
    print("python smoke: ok")
