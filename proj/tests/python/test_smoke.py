import csv
import io
import math

import numpy as np
import pytest

import rds


@pytest.fixture(scope="module")
def stack():
    corpus = rds.gen_corpus(harmful=12, benign=12, seed=4)
    cfg = rds.ModelConfig()
    cfg.d_model = 16
    cfg.n_heads = 2
    cfg.d_ff = 32
    cfg.seed = 5
    model, curve = rds.train_lm(rds.ToyTransformer.init(cfg), corpus.training_sequences(), epochs=5)
    states, labels = rds.query_states(model, corpus)
    clf, train_auc = rds.fit_classifier(states, labels, epochs=100)
    head, meta = rds.train_spechead(model, corpus.training_sequences(), epochs=3, seed=6)
    return corpus, model, clf, head, curve, train_auc, meta


def test_numerics():
    p = rds.softmax(np.array([1.0, 2.0, 3.0]))
    assert np.allclose(p, [0.09003057, 0.24472847, 0.66524096], atol=1e-8)
    assert rds.auc(np.array([0.9, 0.1, 0.8, 0.2]), [1, 0, 1, 0]) == 1.0
    mean, comps = rds.pca_fit(np.array([[-3.0, 0.0], [1.0, 0.0], [2.0, 0.0], [5.0, 0.0]]), 1)
    assert comps.shape == (2, 1)
    assert abs(comps[0, 0]) == pytest.approx(1.0)
    assert mean[0] == pytest.approx(1.25)


def test_training_artifacts(stack, tmp_path):
    corpus, model, clf, head, curve, train_auc, meta = stack
    assert curve[-1] < curve[0]
    assert 0.5 <= train_auc <= 1.0
    assert meta["epochs"] == 3
    assert meta["final_validation_loss"] >= 0.0
    model.save(tmp_path / "m.tsr")
    clf.save(tmp_path / "c.tsr")
    head.save(tmp_path / "h.tsr")
    back = rds.ToyTransformer.load(tmp_path / "m.tsr")
    hidden, logits = model.forward(corpus.queries[0].tokens)
    hidden2, _ = back.forward(corpus.queries[0].tokens)
    assert logits.shape == (len(corpus.queries[0].tokens), 64)
    assert np.max(np.abs(hidden - hidden2)) < 1e-4
    clf2 = rds.SafetyClassifier.load(tmp_path / "c.tsr")
    assert clf2.score(hidden[-1]) == pytest.approx(clf.score(hidden[-1]), abs=1e-5)
    with pytest.raises(rds.MissingArtifact):
        rds.ToyTransformer.load(tmp_path / "absent.tsr")


def test_generate_modes(stack):
    corpus, model, clf, head, *_ = stack
    prompt = corpus.queries[0].tokens
    for mode in ("no-defense", "rds-full", "rds-spec"):
        cfg = {"mode": mode, "k": 5, "max_new_tokens": 6, "seed": 1}
        a = rds.generate(model, prompt, cfg, classifier=clf, head=head, steps=True)
        b = rds.generate(model, prompt, cfg, classifier=clf, head=head, steps=True)
        assert a["output"] == b["output"]
        assert len(a["steps"]) <= 6
    with pytest.raises(rds.InvalidConfiguration):
        rds.generate(model, prompt, {"mode": "rds-full"})
    with pytest.raises(rds.InvalidConfiguration):
        rds.generate(model, prompt, {"mode": "sideways"}, classifier=clf)


def test_evaluate_report(stack):
    corpus, model, clf, head, *_ = stack
    configs = [{"mode": m, "k": 5, "max_new_tokens": 6} for m in ("no-defense", "rds-full", "rds-spec")]
    report = rds.evaluate(model, corpus, configs, classifier=clf, head=head, n_samples=2, timing=False)
    assert report["n_samples"] == 2
    assert set(report["modes"]) == {"no-defense", "rds-full", "rds-spec"}
    assert "timing" not in report
    for summary in report["modes"].values():
        assert 0.0 <= summary["compliance_pct"] <= 100.0
        assert 0.0 <= summary["refusal_pct"] <= 100.0
    again = rds.evaluate(model, corpus, configs, classifier=clf, head=head, n_samples=2, timing=False)
    assert again == report


def test_bench_report(stack):
    corpus, model, clf, head, *_ = stack
    prompts = [q.tokens for q in corpus.queries[:3]]
    configs = [{"mode": m, "k": 5, "max_new_tokens": 8} for m in ("no-defense", "rds-full", "rds-spec")]
    report = rds.bench(model, clf, head, prompts, configs, warmup=0)
    assert report["prompts"] == 3
    assert report["rds_spec_over_rds_full"] > 0
    assert report["modes"]["rds-full"]["median_tokens_per_second"] > 0


def test_scatter_csv(stack):
    corpus, model, clf, head, *_ = stack
    text = rds.export_scatter_csv(model, clf, corpus, [1, 2, 3], {"mode": "rds-full", "k": 5, "max_new_tokens": 4})
    rows = list(csv.DictReader(io.StringIO(text)))
    assert text.splitlines()[0] == rds.SCATTER_HEADER
    assert rows
    for row in rows:
        assert row["label"] in ("harmful", "benign")
        assert row["output_class"] in ("refusal", "compliance")
        assert 1 <= int(row["position"]) <= 3
        assert 0.0 <= float(row["score"]) <= 1.0
        assert all(math.isfinite(float(row[f"pc{i}"])) for i in range(1, 5))
