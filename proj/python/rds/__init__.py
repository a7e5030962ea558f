"""Python bindings for the rds decoding-safety engine.

Generation, evaluation and benchmarking take plain dicts for their configs and
return dicts; everything else mirrors the C++ API.
"""

import json

from . import _rds
from ._rds import (
    Corpus,
    DegenerateDataError,
    InvalidConfiguration,
    IoError,
    MissingArtifact,
    ModelConfig,
    Query,
    QueryLabel,
    SafetyClassifier,
    SpecHead,
    ToyTransformer,
    TrainingFailure,
    auc,
    derive_seed,
    fit_classifier,
    gen_corpus,
    load_corpus,
    pca_fit,
    query_states,
    softmax,
    train_lm,
    train_spechead as _train_spechead,
)

SCATTER_HEADER = "query_id,label,output_class,position,pc1,pc2,pc3,pc4,score"


def train_spechead(model, sequences, **kwargs):
    """Returns (head, metadata dict)."""
    head, meta = _train_spechead(model, sequences, **kwargs)
    return head, json.loads(meta)


def generate(model, prompt, config, classifier=None, head=None, steps=False):
    return json.loads(_rds.generate(model, classifier, head, list(prompt), json.dumps(config), steps))


def evaluate(model, corpus, configs, classifier=None, head=None, n_samples=5, seed=0, matcher="string", timing=True):
    texts = [json.dumps(c) for c in configs]
    return json.loads(_rds.evaluate(model, classifier, head, corpus, texts, n_samples, seed, matcher, timing))


def bench(model, classifier, head, prompts, configs, warmup=2):
    return json.loads(_rds.bench(model, classifier, head, prompts, [json.dumps(c) for c in configs], warmup))


def export_scatter_csv(model, classifier, corpus, positions, config, head=None, matcher="string"):
    return _rds.export_scatter_csv(model, classifier, head, corpus, list(positions), json.dumps(config), matcher)


__all__ = [name for name in dir() if not name.startswith("_") and name != "json"]
