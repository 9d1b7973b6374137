"""Python access to the modpipe core: cost model, alignment statistics,
feed generation, the selection cascade and selector training."""

import json

from . import _modpipe
from ._modpipe import ModpipeError, ValidationError

__all__ = [
    "ModpipeError",
    "ValidationError",
    "fnv1a64",
    "cache_key",
    "call_counts",
    "pruning_savings",
    "simulate_latency",
    "sigmoid",
    "logit",
    "fit_intercept_logistic",
    "alignment_report",
    "loser_weight",
    "backoff_base",
    "generate_feed",
    "select_intervention",
    "generate_preference_pairs",
    "train",
    "predict",
]


def _bytes(value):
    return value.encode() if isinstance(value, str) else bytes(value)


def fnv1a64(data):
    return _modpipe.fnv1a64(_bytes(data))


def cache_key(content, filter_params, sensitivity):
    return _modpipe.cache_key(_bytes(content), filter_params, sensitivity)


def call_counts(workload):
    return json.loads(_modpipe.call_counts(json.dumps(workload)))


pruning_savings = _modpipe.pruning_savings
sigmoid = _modpipe.sigmoid
logit = _modpipe.logit
loser_weight = _modpipe.loser_weight
backoff_base = _modpipe.backoff_base


def simulate_latency(workload, concurrency=25, workers=4, sample="mid", seed=0):
    return json.loads(_modpipe.simulate_latency(json.dumps(workload), concurrency, workers, sample, seed))


def fit_intercept_logistic(outcomes):
    return json.loads(_modpipe.fit_intercept_logistic([bool(o) for o in outcomes]))


def alignment_report(records):
    return json.loads(_modpipe.alignment_report(json.dumps(records)))


def generate_feed(posts=25, match_rate=0.5, seed=0, page=0):
    return json.loads(_modpipe.generate_feed(posts, match_rate, seed, page))


def select_intervention(post, filter, k=3):
    """Run both cascade stages with the simulated judge and mock generator."""
    return json.loads(_modpipe.select_intervention(json.dumps(post), json.dumps(filter), k))


def generate_preference_pairs(sft, palette=(), epsilon=0.05):
    return json.loads(_modpipe.generate_preference_pairs(json.dumps(sft), list(palette), float(epsilon)))


def train(phase, data, params=None, base=None):
    """Phase 1 takes labeled contexts, 2 preference pairs, 3 human pairs plus a phase-2 `base` model."""
    return json.loads(
        _modpipe.train(
            phase,
            json.dumps(data),
            json.dumps(params) if params else "",
            json.dumps(base) if base else "",
        )
    )


def predict(model, context):
    return json.loads(_modpipe.predict(json.dumps(model), list(context)))
