"""Seq2seq pretrain/finetune toolkit with forgetting probes.

Thin wrapper over the C++ extension: dicts in and out where the core
speaks JSON.
"""

import json

from . import _core
from ._core import (
    Checkpoint,
    FglError,
    SequencePair,
    Tokenizer,
    UsageError,
    beam_search,
    bleu,
    dialogue_pairs,
    generate,
    load_dialogues,
    load_documents,
    mix_count,
    next_sentence_pairs,
    perplexity,
    project_2d,
    synth,
    top_k_indices,
)

__all__ = [
    "Checkpoint", "FglError", "SequencePair", "Tokenizer", "UsageError", "beam_search", "bleu",
    "context_sensitivity", "dialogue_pairs", "diversity_metrics", "export", "finetune", "generate",
    "load_dialogues", "load_documents", "mix_count", "next_sentence_pairs", "perplexity", "prepare",
    "pretrain", "probe", "project_2d", "resolve_config", "synth", "top_k_indices", "train",
]


def _traces(jsonl):
    return [json.loads(line) for line in jsonl.splitlines() if line.strip()]


def resolve_config(config=None, out=""):
    """Defaults overlaid with `config`; raises UsageError on unknown keys."""
    return json.loads(_core.resolve_config(json.dumps(config or {}), out))


def prepare(config):
    return _core.prepare(json.dumps(config))


def pretrain(config, resume=False):
    return _core.pretrain(json.dumps(config), resume)


def finetune(config, checkpoints=(), resume=False):
    return _core.finetune(json.dumps(config), list(checkpoints), resume)


def probe(config, checkpoints):
    return _core.probe(json.dumps(config), list(checkpoints))


def export(inputs, out_dir):
    return _core.export([str(p) for p in inputs], out_dir)


def train(plan, model, train_pairs, eval_sets, pretrain_pool=(), init=None):
    """Returns (best Checkpoint, list of per-epoch metric dicts)."""
    best, trace = _core.train(json.dumps(plan), json.dumps(model), list(train_pairs), dict(eval_sets),
                              list(pretrain_pool), init)
    return best, _traces(trace)


def context_sensitivity(checkpoint, pairs, seed=1, drop_rate=0.3):
    return json.loads(_core.context_sensitivity(checkpoint, list(pairs), seed, drop_rate))


def diversity_metrics(responses):
    return json.loads(_core.diversity_metrics([list(r) for r in responses]))
