"""Shared fixtures: a tiny corpus trained through all five stages once per
session, reused by the editing, CLI, and metrics tests."""

import pytest

from jointedit.config import load_config
from jointedit.corpus import Corpus, build_corpus
from jointedit.training import StageRunner

PIPELINE_SETS = [
    "synth.count=6", "synth.seed=3",
    "train.stage1.epochs=1", "train.stage2.epochs=1",
    "train.stage3.epochs=1", "train.stage4.epochs=1",
    "train.stage5.epochs=1", "train.adv_warmup=3",
]


@pytest.fixture(scope="session")
def pipeline_cfg():
    return load_config(None, PIPELINE_SETS)


@pytest.fixture(scope="session")
def pipeline_corpus_dir(tmp_path_factory, pipeline_cfg):
    root = tmp_path_factory.mktemp("tiny-corpus")
    build_corpus(root, pipeline_cfg)
    return root


@pytest.fixture(scope="session")
def pipeline_corpus(pipeline_corpus_dir):
    return Corpus(pipeline_corpus_dir)


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory, pipeline_cfg, pipeline_corpus):
    out = tmp_path_factory.mktemp("tiny-run")
    runner = StageRunner(pipeline_cfg, pipeline_corpus, out)
    for stage in (1, 2, 3, 4, 5):
        runner.run_stage(stage)
    return out
