"""Session-scoped trained assets shared by the acceptance suite.

Building these is the expensive part of the test run (corpus generation,
captioner training, purifier training), so it happens once per session and
only when a test actually asks for it.
"""

import time
from dataclasses import replace

import pytest

from midec import runconfig
from midec import synthbench as sb
from midec.model import n_params, train_lvlm
from midec.purifier import init_purifier, train_purifier
from midec.tensorcore import Rng

# corpus knobs for the desk-scale benchmark; bias and held-out size are
# pinned by the release criteria, the rest trades signal against runtime
CATALOG_SIZE = 12
N_SCENES = 800
N_TRAIN = 600
N_PURIFIER_PAIRS = 2000
OBJECTS_PER_SCENE = 2
BIAS = 0.3
CORPUS_SEED = 101
PURIFIER_CORPUS_SEED = 331
TRAIN_SEED = 7
PURIFIER_TRAIN_SEED = 10
MODEL_EPOCHS = 40


def _build(settings_overrides, corpus_seed, train_seed):
    t0 = time.time()
    overrides = {"model_train.epochs": MODEL_EPOCHS}
    if settings_overrides:
        overrides.update(settings_overrides)
    settings = runconfig.resolve(None, overrides)
    config = runconfig.model_config(settings)
    catalog = sb.Catalog(CATALOG_SIZE)
    scenes, captions = sb.generate_corpus(CATALOG_SIZE, N_SCENES,
                                          OBJECTS_PER_SCENE, BIAS,
                                          seed=corpus_seed)
    triples = sb.training_triples(scenes[:N_TRAIN], captions[:N_TRAIN], catalog,
                                  config.n_visual, config.patch_dim)
    params = train_lvlm(triples, config, runconfig.lvlm_train_config(settings),
                        Rng(train_seed).split("train-model"))
    # the purifier gets its own, larger corpus: its objective needs many more
    # contexts than the captioner to rise above the Gumbel sampling noise
    pscenes, pcaps = sb.generate_corpus(CATALOG_SIZE, N_PURIFIER_PAIRS,
                                        OBJECTS_PER_SCENE, BIAS,
                                        seed=PURIFIER_CORPUS_SEED)
    ptriples = sb.training_triples(pscenes, pcaps, catalog,
                                   config.n_visual, config.patch_dim)
    pcfg = runconfig.purifier_config(settings)
    rng_p = Rng(PURIFIER_TRAIN_SEED).split("train-purifier")
    pp0 = init_purifier(pcfg, n_params(params), rng_p.split("init"))
    pp = train_purifier(params, config, pp0, pcfg,
                        runconfig.purifier_train_config(settings), ptriples,
                        rng_p.split("train"))
    return {
        "settings": settings,
        "config": config,
        "catalog": catalog,
        "params": params,
        "pp": pp,
        "pcfg": pcfg,
        "heldout_scenes": scenes[N_TRAIN:],
        "heldout_captions": captions[N_TRAIN:],
        "build_seconds": time.time() - t0,
    }


@pytest.fixture(scope="session")
def trained_assets():
    """Default-architecture captioner + purifier on the biased corpus."""
    return _build(None, CORPUS_SEED, TRAIN_SEED)


@pytest.fixture(scope="session")
def small_assets():
    """Same pipeline at n_visual=8 with gamma=0.75, for oracle comparisons."""
    return _build({"model.n_visual": 8, "purifier_train.gamma": 0.75},
                  CORPUS_SEED, TRAIN_SEED)
