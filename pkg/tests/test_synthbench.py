"""Corpus generation, hallucination metrics, and the presence probe."""

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from midec.decoding import DecodeResult
from midec.errors import InvalidConfigError, InvalidInputError
from midec.synthbench import (
    EOS,
    GHOST_AMPLITUDE,
    OBJ_BASE,
    Catalog,
    CaptionRecord,
    ChairScores,
    PopeQuestion,
    SceneRecord,
    W_AND,
    build_pope_questions,
    caption_record,
    caption_tokens,
    chair_scores,
    generate_corpus,
    object_signature,
    pope_eval,
    pope_probe,
    pope_prompt,
    qa_pairs,
    read_captions,
    read_scenes,
    scene_patches,
    throughput,
    training_triples,
    write_captions,
    write_scenes,
)
from midec.tensorcore import Rng


# ------------------------------------------------------------------- catalog

def test_catalog_tokens_round_trip():
    cat = Catalog(12)
    for obj in cat.object_ids:
        assert cat.object_of(cat.token(obj)) == obj
    assert cat.object_of(OBJ_BASE - 1) is None
    assert cat.object_of(OBJ_BASE + 12) is None


def test_companion_graph_is_an_involution():
    cat = Catalog(12)
    for obj in cat.object_ids:
        partner = cat.companion(obj)
        assert partner is not None
        assert cat.companion(partner) == obj
        assert partner != obj
    # odd catalog: the last object has no partner
    odd = Catalog(7)
    assert odd.companion(6) is None


def test_catalog_size_bounds():
    with pytest.raises(InvalidConfigError):
        Catalog(1)
    with pytest.raises(InvalidConfigError):
        Catalog(225)


def test_signatures_are_stable_unit_vectors():
    a = object_signature(3, 16)
    b = object_signature(3, 16)
    c = object_signature(4, 16)
    assert np.array_equal(a, b)
    assert abs(float(np.linalg.norm(a)) - 1.0) < 1e-5
    assert not np.allclose(a, c)


# -------------------------------------------------------------------- scenes

def test_scene_patches_pure_in_ids_and_seed():
    cat = Catalog(8)
    scene = SceneRecord(scene_id=0, object_ids=(2, 5), seed=777)
    a = scene_patches(scene, cat, 16, 24)
    b = scene_patches(SceneRecord(scene_id=9, object_ids=(2, 5), seed=777), cat, 16, 24)
    assert np.array_equal(a, b)  # scene_id plays no part
    c = scene_patches(SceneRecord(scene_id=0, object_ids=(2, 5), seed=778), cat, 16, 24)
    assert not np.array_equal(a, c)
    assert a.shape == (16, 24) and a.dtype == np.float32


def test_scene_patches_carry_object_signatures():
    cat = Catalog(8)
    scene = SceneRecord(scene_id=0, object_ids=(2,), seed=41)
    patches = scene_patches(scene, cat, 12, 24)
    sims = patches @ object_signature(2, 24)
    # two slots carry the signature strongly
    assert int(np.sum(sims > 0.6)) >= 2
    # ghost slots may carry the absent companion faintly, never at full strength
    ghost_sims = patches @ object_signature(3, 24)
    assert float(ghost_sims.max()) < 0.9
    assert GHOST_AMPLITUDE < 1.0


def test_caption_template():
    cat = Catalog(8)
    toks = caption_tokens([2, 5], cat)
    assert toks[-1] == EOS
    assert W_AND in toks
    rec = caption_record(0, toks, cat)
    assert rec.mentioned_object_ids == frozenset({2, 5})


# -------------------------------------------------------------------- corpus

def test_corpus_determinism(tmp_path):
    s1, c1 = generate_corpus(12, 40, 2, 0.3, seed=9)
    s2, c2 = generate_corpus(12, 40, 2, 0.3, seed=9)
    assert s1 == s2 and c1 == c2
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    write_scenes(p1, s1)
    write_scenes(p2, s2)
    assert p1.read_bytes() == p2.read_bytes()


def test_corpus_zero_bias_is_clean():
    scenes, captions = generate_corpus(12, 60, 2, 0.0, seed=3)
    scores = chair_scores(scenes, captions)
    assert scores.c_i == 0.0 and scores.c_s == 0.0


def test_corpus_bias_fraction_matches_rho():
    # one object per scene guarantees a companion lure is always available,
    # so the injected fraction is a plain binomial draw at rho
    scenes, captions = generate_corpus(12, 1000, 1, 0.3, seed=17)
    scores = chair_scores(scenes, captions)
    biased = scores.counts.hallucinated_captions / scores.counts.total_captions
    assert 0.25 <= biased <= 0.35


def test_corpus_lures_are_absent_companions():
    cat = Catalog(12)
    scenes, captions = generate_corpus(12, 200, 2, 1.0, seed=5)
    by_id = {s.scene_id: s for s in scenes}
    checked = 0
    for cap in captions:
        present = set(by_id[cap.scene_id].object_ids)
        extras = cap.mentioned_object_ids - present
        assert len(extras) <= 1
        for lure in extras:
            assert cat.companion(lure) in present
            checked += 1
    assert checked > 0


def test_corpus_validation():
    with pytest.raises(InvalidInputError):
        generate_corpus(8, 10, 9, 0.3, seed=0)
    with pytest.raises(InvalidInputError):
        generate_corpus(8, 10, 2, 1.5, seed=0)
    with pytest.raises(InvalidInputError):
        generate_corpus(8, 0, 2, 0.3, seed=0)


def test_serialization_round_trip(tmp_path):
    cat = Catalog(12)
    scenes, captions = generate_corpus(12, 30, 2, 0.3, seed=21)
    sp, cp = tmp_path / "scenes.jsonl", tmp_path / "captions.jsonl"
    write_scenes(sp, scenes)
    write_captions(cp, captions)
    assert read_scenes(sp) == scenes
    assert read_captions(cp, cat) == captions


def test_training_triples_shape():
    cat = Catalog(8)
    scenes, captions = generate_corpus(8, 10, 2, 0.3, seed=2)
    triples = training_triples(scenes, captions, cat, 16, 24)
    assert len(triples) == 10
    patches, prompt, caption = triples[0]
    assert patches.shape == (16, 24)
    assert prompt == [1, 16]
    assert caption[-1] == EOS


# --------------------------------------------------------------------- chair

def _fixture_scene(scene_id, objs):
    return SceneRecord(scene_id=scene_id, object_ids=tuple(objs), seed=0)


def test_chair_pinned_fixture():
    """One caption with 1 hallucinated of 4 mentions, one clean with 4."""
    cat = Catalog(16)
    scenes = [_fixture_scene(0, (0, 2, 4, 6)), _fixture_scene(1, (1, 3, 5, 7))]
    captions = [
        caption_record(0, caption_tokens([0, 2, 4, 9], cat), cat),
        caption_record(1, caption_tokens([1, 3, 5, 7], cat), cat),
    ]
    scores = chair_scores(scenes, captions)
    assert scores.c_s == 0.5
    assert scores.c_i == 0.125
    assert scores.counts.hallucinated_mentions == 1
    assert scores.counts.total_mentions == 8
    assert not scores.degenerate


def test_chair_degenerate_no_mentions():
    cat = Catalog(8)
    scenes = [_fixture_scene(0, (0,))]
    captions = [caption_record(0, (1, 2), cat)]
    scores = chair_scores(scenes, captions)
    assert scores.c_i == 0.0 and scores.c_s == 0.0
    assert scores.degenerate
    blob = json.loads(scores.to_json())
    assert blob["degenerate"] is True


def test_chair_unknown_scene_rejected():
    cat = Catalog(8)
    captions = [caption_record(5, caption_tokens([0], cat), cat)]
    with pytest.raises(InvalidInputError):
        chair_scores([_fixture_scene(0, (0,))], captions)


@settings(deadline=None, max_examples=40)
@given(st.data())
def test_chair_monotone_under_added_hallucination(data):
    cat = Catalog(12)
    n_caps = data.draw(st.integers(1, 5))
    scenes, captions = [], []
    for i in range(n_caps):
        objs = data.draw(st.sets(st.integers(0, 11), min_size=1, max_size=3))
        scenes.append(_fixture_scene(i, sorted(objs)))
        mentioned = data.draw(st.sets(st.integers(0, 11), min_size=0, max_size=3))
        captions.append(caption_record(i, caption_tokens(sorted(mentioned), cat), cat))
    before = chair_scores(scenes, captions)

    victim = data.draw(st.integers(0, n_caps - 1))
    present = set(scenes[victim].object_ids)
    candidates = [o for o in range(12)
                  if o not in present and o not in captions[victim].mentioned_object_ids]
    if not candidates:
        return
    extra = candidates[0]
    new_mentions = sorted(captions[victim].mentioned_object_ids | {extra})
    captions[victim] = caption_record(victim, caption_tokens(new_mentions, cat), cat)
    after = chair_scores(scenes, captions)

    assert after.c_s >= before.c_s
    assert after.c_i >= before.c_i
    assert (after.c_s == 0.0) == (after.c_i == 0.0)


# ---------------------------------------------------------------------- pope

def test_pope_balance():
    scenes, _ = generate_corpus(12, 50, 2, 0.0, seed=4)
    qs = build_pope_questions(scenes, Catalog(12), 40, Rng(1))
    n_yes = sum(q.present for q in qs)
    assert abs(n_yes - (len(qs) - n_yes)) <= 1
    qs = build_pope_questions(scenes, Catalog(12), 41, Rng(1))
    n_yes = sum(q.present for q in qs)
    assert abs(n_yes - (len(qs) - n_yes)) <= 1


def test_pope_questions_are_truthful():
    scenes, _ = generate_corpus(12, 50, 2, 0.0, seed=4)
    by_id = {s.scene_id: s for s in scenes}
    for q in build_pope_questions(scenes, Catalog(12), 30, Rng(2)):
        assert (q.object_id in by_id[q.scene_id].object_ids) == q.present


def test_pope_oracle_answerer_is_perfect():
    scenes, _ = generate_corpus(12, 40, 2, 0.0, seed=6)
    report = pope_probe(None, None, None, scenes, None, 30, seed=8,
                        catalog=Catalog(12), answerer=lambda q: q.present)
    assert report.accuracy == 1.0
    assert report.f1 == 1.0
    assert report.n_invalid == 0


def test_pope_constant_yes_closed_form():
    scenes, _ = generate_corpus(12, 40, 2, 0.0, seed=6)
    report = pope_probe(None, None, None, scenes, None, 40, seed=8,
                        catalog=Catalog(12), answerer=lambda q: True)
    assert report.accuracy == 0.5
    assert abs(report.f1 - 2.0 / 3.0) < 1e-9
    assert report.fp == report.tp == 20 and report.fn == report.tn == 0


def test_pope_invalid_answers_count_against():
    questions = [PopeQuestion(0, 0, True), PopeQuestion(0, 1, False)]
    report = pope_eval(questions, [None, None])
    assert report.n_invalid == 2
    assert report.accuracy == 0.0
    blob = json.loads(report.to_json())
    assert blob["n_invalid"] == 2


def test_pope_eval_length_mismatch():
    with pytest.raises(InvalidInputError):
        pope_eval([PopeQuestion(0, 0, True)], [])


def test_pope_prompt_layout():
    cat = Catalog(8)
    prompt = pope_prompt(cat.token(3))
    assert prompt == (1, 17, OBJ_BASE + 3, 18)


def test_qa_pairs_balanced_and_shaped():
    scenes, _ = generate_corpus(12, 30, 2, 0.0, seed=10)
    pairs = qa_pairs(scenes, Catalog(12), 20, Rng(3), n_visual=16, patch_dim=24)
    assert len(pairs) == 20
    yes = sum(1 for _, _, ans in pairs if ans[0] == 14)
    assert yes == 10
    patches, prompt, answer = pairs[0]
    assert patches.shape == (16, 24)
    assert len(prompt) == 4 and answer[-1] == EOS


# ---------------------------------------------------------------- throughput

def _result(n_tokens, wall):
    return DecodeResult(tokens=list(range(n_tokens)), per_step=[],
                        wall_time=wall, tokens_per_second=n_tokens / wall)


def test_throughput_pinned():
    summary = throughput([_result(10, 2.0)])
    assert summary.mean_tps == 5.0
    assert summary.stdev_tps == 0.0
    assert summary.n_runs == 1


def test_throughput_mean_and_spread():
    summary = throughput([_result(10, 2.0), _result(30, 2.0)])
    assert abs(summary.mean_tps - 10.0) < 1e-9
    assert summary.stdev_tps > 0


def test_throughput_empty_rejected():
    with pytest.raises(InvalidInputError):
        throughput([])
