"""Synthetic hallucination benchmark.

A small world of catalog objects renders into "images" (bags of patch
vectors) and templated captions.  Object co-occurrence is structured: each
object has a fixed companion, companions often share scenes, and a
configurable fraction of training captions mention a companion that is not
actually present.  That gives the language prior exactly the bias that
makes decoders hallucinate, which is the behavior the benchmark measures.

Patches are pure functions of (object_ids, seed): each scene object
contributes two signature-carrying patches; the remaining slots hold
either neutral noise or a faint "ghost" signature of an absent object, so
the visual channel itself has a hallucination pathway that a token
purifier can remove.

Metrics: caption-level and mention-level hallucination rates over exact
catalog-word matches, and a balanced yes/no probe scored by accuracy and
F1 with "yes" as the positive class.
"""

from __future__ import annotations

import json
import statistics
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensorcore as tc
from .errors import InvalidConfigError, InvalidInputError
from .tensorcore import Rng

# ---------------------------------------------------------------------------
# vocabulary layout (fixed; object words start at OBJ_BASE)

PAD = 0
BOS = 1
EOS = 2
W_A, W_PHOTO, W_OF, W_AND = 4, 5, 6, 7
YES, NO = 14, 15
DESCRIBE = 16   # reserved token standing in for "describe this image in detail"
ASK = 17        # reserved token opening an "is there a <object>?" probe
W_QMARK = 18
OBJ_BASE = 32
MAX_CATALOG = 224  # OBJ_BASE + MAX_CATALOG == 256, the default vocabulary

DESCRIBE_PROMPT = (BOS, DESCRIBE)

# patch composition knobs
SIGNAL_PATCHES_PER_OBJECT = 2
SIGNAL_NOISE = 0.25
GHOST_RATE = 0.5
GHOST_AMPLITUDE = 0.45
GHOST_NOISE = 0.35


def pope_prompt(object_token: int) -> tuple[int, ...]:
    """Prompt tokens for the presence probe on one object."""
    return (BOS, ASK, object_token, W_QMARK)


# ---------------------------------------------------------------------------
# catalog


@dataclass(frozen=True)
class Catalog:
    """Fixed object universe: word mapping plus the companion graph.

    Objects pair up (2i with 2i+1); a pair co-occurs in scenes often and
    each member is the other's most plausible hallucination.
    """

    size: int

    def __post_init__(self):
        if not 2 <= self.size <= MAX_CATALOG:
            raise InvalidConfigError(f"catalog size must lie in [2, {MAX_CATALOG}]")

    def token(self, object_id: int) -> int:
        if not 0 <= object_id < self.size:
            raise InvalidInputError(f"object id {object_id} outside catalog [0, {self.size})")
        return OBJ_BASE + object_id

    def object_of(self, token: int) -> int | None:
        idx = token - OBJ_BASE
        return idx if 0 <= idx < self.size else None

    def companion(self, object_id: int) -> int | None:
        if not 0 <= object_id < self.size:
            raise InvalidInputError(f"object id {object_id} outside catalog [0, {self.size})")
        partner = object_id ^ 1
        return partner if partner < self.size else None

    @property
    def object_ids(self) -> range:
        return range(self.size)


def object_signature(object_id: int, patch_dim: int) -> np.ndarray:
    """Stable unit direction in patch space identifying one object."""
    sig = Rng(0).split(f"object-signature-{object_id}-{patch_dim}").normal((patch_dim,))
    return (sig / np.linalg.norm(sig)).astype(tc.DTYPE)


# ---------------------------------------------------------------------------
# scenes and captions


@dataclass(frozen=True)
class SceneRecord:
    scene_id: int
    object_ids: tuple[int, ...]
    seed: int

    def __post_init__(self):
        if len(set(self.object_ids)) != len(self.object_ids):
            raise InvalidInputError("scene object ids must be distinct")


@dataclass(frozen=True)
class CaptionRecord:
    scene_id: int
    tokens: tuple[int, ...]
    mentioned_object_ids: frozenset[int]


def caption_record(scene_id: int, tokens: Iterable[int], catalog: Catalog) -> CaptionRecord:
    tokens = tuple(int(t) for t in tokens)
    mentioned = frozenset(
        obj for obj in (catalog.object_of(t) for t in tokens) if obj is not None
    )
    return CaptionRecord(scene_id=scene_id, tokens=tokens, mentioned_object_ids=mentioned)


def scene_patches(scene: SceneRecord, catalog: Catalog, n_visual: int, patch_dim: int) -> np.ndarray:
    """Render a scene into patch vectors; pure in (object_ids, seed).

    Two patches per scene object carry its signature plus noise.  Leftover
    slots are background: some pure noise, some ghosts (a faint signature
    of an absent object).
    """
    if n_visual < 1 or patch_dim < 1:
        raise InvalidInputError("n_visual and patch_dim must be positive")
    rng = Rng(scene.seed).split(f"patches-{n_visual}-{patch_dim}")
    slots = rng.permutation(n_visual)
    patches = np.zeros((n_visual, patch_dim), dtype=tc.DTYPE)

    filled = 0
    for obj in scene.object_ids:
        sig = object_signature(obj, patch_dim)
        for _ in range(SIGNAL_PATCHES_PER_OBJECT):
            if filled >= n_visual:
                break
            noise = rng.normal((patch_dim,))
            patches[slots[filled]] = sig + SIGNAL_NOISE * noise
            filled += 1

    # ghost pool: absent companions of scene members when any exist (the
    # objects the language prior is most tempted by), else any absent object
    present = set(scene.object_ids)
    pool = [catalog.companion(o) for o in scene.object_ids
            if catalog.companion(o) is not None and catalog.companion(o) not in present]
    if not pool:
        pool = [o for o in catalog.object_ids if o not in present]
    for slot in slots[filled:]:
        noise = rng.normal((patch_dim,))
        noise = noise / np.linalg.norm(noise)
        if pool and rng.uniform() < GHOST_RATE:
            ghost = int(pool[int(rng.integers(0, len(pool)))])
            sig = object_signature(ghost, patch_dim)
            patches[slot] = GHOST_AMPLITUDE * sig + GHOST_NOISE * noise
        else:
            patches[slot] = noise
    return patches


def caption_tokens(mentions: Sequence[int], catalog: Catalog) -> tuple[int, ...]:
    """Template: 'a photo of X and Y and Z.' as token ids, EOS-terminated."""
    toks = [W_A, W_PHOTO, W_OF]
    for i, obj in enumerate(mentions):
        if i > 0:
            toks.append(W_AND)
        toks.append(catalog.token(obj))
    toks.append(EOS)
    return tuple(toks)


CO_OCCUR_PROB = 0.5  # companion joins its partner's scene this often


def generate_corpus(catalog_size: int, n_scenes: int, objects_per_scene: int,
                    bias: float, seed: int) -> tuple[list[SceneRecord], list[CaptionRecord]]:
    """Sample scenes from the co-occurrence graph and one caption each.

    With probability ``bias`` a caption additionally mentions the
    companion of one of its objects even though that companion is absent
    from the scene -- the planted hallucination signal.
    """
    catalog = Catalog(catalog_size)
    if not 1 <= objects_per_scene <= catalog_size:
        raise InvalidInputError("objects_per_scene must lie in [1, catalog_size]")
    if not 0.0 <= bias <= 1.0:
        raise InvalidInputError("bias must lie in [0, 1]")
    if n_scenes < 1:
        raise InvalidInputError("n_scenes must be >= 1")

    rng = Rng(seed).split("corpus")
    scene_rng = rng.split("scenes")
    caption_rng = rng.split("captions")
    seed_rng = rng.split("scene-seeds")

    scenes: list[SceneRecord] = []
    captions: list[CaptionRecord] = []
    for scene_id in range(n_scenes):
        members = [int(scene_rng.integers(0, catalog_size))]
        partner = catalog.companion(members[0])
        if partner is not None and objects_per_scene > 1 and scene_rng.uniform() < CO_OCCUR_PROB:
            members.append(partner)
        while len(members) < objects_per_scene:
            cand = int(scene_rng.integers(0, catalog_size))
            if cand not in members:
                members.append(cand)
        scene = SceneRecord(
            scene_id=scene_id,
            object_ids=tuple(sorted(members)),
            seed=int(seed_rng.integers(0, 2**63 - 1)),
        )
        scenes.append(scene)

        mentions = list(scene.object_ids)
        caption_rng.shuffle(mentions)
        if caption_rng.uniform() < bias:
            lures = [
                catalog.companion(o)
                for o in scene.object_ids
                if catalog.companion(o) is not None
                and catalog.companion(o) not in scene.object_ids
            ]
            if lures:
                lure = int(lures[int(caption_rng.integers(0, len(lures)))])
                pos = int(caption_rng.integers(0, len(mentions) + 1))
                mentions.insert(pos, lure)
        captions.append(caption_record(scene_id, caption_tokens(mentions, catalog), catalog))
    return scenes, captions


def training_triples(scenes: Sequence[SceneRecord], captions: Sequence[CaptionRecord],
                     catalog: Catalog, n_visual: int, patch_dim: int):
    """(patches, prompt, caption tokens) triples for language-model training."""
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for cap in captions:
        scene = by_id.get(cap.scene_id)
        if scene is None:
            raise InvalidInputError(f"caption references unknown scene {cap.scene_id}")
        patches = scene_patches(scene, catalog, n_visual, patch_dim)
        out.append((patches, list(DESCRIBE_PROMPT), list(cap.tokens)))
    return out


# ---------------------------------------------------------------------------
# serialization (line-delimited JSON)


def write_scenes(path, scenes: Iterable[SceneRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in scenes:
            fh.write(json.dumps(
                {"scene_id": s.scene_id, "object_ids": list(s.object_ids), "seed": s.seed}
            ) + "\n")


def read_scenes(path) -> list[SceneRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out.append(SceneRecord(
                scene_id=int(raw["scene_id"]),
                object_ids=tuple(int(o) for o in raw["object_ids"]),
                seed=int(raw["seed"]),
            ))
    return out


def write_captions(path, captions: Iterable[CaptionRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for c in captions:
            fh.write(json.dumps({"scene_id": c.scene_id, "tokens": list(c.tokens)}) + "\n")


def read_captions(path, catalog: Catalog) -> list[CaptionRecord]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            raw = json.loads(line)
            out.append(caption_record(int(raw["scene_id"]), raw["tokens"], catalog))
    return out


# ---------------------------------------------------------------------------
# hallucination metrics


@dataclass(frozen=True)
class ChairCounts:
    hallucinated_mentions: int
    total_mentions: int
    hallucinated_captions: int
    total_captions: int


@dataclass(frozen=True)
class ChairScores:
    """c_s: fraction of captions with any hallucinated mention;
    c_i: fraction of object mentions that are hallucinated."""

    c_s: float
    c_i: float
    counts: ChairCounts
    degenerate: bool  # no mentions at all; c_i reported as 0

    def to_json(self) -> str:
        return json.dumps({
            "c_s": self.c_s, "c_i": self.c_i, "degenerate": self.degenerate,
            "counts": {
                "hallucinated_mentions": self.counts.hallucinated_mentions,
                "total_mentions": self.counts.total_mentions,
                "hallucinated_captions": self.counts.hallucinated_captions,
                "total_captions": self.counts.total_captions,
            },
        })


def chair_scores(scenes: Iterable[SceneRecord], captions: Iterable[CaptionRecord]) -> ChairScores:
    by_id = {s.scene_id: s for s in scenes}
    captions = list(captions)
    if not captions:
        raise InvalidInputError("no captions to score")
    halluc_mentions = 0
    total_mentions = 0
    halluc_captions = 0
    for cap in captions:
        scene = by_id.get(cap.scene_id)
        if scene is None:
            raise InvalidInputError(f"caption references unknown scene {cap.scene_id}")
        present = set(scene.object_ids)
        mentioned = cap.mentioned_object_ids
        wrong = {o for o in mentioned if o not in present}
        halluc_mentions += len(wrong)
        total_mentions += len(mentioned)
        if wrong:
            halluc_captions += 1
    counts = ChairCounts(halluc_mentions, total_mentions, halluc_captions, len(captions))
    return ChairScores(
        c_s=halluc_captions / len(captions),
        c_i=halluc_mentions / total_mentions if total_mentions else 0.0,
        counts=counts,
        degenerate=total_mentions == 0,
    )


# ---------------------------------------------------------------------------
# presence probe


@dataclass(frozen=True)
class PopeQuestion:
    scene_id: int
    object_id: int
    present: bool


@dataclass(frozen=True)
class PopeReport:
    accuracy: float
    f1: float
    n_questions: int
    n_invalid: int  # answers with no yes/no within the step budget
    tp: int
    fp: int
    tn: int
    fn: int

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy, "f1": self.f1,
            "n_questions": self.n_questions, "n_invalid": self.n_invalid,
            "tp": self.tp, "fp": self.fp, "tn": self.tn, "fn": self.fn,
        })


def build_pope_questions(scenes: Sequence[SceneRecord], catalog: Catalog,
                         n_questions: int, rng: Rng) -> list[PopeQuestion]:
    """Balanced random probe: half present objects, half absent, shuffled."""
    if n_questions < 2:
        raise InvalidInputError("need at least 2 questions for a balanced probe")
    scenes = list(scenes)
    if not scenes:
        raise InvalidInputError("no scenes to probe")
    n_yes = n_questions // 2 + (n_questions % 2)
    questions = []
    for i in range(n_questions):
        scene = scenes[int(rng.integers(0, len(scenes)))]
        if i < n_yes:
            obj = int(scene.object_ids[int(rng.integers(0, len(scene.object_ids)))])
            questions.append(PopeQuestion(scene.scene_id, obj, True))
        else:
            absent = [o for o in catalog.object_ids if o not in scene.object_ids]
            if not absent:
                raise InvalidInputError(
                    f"scene {scene.scene_id} covers the whole catalog; "
                    "no absent object to probe")
            obj = int(absent[int(rng.integers(0, len(absent)))])
            questions.append(PopeQuestion(scene.scene_id, obj, False))
    rng.shuffle(questions)
    return questions


def pope_eval(questions: Sequence[PopeQuestion], answers: Sequence[bool | None]) -> PopeReport:
    """Score answers; ``None`` (no yes/no emitted) counts as the wrong label."""
    if len(questions) != len(answers):
        raise InvalidInputError("one answer required per question")
    tp = fp = tn = fn = invalid = 0
    for q, ans in zip(questions, answers):
        if ans is None:
            invalid += 1
            ans = not q.present  # forced incorrect
        if q.present and ans:
            tp += 1
        elif q.present and not ans:
            fn += 1
        elif not q.present and ans:
            fp += 1
        else:
            tn += 1
    total = len(questions)
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PopeReport(
        accuracy=(tp + tn) / total, f1=f1, n_questions=total, n_invalid=invalid,
        tp=tp, fp=fp, tn=tn, fn=fn,
    )


ANSWER_STEP_BUDGET = 4


def model_answerer(params, config, purifier, dcfg, catalog: Catalog,
                   scenes_by_id: dict[int, SceneRecord]) -> Callable[[PopeQuestion], bool | None]:
    """Answer presence probes by decoding; first yes/no token wins."""
    from .decoding import decode  # local import: synthbench -> decoding only here
    from dataclasses import replace

    short_cfg = replace(dcfg, max_new_tokens=ANSWER_STEP_BUDGET)

    def answer(question: PopeQuestion) -> bool | None:
        scene = scenes_by_id[question.scene_id]
        patches = scene_patches(scene, catalog, config.n_visual, config.patch_dim)
        result = decode(params, config, purifier, patches,
                        list(pope_prompt(catalog.token(question.object_id))), short_cfg)
        for tok in result.tokens:
            if tok == YES:
                return True
            if tok == NO:
                return False
        return None

    return answer


def pope_probe(params, config, purifier, scenes: Sequence[SceneRecord], dcfg,
               n_questions: int, seed: int, catalog: Catalog,
               answerer: Callable[[PopeQuestion], bool | None] | None = None) -> PopeReport:
    """Run the balanced probe end to end and score it."""
    rng = Rng(seed).split("pope-questions")
    questions = build_pope_questions(scenes, catalog, n_questions, rng)
    if answerer is None:
        answerer = model_answerer(params, config, purifier, dcfg, catalog,
                                  {s.scene_id: s for s in scenes})
    answers = [answerer(q) for q in questions]
    return pope_eval(questions, answers)


def qa_pairs(scenes: Sequence[SceneRecord], catalog: Catalog, n_pairs: int,
             rng: Rng, n_visual: int, patch_dim: int):
    """Balanced yes/no training triples (patches, prompt, answer tokens)."""
    questions = build_pope_questions(scenes, catalog, n_pairs, rng)
    by_id = {s.scene_id: s for s in scenes}
    out = []
    for q in questions:
        patches = scene_patches(by_id[q.scene_id], catalog, n_visual, patch_dim)
        answer = YES if q.present else NO
        out.append((patches, list(pope_prompt(catalog.token(q.object_id))), [answer, EOS]))
    return out


# ---------------------------------------------------------------------------
# throughput


@dataclass(frozen=True)
class ThroughputSummary:
    mean_tps: float
    stdev_tps: float
    n_runs: int


def throughput(results) -> ThroughputSummary:
    """Mean and spread of per-run decode speed in tokens per second."""
    rates = [float(r.tokens_per_second) for r in results]
    if not rates:
        raise InvalidInputError("no decode results to summarize")
    return ThroughputSummary(
        mean_tps=statistics.fmean(rates),
        stdev_tps=statistics.stdev(rates) if len(rates) > 1 else 0.0,
        n_runs=len(rates),
    )
