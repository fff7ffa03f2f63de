import itertools
import math

import numpy as np
import pytest

from statespan.corpus import (DialogueSession, Entity, GenConfig,
                              KnowledgeBase, SlotSchema, StateAnnotation,
                              Turn, generate_synthetic_corpus, kb_search)
from statespan.decoding import SessionPrediction
from statespan.evaluation import (EvalReport, bleu, embedding_metric,
                                  entity_match_rate, joint_goal_accuracy,
                                  load_embeddings, predicted_keyword_proportion,
                                  save_embeddings, synthesize_embeddings)


class TestBleu:
    def test_identical_corpora_score_one(self):
        cands = [["the", "cat", "sat", "down"], ["hello", "there", "friend", "x"]]
        assert bleu(cands, cands) == pytest.approx(1.0)

    def test_zero_unigram_overlap_scores_zero(self):
        assert bleu([["a", "b"]], [["c", "d"]]) == 0.0

    def test_brevity_penalty_hand_value(self):
        # precisions 1.0 with add-one smoothing on the empty 4-gram count,
        # brevity penalty exp(1 - 4/3)
        got = bleu([["the", "cat", "sat"]], [["the", "cat", "sat", "down"]])
        assert got == pytest.approx(math.exp(1.0 - 4.0 / 3.0), abs=1e-12)

    def test_empty_corpus_rejected(self):
        with pytest.raises(ValueError):
            bleu([], [])

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            bleu([["a"]], [])

    def test_permutation_invariant(self):
        cands = [["a", "b", "c"], ["d", "e"], ["f", "g", "h", "i"]]
        refs = [["a", "b", "x"], ["d", "y"], ["f", "g", "h", "z"]]
        perm = [2, 0, 1]
        assert bleu(cands, refs) == pytest.approx(
            bleu([cands[i] for i in perm], [refs[i] for i in perm]))

    def test_statistically_non_increasing_under_deletion(self):
        rng_tokens = [f"t{i}" for i in range(30)]
        drops = 0
        for seed in range(20):
            rng = np.random.default_rng(seed)
            refs = [[rng_tokens[i] for i in rng.integers(0, 30, size=8)]
                    for _ in range(10)]
            cands = [list(r) for r in refs]
            before = bleu(cands, refs)
            for c in cands:
                if len(c) > 1:
                    del c[int(rng.integers(len(c)))]
            after = bleu(cands, refs)
            if after <= before + 1e-12:
                drops += 1
        assert drops >= 18


class TestJointGoalAccuracy:
    def s(self, **inf):
        return StateAnnotation(inf=dict(inf))

    def test_all_exact_is_one(self):
        gold = [self.s(a="x"), self.s(a="x", b="y")]
        got, n, _ = joint_goal_accuracy(gold, gold, [False, False])
        assert got == 1.0 and n == 2

    def test_two_of_three(self):
        pred = [self.s(a="x"), self.s(a="x"), self.s(a="z")]
        gold = [self.s(a="x"), self.s(a="x"), self.s(a="y")]
        got, _, _ = joint_goal_accuracy(pred, gold, [False] * 3)
        assert got == pytest.approx(2 / 3)

    def test_thanks_only_excluded(self):
        pred = [self.s(a="x"), self.s(a="x"), self.s(a="x"), self.s(a="WRONG")]
        gold = [self.s(a="x"), self.s(a="x"), self.s(a="x"), self.s(a="y")]
        got, n, excl = joint_goal_accuracy(pred, gold,
                                           [False, False, False, True])
        assert got == 1.0 and n == 3 and excl == 1

    def test_misaligned_lists_rejected(self):
        with pytest.raises(ValueError):
            joint_goal_accuracy([self.s()], [], [])


def make_kb():
    schema = SlotSchema(informable={"food": ["a", "b"]},
                        requestable=["phone"])
    return KnowledgeBase(schema=schema, entities=[
        Entity(0, {"food": "a", "name": "n0", "phone": "p0"}),
        Entity(1, {"food": "b", "name": "n1", "phone": "p1"}),
    ])


def session_with(target, resp_tokens, inf):
    return DialogueSession(id="s", turns=[
        Turn(user=["hi"], resp_delex=resp_tokens, resp_surface=resp_tokens,
             state=StateAnnotation(inf=dict(inf)))], target_entity=target)


def prediction(inf, resp):
    return SessionPrediction(session_id="s",
                             states=[StateAnnotation(inf=dict(inf))],
                             spans=[[]], responses=[resp])


class TestEntityMatchRate:
    def test_gold_without_placeholders_is_skipped_and_flagged(self):
        kb = make_kb()
        gold = [session_with(0, ["hello", "there"], {"food": "a"})]
        pred = [prediction({"food": "a"}, ["name_SLOT"])]
        rate, skipped, undefined = entity_match_rate(pred, gold, kb)
        assert (rate, skipped, undefined) == (0.0, 1, True)

    def test_model_without_placeholders_fails(self):
        kb = make_kb()
        gold = [session_with(0, ["name_SLOT", "is", "nice"], {"food": "a"})]
        pred = [prediction({"food": "a"}, ["no", "placeholder"])]
        rate, skipped, undefined = entity_match_rate(pred, gold, kb)
        assert rate == 0.0 and skipped == 0 and not undefined

    def test_half_correct(self):
        kb = make_kb()
        gold = [session_with(0, ["name_SLOT"], {"food": "a"}),
                session_with(1, ["name_SLOT"], {"food": "b"})]
        pred = [prediction({"food": "a"}, ["name_SLOT"]),
                prediction({"food": "a"}, ["name_SLOT"])]
        rate, _, _ = entity_match_rate(pred, gold, kb)
        assert rate == 0.5


class TestEmbeddingMetrics:
    def test_identical_inputs_score_one(self):
        emb = synthesize_embeddings(["a", "b", "c"], dim=8, seed=0)
        cands = [["a", "b"], ["c"]]
        for variant in ("average", "greedy", "extrema"):
            got, skipped = embedding_metric(variant, cands, cands, emb)
            assert got == pytest.approx(1.0)
            assert skipped == 0

    def test_orthogonal_tokens_score_zero(self):
        emb = {"x": np.array([1.0, 0.0]), "y": np.array([0.0, 1.0])}
        for variant in ("average", "greedy", "extrema"):
            got, _ = embedding_metric(variant, [["x"]], [["y"]], emb)
            assert got == pytest.approx(0.0)

    def test_greedy_hand_value_on_2d(self):
        emb = {"a": np.array([1.0, 0.0]), "b": np.array([0.0, 1.0]),
               "c": np.array([1.0, 1.0]) / math.sqrt(2)}
        got, _ = embedding_metric("greedy", [["a", "b"]], [["c"]], emb)
        # forward: each of a,b best-matches c at cos=1/sqrt(2); backward:
        # c best-matches either at 1/sqrt(2)
        assert got == pytest.approx(1.0 / math.sqrt(2))

    def test_missing_tokens_skip_pair(self):
        emb = {"a": np.array([1.0, 0.0])}
        got, skipped = embedding_metric("average", [["zzz"]], [["a"]], emb)
        assert skipped == 1 and got == 0.0

    def test_unknown_variant_rejected(self):
        with pytest.raises(ValueError):
            embedding_metric("softcos", [], [], {})

    def test_file_round_trip(self, tmp_path):
        emb = synthesize_embeddings(["tok1", "tok2"], dim=4, seed=1)
        p = tmp_path / "emb.txt"
        save_embeddings(str(p), emb)
        back = load_embeddings(str(p))
        assert set(back) == {"tok1", "tok2"}
        for k in back:
            assert np.allclose(back[k], emb[k], atol=1e-6)


class TestPredictedKeywords:
    def test_all_copied_is_flagged(self):
        got, undefined = predicted_keyword_proportion(
            [["ctxtok"]], [{"ctxtok"}], [["resp"]])
        assert undefined and got == 0.0

    def test_single_novel_keyword_hit(self):
        got, undefined = predicted_keyword_proportion(
            [["alpha", "beta"]], [{"beta"}], [["alpha"]])
        assert not undefined
        assert got == 1.0

    def test_half_hit(self):
        got, _ = predicted_keyword_proportion(
            [["alpha", "beta"]], [set()], [["alpha"]])
        assert got == 0.5

    def test_stop_and_reserved_tokens_ignored(self):
        got, undefined = predicted_keyword_proportion(
            [["the", "</b>", "alpha"]], [set()], [["alpha"]],
        )
        assert got == 1.0


def brute_force_jga(pred, gold, excl):
    """Straight-line reimplementation used as an independent oracle."""
    num = den = 0
    for i in range(len(gold)):
        if excl[i]:
            continue
        den += 1
        if sorted(pred[i].inf.items()) == sorted(gold[i].inf.items()):
            num += 1
    return num / den if den else 0.0


def brute_force_emr(preds, sessions, kb):
    num = den = 0
    ph = set(kb.schema.placeholders())
    for pred, sess in zip(preds, sessions):
        idxs = [i for i, t in enumerate(sess.turns)
                if any(tok in ph for tok in t.resp_delex)]
        if not idxs:
            continue
        den += 1
        if not any(tok in ph for resp in pred.responses for tok in resp):
            continue
        constraints = pred.states[idxs[-1]].inf
        ok = [e for e in kb.entities
              if all(e.attrs.get(k) == v for k, v in constraints.items())]
        ok.sort(key=lambda e: e.id)
        if ok and ok[0].id == sess.target_entity:
            num += 1
    return num / den if den else 0.0


class TestBruteForceAgreement:
    def test_fifty_random_evaluation_sets(self):
        sessions, kb = generate_synthetic_corpus(
            GenConfig(sessions=50, values_per_slot=5, entities=12), seed=21)
        schema = kb.schema
        values = schema.all_values()
        rng = np.random.default_rng(99)
        for trial in range(50):
            subset = [sessions[i] for i in
                      rng.choice(len(sessions), size=6, replace=False)]
            preds, flat_pred, flat_gold, flat_excl = [], [], [], []
            for s in subset:
                states, responses = [], []
                for t in s.turns:
                    st = StateAnnotation(inf=dict(t.state.inf))
                    if rng.random() < 0.4 and st.inf:
                        slot = list(st.inf)[0]
                        st.inf[slot] = str(rng.choice(
                            schema.informable[slot]))
                    states.append(st)
                    responses.append(list(t.resp_delex)
                                     if rng.random() < 0.8 else ["nothing"])
                    flat_pred.append(st)
                    flat_gold.append(t.state)
                    flat_excl.append(t.thanks_only)
                preds.append(SessionPrediction(
                    session_id=s.id, states=states,
                    spans=[[] for _ in s.turns], responses=responses))
            got_jga, _, _ = joint_goal_accuracy(flat_pred, flat_gold,
                                                flat_excl)
            assert got_jga == pytest.approx(
                brute_force_jga(flat_pred, flat_gold, flat_excl), abs=1e-15)
            got_emr, _, _ = entity_match_rate(preds, subset, kb)
            assert got_emr == pytest.approx(
                brute_force_emr(preds, subset, kb), abs=1e-15)


class TestEvalReport:
    def test_json_and_table_render(self):
        r = EvalReport(bleu=0.5, joint_goal_accuracy=0.25)
        r.counts["turns_evaluated"] = 4
        assert '"bleu": 0.5' in r.to_json()
        table = r.render_table()
        assert "joint goal accuracy" in table
        assert "0.2500" in table
