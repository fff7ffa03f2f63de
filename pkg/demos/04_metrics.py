"""The evaluation metric suite on hand-built examples.

Shows corpus BLEU with its brevity penalty, joint goal accuracy with the
thanks-turn exclusion, entity match rate against a toy knowledge base, and
the three embedding-based similarity variants.
"""
import math

from statespan.corpus import (DialogueSession, Entity, KnowledgeBase,
                              SlotSchema, StateAnnotation, Turn)
from statespan.decoding import SessionPrediction
from statespan.evaluation import (bleu, embedding_metric, entity_match_rate,
                                  joint_goal_accuracy, synthesize_embeddings)


def main() -> None:
    print("== BLEU ==")
    refs = [["the", "cat", "sat", "down"]]
    print(f"identical   : {bleu(refs, refs):.4f}")
    short = [["the", "cat", "sat"]]
    got = bleu(short, refs)
    print(f"one dropped : {got:.4f}  "
          f"(brevity penalty exp(1-4/3) = {math.exp(1 - 4 / 3):.4f})")

    print("\n== joint goal accuracy ==")
    gold = [StateAnnotation(inf={"food": "thai"}),
            StateAnnotation(inf={"food": "thai", "area": "north"})]
    pred = [StateAnnotation(inf={"food": "thai"}),
            StateAnnotation(inf={"food": "thai"})]
    acc, n, excl = joint_goal_accuracy(pred, gold, [False, False])
    print(f"accuracy {acc:.2f} over {n} turns ({excl} excluded)")

    print("\n== entity match rate ==")
    schema = SlotSchema(informable={"food": ["thai", "greek"]},
                        requestable=["phone"])
    kb = KnowledgeBase(schema=schema, entities=[
        Entity(0, {"food": "thai", "name": "n0", "phone": "p0"}),
        Entity(1, {"food": "greek", "name": "n1", "phone": "p1"})])
    sess = DialogueSession(id="d0", turns=[
        Turn(user=["thai", "please"], resp_delex=["name_SLOT", "serves"],
             resp_surface=["n0", "serves"],
             state=StateAnnotation(inf={"food": "thai"}))],
        target_entity=0)
    hit = SessionPrediction(session_id="d0",
                            states=[StateAnnotation(inf={"food": "thai"})],
                            spans=[["thai"]], responses=[["name_SLOT"]])
    rate, skipped, undefined = entity_match_rate([hit], [sess], kb)
    print(f"match rate {rate:.2f} (skipped {skipped}, undefined {undefined})")

    print("\n== embedding similarities ==")
    emb = synthesize_embeddings(["a", "b", "c", "d"], dim=16, seed=0)
    cands, golds = [["a", "b"]], [["a", "c"]]
    for variant in ("average", "greedy", "extrema"):
        score, _ = embedding_metric(variant, cands, golds, emb)
        print(f"{variant:8s}: {score:.4f}")


if __name__ == "__main__":
    main()
