"""End-to-end training on a small synthetic corpus.

Generates a corpus, trains for a few epochs at reduced size, and decodes one
dialogue, printing the predicted state span, the tracked constraint state,
and the matched knowledge-base entities per turn.  Takes a few minutes.
"""
from statespan.corpus import (GenConfig, generate_synthetic_corpus,
                              kb_search, split_corpus)
from statespan.decoding import DecodeConfig, decode_sessions
from statespan.training import TrainingConfig, build_vocabulary, fit


def main() -> None:
    sessions, kb = generate_synthetic_corpus(
        GenConfig(sessions=80, values_per_slot=6, entities=12), seed=5)
    splits = split_corpus(sessions)
    vocab = build_vocabulary(sessions, kb.schema)

    cfg = TrainingConfig(hidden_size=24, emb_size=24, max_epochs=20,
                         patience=20, seed=1)
    result = fit(splits["train"], splits["valid"], kb.schema, cfg,
                 vocab=vocab)
    model = result.model
    for log in result.log:
        print(f"epoch {log.epoch}: train {log.train.total:.1f} "
              f"valid {log.valid.total:.1f}")

    print("\n== decoding one held-out dialogue ==")
    sess = splits["test"][0]
    pred = decode_sessions(model, vocab, [sess], kb.schema,
                           DecodeConfig())[0]
    for i, turn in enumerate(sess.turns):
        print(f"user : {' '.join(turn.user)}")
        print(f"span : {' '.join(pred.spans[i])}")
        print(f"state: {pred.states[i].inf}")
        hits = kb_search(kb, pred.states[i].inf)
        print(f"kb   : {len(hits)} matched entities")
        print(f"sys  : {' '.join(pred.responses[i])}")
        print(f"gold : {' '.join(turn.resp_delex)}\n")


if __name__ == "__main__":
    main()
