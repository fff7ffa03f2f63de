"""Dialogue corpus data model, synthetic corpus generator, and knowledge base.

Corpus files are JSON-lines with a version header line; the knowledge base is
a single JSON document after a version header line.  Both writers emit
canonical JSON (sorted keys, no extra whitespace) so serialization
round-trips byte-exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .vocab import EOS_SPAN, SPAN_DELIM

CORPUS_FORMAT = "statespan-corpus-v1"
KB_FORMAT = "statespan-kb-v1"


class CorpusLoadError(Exception):
    pass


class GenerationError(Exception):
    pass


# -- data model ------------------------------------------------------------

@dataclass
class SlotSchema:
    informable: Dict[str, List[str]]          # slot name -> closed value list
    requestable: List[str]                    # slot names
    name_attr: str = "name"

    def placeholders(self) -> List[str]:
        return [f"{self.name_attr}_SLOT"] + [f"{r}_SLOT" for r in self.requestable]

    def informable_slots(self) -> List[str]:
        return list(self.informable)

    def all_values(self) -> Dict[str, str]:
        """value token -> owning slot (values are unique across slots)."""
        out = {}
        for slot, values in self.informable.items():
            for v in values:
                out[v] = slot
        return out

    def to_dict(self) -> dict:
        return {"informable": self.informable, "requestable": self.requestable,
                "name_attr": self.name_attr}

    @classmethod
    def from_dict(cls, d: dict) -> "SlotSchema":
        return cls(informable={k: list(v) for k, v in d["informable"].items()},
                   requestable=list(d["requestable"]),
                   name_attr=d.get("name_attr", "name"))


@dataclass
class Entity:
    id: int
    attrs: Dict[str, str]


@dataclass
class KnowledgeBase:
    schema: SlotSchema
    entities: List[Entity]

    def by_id(self, eid: int) -> Entity:
        for e in self.entities:
            if e.id == eid:
                return e
        raise KeyError(eid)


def kb_search(kb: KnowledgeBase, constraints: Dict[str, str]) -> List[Entity]:
    """Entities satisfying every constraint exactly, ordered by id."""
    for slot in constraints:
        if slot not in kb.schema.informable:
            raise KeyError(f"unknown constraint slot: {slot}")
    hits = [e for e in kb.entities
            if all(e.attrs.get(s) == v for s, v in constraints.items())]
    return sorted(hits, key=lambda e: e.id)


@dataclass
class StateAnnotation:
    inf: Dict[str, str] = field(default_factory=dict)
    req: List[str] = field(default_factory=list)

    def span_tokens(self, schema: SlotSchema) -> List[str]:
        """Canonical bspan: values in schema slot order, delimiter,
        requestables in schema order, terminator."""
        toks = [self.inf[s] for s in schema.informable if s in self.inf]
        toks.append(SPAN_DELIM)
        toks.extend(r for r in schema.requestable if r in self.req)
        toks.append(EOS_SPAN)
        return toks

    def copy(self) -> "StateAnnotation":
        return StateAnnotation(dict(self.inf), list(self.req))

    def to_dict(self) -> dict:
        return {"inf": self.inf, "req": self.req}

    @classmethod
    def from_dict(cls, d: dict) -> "StateAnnotation":
        return cls(inf=dict(d["inf"]), req=list(d["req"]))


@dataclass
class Turn:
    user: List[str]
    resp_delex: List[str]
    resp_surface: List[str]
    state: Optional[StateAnnotation]
    thanks_only: bool = False


@dataclass
class DialogueSession:
    id: str
    turns: List[Turn]
    target_entity: Optional[int] = None


# -- (de)serialization -----------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_corpus(path: str, sessions: Sequence[DialogueSession]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"format": CORPUS_FORMAT}) + "\n")
        for s in sessions:
            row = {
                "id": s.id,
                "target_entity": s.target_entity,
                "turns": [{
                    "user": " ".join(t.user),
                    "resp_delex": " ".join(t.resp_delex),
                    "resp_surface": " ".join(t.resp_surface),
                    "state": t.state.to_dict() if t.state is not None else None,
                    "thanks_only": t.thanks_only,
                } for t in s.turns],
            }
            f.write(_dumps(row) + "\n")


def load_corpus(path: str, schema: Optional[SlotSchema] = None) -> List[DialogueSession]:
    sessions: List[DialogueSession] = []
    errors: List[str] = []
    with open(path, encoding="utf-8") as f:
        header = f.readline()
        if not header.strip():
            return []
        try:
            fmt = json.loads(header).get("format")
        except json.JSONDecodeError:
            raise CorpusLoadError(f"{path}: missing corpus header line")
        if fmt != CORPUS_FORMAT:
            raise CorpusLoadError(f"{path}: unsupported corpus format {fmt!r}")
        for lineno, line in enumerate(f, start=2):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as e:
                errors.append(f"line {lineno}: invalid JSON ({e.msg})")
                continue
            try:
                turns = []
                for t in row["turns"]:
                    state = (StateAnnotation.from_dict(t["state"])
                             if t.get("state") is not None else None)
                    turns.append(Turn(user=t["user"].split(),
                                      resp_delex=t["resp_delex"].split(),
                                      resp_surface=t["resp_surface"].split(),
                                      state=state,
                                      thanks_only=bool(t.get("thanks_only", False))))
                if not turns:
                    errors.append(f"line {lineno}: session has no turns")
                    continue
                sessions.append(DialogueSession(id=str(row["id"]), turns=turns,
                                                target_entity=row.get("target_entity")))
            except (KeyError, TypeError, AttributeError) as e:
                errors.append(f"line {lineno}: bad field {e!r}")
    if errors:
        raise CorpusLoadError(f"{path}: " + "; ".join(errors))
    if schema is not None:
        values = schema.all_values()
        for s in sessions:
            for t in s.turns:
                if t.state is None:
                    continue
                for slot, v in t.state.inf.items():
                    if values.get(v) != slot:
                        raise CorpusLoadError(
                            f"{path}: session {s.id}: state value {v!r} "
                            f"not in schema slot {slot!r}")
    return sessions


def save_kb(path: str, kb: KnowledgeBase) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(_dumps({"format": KB_FORMAT}) + "\n")
        f.write(_dumps({
            "schema": kb.schema.to_dict(),
            "entities": [{"id": e.id, "attrs": e.attrs} for e in kb.entities],
        }) + "\n")


def load_kb(path: str) -> KnowledgeBase:
    with open(path, encoding="utf-8") as f:
        header = json.loads(f.readline())
        if header.get("format") != KB_FORMAT:
            raise CorpusLoadError(f"{path}: unsupported kb format")
        body = json.loads(f.read())
    schema = SlotSchema.from_dict(body["schema"])
    entities = [Entity(id=int(e["id"]), attrs=dict(e["attrs"]))
                for e in body["entities"]]
    if len({e.id for e in entities}) != len(entities):
        raise CorpusLoadError(f"{path}: duplicate entity ids")
    return KnowledgeBase(schema=schema, entities=entities)


# -- delexicalization ------------------------------------------------------

def delexicalize(tokens: Sequence[str], entity: Entity,
                 schema: SlotSchema) -> List[str]:
    """Replace entity attribute mentions with placeholder tokens.

    Longest value match first, so multi-token values from ingested corpora
    win over their single-token prefixes.
    """
    repl: List[Tuple[List[str], str]] = []
    for attr in [schema.name_attr] + schema.requestable:
        if attr in entity.attrs:
            repl.append((entity.attrs[attr].split(), f"{attr}_SLOT"))
    repl.sort(key=lambda p: len(p[0]), reverse=True)
    out: List[str] = []
    i = 0
    toks = list(tokens)
    while i < len(toks):
        hit = None
        for value, slot_tok in repl:
            if value and toks[i:i + len(value)] == value:
                hit = (len(value), slot_tok)
                break
        if hit:
            out.append(hit[1])
            i += hit[0]
        else:
            out.append(toks[i])
            i += 1
    return out


def lexicalize(tokens: Sequence[str], entity: Entity,
               schema: SlotSchema) -> List[str]:
    """Inverse of delexicalize on closed templates."""
    table = {f"{attr}_SLOT": entity.attrs[attr].split()
             for attr in [schema.name_attr] + schema.requestable
             if attr in entity.attrs}
    out: List[str] = []
    for tok in tokens:
        out.extend(table.get(tok, [tok]))
    return out


# -- synthetic corpus generator --------------------------------------------

@dataclass
class GenConfig:
    slots: int = 3
    values_per_slot: int = 20
    entities: int = 60
    sessions: int = 800
    min_turns: int = 1
    max_turns: int = 4
    revise_prob: float = 0.2
    thanks_prob: float = 0.35


_SLOT_NAMES = ["food", "area", "price", "vibe", "size", "style"]
_REQUESTABLES = ["phone", "address", "postcode"]

_SYL_A = ["ba", "ke", "mo", "ti", "su", "ra", "ne", "lo", "pi", "da",
          "fu", "gi", "ha", "jo", "wa", "ze", "cu", "vi", "ny", "qo"]
_SYL_B = ["lan", "mir", "tok", "ver", "sun", "din", "rel", "pod", "gam", "hex",
          "zor", "fin", "kul", "bry", "nam", "wix", "tes", "jam", "ora", "ply"]

REVEAL_TEMPLATES = [
    "i am looking for a {vals} place",
    "i want something {vals}",
    "can you find me a {vals} option",
    "do you have anything {vals}",
]
REVISE_TEMPLATES = [
    "actually i would rather have {vals}",
    "no wait make that {vals} instead",
    "change that to {vals} please",
]
REQUEST_TEMPLATES = [
    "what is the {reqs} ?",
    "could you give me the {reqs} ?",
    "please tell me the {reqs}",
]
MATCH_TEMPLATES = [
    "name_SLOT is a nice {vals} choice",
    "i would suggest name_SLOT for {vals}",
    "name_SLOT matches {vals} nicely",
]
NOMATCH_TEMPLATES = [
    "sorry i could not find anything {vals}",
    "there is nothing matching {vals} i am afraid",
    "no luck finding a {vals} place",
]
REQUEST_ANSWER_TEMPLATES = [
    "the {r0} of name_SLOT is {p0}",
    "name_SLOT has {r0} {p0}",
    "sure the {r0} is {p0} for name_SLOT",
]
NOMATCH_ANSWER_TEMPLATES = [
    "i have no result to give a {r0} for",
    "there is no match so no {r0} available",
    "cannot provide a {r0} without a match",
]
THANKS_USER = [
    "thank you goodbye",
    "thanks a lot bye",
    "great thank you so much",
]
THANKS_RESP = [
    "you are welcome goodbye",
    "glad to help bye",
    "happy to help goodbye",
]


def _make_values(slot_idx: int, count: int) -> List[str]:
    out = []
    for i in range(count):
        a = _SYL_A[(i * 3 + slot_idx * 7) % len(_SYL_A)]
        b = _SYL_B[(i * 5 + slot_idx * 11) % len(_SYL_B)]
        out.append(f"{a}{b}{slot_idx}{i % 10}")
    if len(set(out)) != len(out):
        raise GenerationError("value synthesis collision")
    return out


def build_schema(cfg: GenConfig) -> SlotSchema:
    if cfg.slots > len(_SLOT_NAMES):
        raise GenerationError(f"at most {len(_SLOT_NAMES)} slots supported")
    informable = {_SLOT_NAMES[i]: _make_values(i, cfg.values_per_slot)
                  for i in range(cfg.slots)}
    return SlotSchema(informable=informable, requestable=list(_REQUESTABLES))


def build_kb(cfg: GenConfig, schema: SlotSchema,
             rng: np.random.Generator) -> KnowledgeBase:
    if cfg.entities < 1:
        raise GenerationError("need at least one entity")
    slots = schema.informable_slots()
    combos = set()
    entities = []
    for i in range(cfg.entities):
        for _ in range(200):
            combo = tuple(schema.informable[s][int(rng.integers(len(schema.informable[s])))]
                          for s in slots)
            if combo not in combos:
                combos.add(combo)
                break
        else:
            raise GenerationError("could not draw a distinct attribute combination; "
                                  "too many entities for the value space")
        attrs = {s: v for s, v in zip(slots, combo)}
        attrs[schema.name_attr] = f"venue{i:03d}"
        attrs["phone"] = f"ph{i:03d}"
        attrs["address"] = f"addr{i:03d}"
        attrs["postcode"] = f"pc{i:03d}"
        entities.append(Entity(id=i, attrs=attrs))
    return KnowledgeBase(schema=schema, entities=entities)


def _pick(rng: np.random.Generator, options: Sequence[str]) -> str:
    return options[int(rng.integers(len(options)))]


def _gen_session(sid: str, kb: KnowledgeBase, cfg: GenConfig,
                 rng: np.random.Generator) -> DialogueSession:
    schema = kb.schema
    slots = schema.informable_slots()
    seed_entity = kb.entities[int(rng.integers(len(kb.entities)))]
    n_goal = int(rng.integers(1, len(slots) + 1))
    goal_slots = [slots[i] for i in sorted(rng.choice(len(slots), size=n_goal,
                                                      replace=False))]
    goal = {s: seed_entity.attrs[s] for s in goal_slots}
    target = kb_search(kb, goal)[0]  # first-by-id under the full goal

    thanks = rng.random() < cfg.thanks_prob
    budget = int(rng.integers(cfg.min_turns, cfg.max_turns + 1))
    content_budget = max(1, budget - (1 if thanks and budget > 1 else 0))
    # Turn plan: spread goal reveals over the first turns, request on the last
    # content turn.  Single-turn sessions reveal and request at once.
    reveal_turns = min(content_budget, n_goal)

    chunks: List[List[str]] = [[] for _ in range(reveal_turns)]
    for i, s in enumerate(goal_slots):
        chunks[i % reveal_turns].append(s)

    revise_slot = None
    if reveal_turns >= 2 and rng.random() < cfg.revise_prob:
        revise_slot = chunks[0][int(rng.integers(len(chunks[0])))]

    n_req = int(rng.integers(1, len(schema.requestable) + 1))
    req_names = [schema.requestable[i]
                 for i in sorted(rng.choice(len(schema.requestable), size=n_req,
                                            replace=False))]

    turns: List[Turn] = []
    state = StateAnnotation()
    for ti in range(reveal_turns):
        reveal = {}
        for s in chunks[ti]:
            if s == revise_slot and ti == 0 and reveal_turns >= 2:
                wrong = [v for v in schema.informable[s] if v != goal[s]]
                reveal[s] = wrong[int(rng.integers(len(wrong)))]
            else:
                reveal[s] = goal[s]
        corrected = (revise_slot is not None and ti > 0
                     and revise_slot not in chunks[ti]
                     and state.inf.get(revise_slot) != goal[revise_slot])
        if corrected:
            reveal[revise_slot] = goal[revise_slot]
        state = state.copy()
        state.inf.update(reveal)
        vals = " ".join(reveal[s] for s in slots if s in reveal)
        tmpl = REVISE_TEMPLATES if corrected and len(reveal) == 1 else REVEAL_TEMPLATES
        user = _pick(rng, tmpl).format(vals=vals).split()

        is_last_content = ti == reveal_turns - 1
        req_here = req_names if is_last_content else []
        if req_here:
            state = state.copy()
            state.req.extend(req_here)
            user = user + _pick(rng, REQUEST_TEMPLATES).format(
                reqs=" and the ".join(req_here)).split()

        hits = kb_search(kb, state.inf)
        if req_here:
            if hits:
                parts = [_pick(rng, REQUEST_ANSWER_TEMPLATES).format(
                    r0=r, p0=f"{r}_SLOT") for r in req_here]
            else:
                parts = [_pick(rng, NOMATCH_ANSWER_TEMPLATES).format(r0=r)
                         for r in req_here]
            resp_delex = " and ".join(parts).split()
        elif hits:
            resp_delex = _pick(rng, MATCH_TEMPLATES).format(
                vals=" ".join(state.inf[s] for s in slots if s in state.inf)).split()
        else:
            resp_delex = _pick(rng, NOMATCH_TEMPLATES).format(
                vals=" ".join(state.inf[s] for s in slots if s in state.inf)).split()
        answer = hits[0] if hits else None
        resp_surface = (lexicalize(resp_delex, answer, schema)
                        if answer is not None else list(resp_delex))
        turns.append(Turn(user=user, resp_delex=resp_delex,
                          resp_surface=resp_surface, state=state.copy()))

    if thanks and len(turns) < cfg.max_turns:
        turns.append(Turn(user=_pick(rng, THANKS_USER).split(),
                          resp_delex=_pick(rng, THANKS_RESP).split(),
                          resp_surface=_pick(rng, THANKS_RESP).split(),
                          state=state.copy(), thanks_only=True))
    return DialogueSession(id=sid, turns=turns, target_entity=target.id)


def generate_synthetic_corpus(cfg: GenConfig, seed: int
                              ) -> Tuple[List[DialogueSession], KnowledgeBase]:
    rng = np.random.default_rng(seed)
    schema = build_schema(cfg)
    kb = build_kb(cfg, schema, rng)
    sessions = [_gen_session(f"s{idx:05d}", kb, cfg, rng)
                for idx in range(cfg.sessions)]
    return sessions, kb


def split_corpus(sessions: Sequence[DialogueSession]
                 ) -> Dict[str, List[DialogueSession]]:
    """3:1:1 train/validation/test split, in corpus order."""
    n = len(sessions)
    n_train = (n * 3) // 5
    n_valid = n // 5
    return {
        "train": list(sessions[:n_train]),
        "valid": list(sessions[n_train:n_train + n_valid]),
        "test": list(sessions[n_train + n_valid:]),
    }


# -- CamRest-format adapter ------------------------------------------------

CAMREST_INFORMABLES = ["food", "pricerange", "area"]


def load_camrest(path: str) -> Tuple[List[DialogueSession], SlotSchema]:
    """Map CamRest-style annotations into the native data model.

    Expects the usual structure: a JSON list of dialogues, each with a
    `dial` list of turns carrying `usr.transcript`, `usr.slu` dialogue acts
    and `sys.sent`.  Inform acts accumulate constraints, request acts
    accumulate requestable slots.
    """
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    values: Dict[str, set] = {s: set() for s in CAMREST_INFORMABLES}
    requestables: set = set()
    sessions: List[DialogueSession] = []
    for di, dlg in enumerate(raw):
        turns: List[Turn] = []
        state = StateAnnotation()
        for t in dlg.get("dial", []):
            usr = t.get("usr", {})
            sys = t.get("sys", {})
            state = state.copy()
            for act in usr.get("slu", []):
                kind = act.get("act")
                for pair in act.get("slots", []):
                    if len(pair) != 2:
                        continue
                    a, b = pair
                    if kind == "inform" and a in CAMREST_INFORMABLES:
                        state.inf[a] = str(b)
                        values[a].add(str(b))
                    elif kind == "request":
                        slot = str(b if a == "slot" else a)
                        if slot not in state.req:
                            state.req.append(slot)
                        requestables.add(slot)
            resp = str(sys.get("sent", "")).split()
            turns.append(Turn(user=str(usr.get("transcript", "")).split(),
                              resp_delex=resp, resp_surface=resp,
                              state=state.copy()))
        if turns:
            sessions.append(DialogueSession(id=f"camrest{di:04d}", turns=turns))
    schema = SlotSchema(informable={s: sorted(values[s]) for s in CAMREST_INFORMABLES},
                        requestable=sorted(requestables))
    return sessions, schema
