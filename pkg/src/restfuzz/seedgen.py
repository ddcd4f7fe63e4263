"""Breadth-first seed-corpus generation from request layouts.

Enumerates request chains in BFS order by length.  A chain grows by one
request at a time; the new request must have all consumed resource
types produced earlier in the chain, and (beyond the first position)
must actually consume something the prefix produced — otherwise
unrelated requests would multiply the state space without adding any
dependency structure.

Each chain is instantiated into concrete seeds by filling every
fuzzable slot with the first ``dict_values_per_type`` values of its
alphabet (cross product).  Dependency slots stay as placeholder
markers; the executor resolves them from live responses.
"""

from __future__ import annotations

import itertools
import os
from dataclasses import dataclass

from .grammar import FUZZABLE_KINDS, Grammar, RequestLayout
from .parsing import LeafSpec, RuleSequence, TestCase, parse_test_case, render

INDEX_NAME = "index.txt"


@dataclass
class Seed:
    seed_id: str
    chain: tuple[str, ...]
    text: str
    case: TestCase


@dataclass
class SeedCorpus:
    seeds: list[Seed]
    partial: bool  # True when the budget cut enumeration short
    max_len: int
    dict_values_per_type: int


def enumerate_chains(g: Grammar, max_len: int) -> list[tuple[str, ...]]:
    """All dependency-consistent layout chains, BFS order by length."""
    chains: list[tuple[str, ...]] = []
    frontier: list[tuple[tuple[str, ...], set[str]]] = [((), set())]
    for _length in range(1, max_len + 1):
        nxt: list[tuple[tuple[str, ...], set[str]]] = []
        for chain, produced in frontier:
            for layout in g.requests:
                consumed = layout.consumed_resources()
                if not consumed <= produced:
                    continue
                if chain and not (consumed & produced):
                    # nothing ties this request to the prefix
                    continue
                if not chain and consumed:
                    continue  # redundant with the subset check; explicit
                new_chain = chain + (layout.name,)
                nxt.append((new_chain, produced | layout.produced_resources()))
        chains.extend(c for c, _ in nxt)
        frontier = nxt
    return chains


def _slot_value_lists(layout: RequestLayout, g: Grammar, k: int):
    """Per-fuzzable-slot candidate values (first k of each alphabet)."""
    lists = []
    for chunk in layout.fuzzable_chunks():
        values = g.alphabets.get(chunk.kind, [])
        if not values:
            raise ValueError(
                "layout %r: no alphabet values for fuzzable type %r"
                % (layout.name, chunk.kind)
            )
        lists.append(values[:k])
    return lists


def renderings_per_chain(g: Grammar, chain: tuple[str, ...], k: int) -> int:
    total = 1
    for name in chain:
        for values in _slot_value_lists(g.requests_by_name[name], g, k):
            total *= len(values)
    return total


def count_sequences(g: Grammar, max_len: int, dict_values_per_type: int = 2):
    """Size of the instantiated search space per chain length.

    Returns {length: (n_chains, n_renderings)} without materialising
    any seed text.
    """
    stats: dict[int, list[int]] = {}
    for chain in enumerate_chains(g, max_len):
        n = renderings_per_chain(g, chain, dict_values_per_type)
        bucket = stats.setdefault(len(chain), [0, 0])
        bucket[0] += 1
        bucket[1] += n
    return {length: (c, r) for length, (c, r) in sorted(stats.items())}


def _layout_leaves(layout: RequestLayout, g: Grammar, values: list[str]):
    """LeafSpecs for one request;``values`` fills fuzzable slots in order."""
    leaves = [LeafSpec(g.terminal_rule("method", layout.method).rule_id, section="method")]
    vit = iter(values)

    def slot(chunk, section):
        if chunk.kind == "static":
            return LeafSpec(g.terminal_rule("static", chunk.value).rule_id, section=section)
        if chunk.kind in FUZZABLE_KINDS:
            value = next(vit)
            rule = g.terminal_rule(chunk.kind, value)
            if rule is None:
                raise ValueError("no terminal rule for %s value %r" % (chunk.kind, value))
            return LeafSpec(rule.rule_id, section=section)
        # producer/consumer: placeholder, resolved at execution time
        return LeafSpec(g.terminal_rule(chunk.kind, chunk.resource).rule_id, section=section)

    for chunk in layout.path:
        leaves.append(slot(chunk, "path"))
    for key_chunk, val_chunk in layout.headers:
        leaves.append(slot(key_chunk, "header"))
        leaves.append(slot(val_chunk, "header"))
    for chunk in layout.body:
        leaves.append(slot(chunk, "body"))
    return leaves


def build_case(g: Grammar, chain: tuple[str, ...], values_per_request) -> TestCase:
    """Assemble a TestCase for a chain with given fuzzable-slot values."""
    leaves: list[LeafSpec] = []
    for name, values in zip(chain, values_per_request):
        leaves.extend(_layout_leaves(g.requests_by_name[name], g, list(values)))
    rs = RuleSequence.from_leaves(g, leaves)
    return TestCase.from_sequence(rs, g)


def generate_seeds(
    g: Grammar,
    max_len: int,
    dict_values_per_type: int = 2,
    budget: int | None = None,
    validate_cfg=None,
    log=None,
) -> SeedCorpus:
    """Enumerate and instantiate seeds; optionally keep only seeds whose
    execution against ``validate_cfg`` yields all-2xx responses."""
    if validate_cfg is not None:
        from .execution import execute_test_case, reset_target_state

    seeds: list[Seed] = []
    partial = False
    counter = 0
    for chain in enumerate_chains(g, max_len):
        layouts = [g.requests_by_name[name] for name in chain]
        per_request_lists = [
            list(itertools.product(*_slot_value_lists(lay, g, dict_values_per_type)))
            or [()]
            for lay in layouts
        ]
        for combo in itertools.product(*per_request_lists):
            if budget is not None and len(seeds) >= budget:
                partial = True
                return SeedCorpus(seeds, partial, max_len, dict_values_per_type)
            counter += 1
            case = build_case(g, chain, combo)
            text = render(case, g)
            if validate_cfg is not None:
                reset_target_state(validate_cfg)
                result = execute_test_case(
                    case, g, validate_cfg, case_id="validate-%d" % counter
                )
                ok = bool(result.statuses) and all(
                    200 <= s < 300 for s in result.statuses
                )
                if log:
                    log("validate %s %s -> %s" % (chain, result.statuses, "keep" if ok else "drop"))
                if not ok:
                    continue
            seed_id = "seed-%05d" % (len(seeds) + 1)
            seeds.append(Seed(seed_id=seed_id, chain=chain, text=text, case=case))
    return SeedCorpus(seeds, partial, max_len, dict_values_per_type)


def write_corpus(corpus: SeedCorpus, directory: str) -> None:
    os.makedirs(directory, exist_ok=True)
    index_lines = [
        "# seed_id\tn_requests\tchain",
        "# max_len=%d dict_values_per_type=%d partial=%s"
        % (corpus.max_len, corpus.dict_values_per_type, corpus.partial),
    ]
    for seed in corpus.seeds:
        path = os.path.join(directory, seed.seed_id + ".txt")
        with open(path, "w", encoding="latin-1") as fh:
            fh.write(seed.text)
        index_lines.append(
            "%s\t%d\t%s" % (seed.seed_id, len(seed.chain), ",".join(seed.chain))
        )
    with open(os.path.join(directory, INDEX_NAME), "w", encoding="utf-8") as fh:
        fh.write("\n".join(index_lines) + "\n")


def load_corpus(directory: str, g: Grammar) -> list[tuple[str, TestCase]]:
    """Read back seed files (ordered by the index when present)."""
    index_path = os.path.join(directory, INDEX_NAME)
    seed_ids: list[str] = []
    if os.path.exists(index_path):
        with open(index_path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                seed_ids.append(line.split("\t")[0])
    else:
        seed_ids = sorted(
            name[:-4]
            for name in os.listdir(directory)
            if name.endswith(".txt")
        )
    out = []
    for seed_id in seed_ids:
        with open(
            os.path.join(directory, seed_id + ".txt"), "r", encoding="latin-1"
        ) as fh:
            out.append((seed_id, parse_test_case(fh.read(), g)))
    return out
