import json
import struct

import pytest
from hypothesis import given, reject, settings
from hypothesis import strategies as st

from shepherd.analyzer import Origin, RejectReason, analyze
from shepherd.corpus import FEATURES, CorpusSpec, SpecInfeasible, generate, spec_for_index
from shepherd.corpus.generator import evaluate, plan_program
from shepherd.emulator.sandbox import ProgramInputs, run_program
from shepherd.pe import parse_pe


def test_identical_spec_identical_bytes():
    spec = spec_for_index(4)
    a, b = generate(spec), generate(spec)
    assert a.image == b.image
    assert a.ground_truth_json() == b.ground_truth_json()
    assert a.symbols == b.symbols


def test_different_seeds_differ():
    assert generate(spec_for_index(0)).image != generate(spec_for_index(1)).image


def test_three_plain_functions():
    g = generate(CorpusSpec(1, function_count=3))
    graph = analyze(parse_pe(g.image))
    solid = [fn for fn in graph.functions.values() if fn.origin is Origin.SOLID]
    assert len(solid) == 3 == len(graph.functions)
    assert {f["entry"] for f in g.ground_truth["functions"]} == set(graph.functions)


def test_tiny_entry_block_plant():
    g = generate(CorpusSpec(7, function_count=4, features={"tiny_entry_block"}))
    graph = analyze(parse_pe(g.image))
    small = [fn for fn in graph.functions.values() if fn.entry_block.size < 5]
    assert len(small) == 1
    assert small[0].patch_reject_reason is RejectReason.ENTRY_BLOCK_TOO_SMALL
    (tiny,) = [f for f in g.ground_truth["functions"] if f["kind"] == "tiny"]
    assert tiny["entry"] == small[0].entry and tiny["entry_block_size"] < 5


def test_data_reloc_trap_plant():
    g = generate(CorpusSpec(9, function_count=4, features={"data_reloc_trap"}))
    img = parse_pe(g.image)
    graph = analyze(img)
    traps = g.ground_truth["traps"]
    assert {t["kind"] for t in traps} == {"decode_failure", "mid_instruction"}
    relocated = img.relocation_rvas()
    for trap in traps:
        # the pointer is relocated and holds the trap address
        assert trap["pointer_rva"] in relocated
        assert img.read_u32(trap["pointer_rva"]) - img.image_base == trap["rva"]
        assert (trap["rva"], trap["kind"]) in graph.discarded
        assert trap["rva"] not in graph.functions


@pytest.mark.parametrize(
    "spec",
    [
        CorpusSpec(1, function_count=0),
        CorpusSpec(1, function_count=2, features={"shared_blocks"}),
        CorpusSpec(1, function_count=1, features={"indirect_calls"}),
        CorpusSpec(1, max_blocks_per_function=2),
        CorpusSpec(1, features={"self_modifying"}),
    ],
)
def test_infeasible_specs(spec):
    with pytest.raises(SpecInfeasible):
        generate(spec)


def test_feature_coverage_of_default_corpus(corpus):
    seen = set()
    for i in range(12):
        seen |= set(corpus(i).ground_truth["features"])
    assert seen == FEATURES


def test_ground_truth_is_json(corpus):
    doc = json.loads(corpus(0).ground_truth_json())
    assert doc == corpus(0).ground_truth
    assert {"functions", "traps", "imports", "relocations", "vectors", "expected_outputs"} <= set(doc)


def test_expected_outputs_match_emulator(corpus):
    """The generator's own evaluator and the emulator agree."""
    for i in range(6):
        g = corpus(i)
        img = parse_pe(g.image)
        inputs = ProgramInputs.from_json(g.ground_truth)
        for vec, want in zip(g.vectors, g.expected):
            run = run_program(img, vec, inputs)
            assert list(struct.unpack(f"<{len(want)}I", run.output)) == [w & 0xFFFFFFFF for w in want]


def test_evaluator_is_pure():
    functions, n_out = plan_program(spec_for_index(2))
    vec = list(range(8))
    assert evaluate(functions, vec, n_out) == evaluate(functions, vec, n_out)


def test_symbols_sidecar_lists_functions(corpus):
    g = corpus(0)
    lines = [ln.split() for ln in g.symbols.splitlines() if ln and not ln.startswith("#")]
    funcs = {int(rva, 16): name for rva, kind, name in lines if kind != "data"}
    truth = {f["entry"]: f["name"] for f in g.ground_truth["functions"]}
    assert funcs and set(funcs) <= set(truth)


@settings(max_examples=20, deadline=None)
@given(
    st.integers(1, 10**6),
    st.integers(3, 8),
    st.sets(st.sampled_from(sorted(FEATURES))),
)
def test_random_specs_parse_and_analyze(seed, count, feats):
    try:
        g = generate(CorpusSpec(seed, count, 6, frozenset(feats)))
    except SpecInfeasible:
        reject()
    img = parse_pe(g.image)
    graph = analyze(img)
    for f in g.ground_truth["functions"]:
        assert f["entry"] in graph.functions
        assert graph.functions[f["entry"]].origin.value == f["origin"]
