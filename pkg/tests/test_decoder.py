import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tsaux.decoder import (
    EvalGrid, EvalItem, WerReport, collapse, decode, eval_grid, format_table, grids_to_json, wer,
)
from tsaux.experiment import SILENCE
from tsaux.graph import HmmTopology, Wfsa, enumerate_paths
from tsaux.mixer import EVAL_SIRS
from tsaux.model import drop_aux, init_params

# WER

def test_identical_sequences():
    assert wer("abc", "abc").wer == 0.0


def test_one_substitution():
    r = wer("axc", "abc")
    assert (r.substitutions, r.deletions, r.insertions) == (1, 0, 0)
    assert r.wer == pytest.approx(100 / 3, abs=0.005)


def test_all_deleted():
    r = wer([], ["a", "b"])
    assert (r.deletions, r.wer) == (2, 100.0)


def test_insertions_can_exceed_100_percent():
    r = wer("abc", "a")
    assert (r.insertions, r.wer) == (2, 200.0)


def test_ties_prefer_substitutions():
    r = wer("ba", "ab")
    assert (r.substitutions, r.deletions, r.insertions) == (2, 0, 0)


def test_empty_reference():
    with pytest.raises(ValueError):
        wer("a", "")


def _edit_distance(a, b):
    # independent recursion-free oracle (single row)
    row = list(range(len(b) + 1))
    for i, x in enumerate(a, 1):
        prev, row[0] = row[0], i
        for j, y in enumerate(b, 1):
            prev, row[j] = row[j], min(row[j] + 1, row[j - 1] + 1, prev + (x != y))
    return row[-1]


seqs = st.lists(st.sampled_from("abc"), max_size=8)


@given(seqs, seqs.filter(bool), seqs, seqs.filter(bool))
def test_errors_are_subadditive_under_concatenation(h1, r1, h2, r2):
    assert wer(h1 + h2, r1 + r2).errors <= wer(h1, r1).errors + wer(h2, r2).errors
    assert wer(h1, r1).errors == _edit_distance(r1, h1)


def test_report_arithmetic():
    a, b = WerReport(1, 0, 0, 4), WerReport(0, 2, 1, 6)
    assert (a + b).wer == pytest.approx(40.0)
    assert WerReport.from_json(json.loads(json.dumps(a.to_json()))) == a


# decoding

def test_collapse_merges_repeats_and_drops_silence():
    topo = HmmTopology(4, 2)
    pdfs = [6, 7, 0, 1, 1, 2, 3, 2, 3, 0, 6]
    assert collapse(pdfs, topo, silence=3) == [0, 1, 0]
    assert collapse(pdfs, topo) == [3, 0, 1, 0, 3]


def test_peaked_outputs_along_a_path_decode_to_its_phones(small_ws):
    topo = small_ws.topology
    phones = [SILENCE, 0, 5, 3, 1, SILENCE]
    pdfs = [topo.pdf(p, j) for p in phones for j in range(topo.states_per_phone)]
    o = np.full((len(pdfs), topo.num_pdfs), -30.0)
    o[np.arange(len(pdfs)), pdfs] = 30.0
    assert decode(o, small_ws.decoding_graph, topo, SILENCE) == [0, 5, 3, 1]


def test_flat_outputs_give_the_most_likely_graph_path(small_ws):
    topo, g = small_ws.topology, small_ws.decoding_graph
    T = 2 * topo.states_per_phone
    paths = enumerate_paths(g, T)
    best = max(w for _, w in paths)
    winners = {tuple(collapse(l, topo)) for l, w in paths if w == best}
    hyp = decode(np.zeros((T, topo.num_pdfs)), g, topo)
    assert tuple(hyp) in winners
    assert hyp == decode(np.zeros((T, topo.num_pdfs)), g, topo)


def test_empty_composition_gives_empty_hypothesis(caplog):
    topo = HmmTopology(2, 1)
    g = Wfsa.from_arcs(2, [(0, 1, 0, 0.0)], 0, {1: 0.0}, 2)
    assert decode(np.zeros((3, 2)), g, topo) == []
    assert "empty" in caplog.text


# evaluation grids

@pytest.fixture(scope="module")
def model(small_ws):
    arch = small_ws.arch("middle", 1)
    return arch, init_params(arch, 3)


def test_grid_covers_the_sirs_and_averages_them(small_ws, model):
    grid = eval_grid(*model, small_ws.eval_items, small_ws.decoding_graph, small_ws.topology, silence=SILENCE)
    assert list(grid.conditions) == list(EVAL_SIRS) and not grid.incomplete
    assert grid.average == pytest.approx(np.mean([r.wer for r in grid.conditions.values()]), abs=1e-12)
    again = eval_grid(*model, small_ws.eval_items, small_ws.decoding_graph, small_ws.topology, silence=SILENCE)
    assert again.to_json() == grid.to_json() and again.hypotheses == grid.hypotheses


def test_main_decoding_ignores_the_aux_head(small_ws, model):
    arch, params = model
    a = eval_grid(arch, params, small_ws.eval_items, small_ws.decoding_graph, small_ws.topology, silence=SILENCE)
    b = eval_grid(arch.without_aux(), drop_aux(params), small_ws.eval_items, small_ws.decoding_graph,
                  small_ws.topology, silence=SILENCE)
    assert a.hypotheses == b.hypotheses


def test_mirrored_aux_branch_mirrors_the_main_grid(small_ws, model):
    arch, params = model
    p = dict(params)
    for k, v in params.items():
        if k.startswith("main."):
            p["aux0." + k[5:]] = v.copy()
    mirrored = [EvalItem(it.mixture_id, -it.sir_db, it.features, it.embedding, it.interference_transcript,
                         it.target_transcript) for it in small_ws.eval_items]
    g, topo = small_ws.decoding_graph, small_ws.topology
    main = eval_grid(arch, p, small_ws.eval_items, g, topo, "main", SILENCE)
    aux = eval_grid(arch, p, mirrored, g, topo, "aux", SILENCE)
    for s in EVAL_SIRS:
        assert aux.conditions[-s] == main.conditions[s]


def test_missing_condition_is_flagged(small_ws, model):
    items = [it for it in small_ws.eval_items if it.sir_db != 0.0]
    grid = eval_grid(*model, items, small_ws.decoding_graph, small_ws.topology, silence=SILENCE)
    assert grid.incomplete and 0.0 not in grid.conditions
    assert "(incomplete)" in format_table([("m", grid)])


def test_bad_branch(small_ws, model):
    with pytest.raises(ValueError):
        eval_grid(*model, small_ws.eval_items[:1], small_ws.decoding_graph, small_ws.topology, "both")


def test_table_and_json():
    grid = EvalGrid("main", {s: WerReport(int(s + 10), 0, 0, 100) for s in EVAL_SIRS})
    assert grid.average == 10.0
    table = format_table([("baseline", grid)]).splitlines()
    assert table[0].split() == ["model", "10", "5", "0", "-5", "-10", "Avg."]
    assert table[2].split() == ["baseline", "20.00", "15.00", "10.00", "5.00", "0.00", "10.00"]
    back = EvalGrid.from_json(json.loads(grids_to_json([("b", grid)]))["b"])
    assert back.conditions == grid.conditions and back.branch == "main"
