import json
import math
from itertools import permutations

import numpy as np
import pytest
from hypothesis import given, strategies as st

from helpers import central_difference, relative_error
from tsaux.graph import HmmTopology, Wfsa, build_denominator, compile_numerator, train_phone_lm, viterbi
from tsaux.loss import LossConfig, aux_loss_pit, ce_regularizer, combined_loss, lfmmi


def instance(seed, num_refs=1):
    """Denominator, ``num_refs`` numerators and a frame count from a tiny LM."""
    rng = np.random.default_rng(seed)
    topo = HmmTopology(3, 2)
    corpus = [list(rng.integers(0, 3, size=int(rng.integers(2, 4)))) for _ in range(4)]
    lm = train_phone_lm(corpus, 2, 3)
    den = build_denominator(lm, topo, 0.1)
    T = int(rng.integers(6, 9))
    nums = [compile_numerator(list(rng.integers(0, 3, size=2)), topo, T, lm=lm) for _ in range(num_refs)]
    return rng, topo, den, nums, T


# LF-MMI

def test_identical_graphs_give_zero():
    _, topo, den, _, T = instance(0)
    o = np.random.default_rng(1).normal(size=(T, topo.num_pdfs))
    loss, grad = lfmmi(o, den, den)
    assert loss == 0.0
    assert np.abs(grad).max() < 1e-12


@pytest.mark.parametrize("o", [(0.3, -1.2), (2.0, 2.0), (-4.0, 1.5)])
def test_two_pdf_closed_form(o):
    den = Wfsa.from_arcs(2, [(0, 1, 0, 0.0), (0, 1, 1, 0.0)], 0, {1: 0.0}, 2)
    num = Wfsa.from_arcs(2, [(0, 1, 0, 0.0)], 0, {1: 0.0}, 2)
    loss, _ = lfmmi(np.array([o]), num, den)
    assert loss == pytest.approx(math.log1p(math.exp(o[1] - o[0])), rel=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_lfmmi_gradient(seed):
    rng, topo, den, (num,), T = instance(seed)
    o = rng.normal(size=(T, topo.num_pdfs))
    _, grad = lfmmi(o, num, den)
    fd = central_difference(lambda x: lfmmi(x, num, den)[0], o)
    assert relative_error(grad, fd) <= 1e-4


@pytest.mark.parametrize("seed", range(5))
def test_lfmmi_is_nonnegative_when_numerator_is_contained(seed):
    rng, topo, den, (num,), T = instance(seed)
    loss, grad = lfmmi(3 * rng.normal(size=(T, topo.num_pdfs)), num, den)
    assert loss >= 0
    assert np.allclose(grad.sum(axis=1), 0.0, atol=1e-9)


# CE regularizer

def test_ce_uniform_logits():
    loss, _ = ce_regularizer(np.zeros((5, 7)), [0, 1, 2, 3, 4])
    assert loss == pytest.approx(math.log(7), rel=1e-14)


def test_ce_confident_logits_tend_to_zero():
    o = np.full((3, 4), -1e3)
    o[[0, 1, 2], [2, 0, 3]] = 1e3
    loss, grad = ce_regularizer(o, [2, 0, 3])
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_ce_length_mismatch():
    with pytest.raises(ValueError):
        ce_regularizer(np.zeros((4, 3)), [0, 1, 2])


@pytest.mark.parametrize("seed", range(20))
def test_ce_gradient(seed):
    rng = np.random.default_rng(seed)
    T, P = int(rng.integers(2, 8)), int(rng.integers(2, 7))
    o = rng.normal(size=(T, P))
    ali = rng.integers(0, P, size=T)
    _, grad = ce_regularizer(o, ali)
    fd = central_difference(lambda x: ce_regularizer(x, ali)[0], o)
    assert np.abs(grad - fd).max() <= 1e-6
    assert relative_error(grad, fd) <= 1e-4


# PIT

def test_single_reference_is_plain_lfmmi():
    rng, topo, den, nums, T = instance(3)
    o = rng.normal(size=(T, topo.num_pdfs))
    loss, grads, perm = aux_loss_pit([o], nums, den)
    ref_loss, ref_grad = lfmmi(o, nums[0], den)
    assert loss == ref_loss
    assert np.array_equal(grads[0], ref_grad)
    assert perm == [0]


def test_swapped_references_flip_the_permutation():
    rng, topo, den, nums, T = instance(4, num_refs=2)
    outs = [rng.normal(size=(T, topo.num_pdfs)) for _ in range(2)]
    a = aux_loss_pit(outs, nums, den)
    b = aux_loss_pit(outs, nums[::-1], den)
    assert a[0] == b[0]
    assert b[2] == [1 - p for p in a[2]]


@pytest.mark.parametrize("seed", range(10))
def test_pit_equals_brute_force_minimum(seed):
    rng, topo, den, nums, T = instance(seed, num_refs=2)
    outs = [rng.normal(size=(T, topo.num_pdfs)) for _ in range(2)]
    loss, _, perm = aux_loss_pit(outs, nums, den)
    options = {p: sum(lfmmi(outs[b], nums[r], den)[0] for b, r in enumerate(p)) for p in permutations(range(2))}
    assert loss == pytest.approx(min(options.values()), rel=1e-14)
    assert options[tuple(perm)] == pytest.approx(loss, rel=1e-14)


@given(st.integers(0, 1000), st.integers(1, 3), st.data())
def test_pit_value_is_invariant_to_reference_order(seed, n, data):
    rng, topo, den, nums, T = instance(seed, num_refs=n)
    outs = [rng.normal(size=(T, topo.num_pdfs)) for _ in range(n)]
    order = data.draw(st.permutations(range(n)))
    a = aux_loss_pit(outs, nums, den)[0]
    b = aux_loss_pit(outs, [nums[i] for i in order], den)[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-12)


@pytest.mark.parametrize("seed", range(20))
def test_pit_gradient(seed):
    rng, topo, den, nums, T = instance(seed, num_refs=2)
    outs = rng.normal(size=(2, T, topo.num_pdfs))
    _, grads, perm = aux_loss_pit(list(outs), nums, den)

    def f(x):
        # hold the assignment fixed: the minimum is only piecewise smooth
        return sum(lfmmi(x[b], nums[r], den)[0] for b, r in enumerate(perm))

    assert aux_loss_pit(list(outs), nums, den)[0] == pytest.approx(f(outs), rel=1e-14)
    fd = central_difference(f, outs)
    assert relative_error(np.stack(grads), fd) <= 1e-4


def test_pit_argument_checks():
    rng, topo, den, nums, T = instance(0, num_refs=2)
    o = rng.normal(size=(T, topo.num_pdfs))
    with pytest.raises(ValueError):
        aux_loss_pit([o], nums, den)
    with pytest.raises(ValueError):
        aux_loss_pit([o] * 5, (nums * 3)[:5], den)


# combined objective

def combined_instance(seed):
    rng, topo, den, nums, T = instance(seed, num_refs=2)
    outs = rng.normal(size=(4, T, topo.num_pdfs))
    return outs, nums[0], [nums[1]], den


def test_alpha_zero_is_the_main_objective():
    (m, mc, a, ac), tgt, intf, den = combined_instance(0)
    res = combined_loss(m, mc, [a], [ac], tgt, intf, den, LossConfig(alpha=0.0))
    assert res.combined == res.main_mmi + 0.1 * res.main_ce
    assert res.aux_mmi == 0.0 and res.aux_ce == 0.0
    assert not np.any(res.grad_aux[0]) and not np.any(res.grad_aux_ce[0])
    # identical to a call without any auxiliary outputs
    bare = combined_loss(m, mc, [], [], tgt, [], den, LossConfig(alpha=0.0))
    assert bare.combined == res.combined
    assert np.array_equal(bare.grad_main, res.grad_main)


def test_mirrored_roles_give_equal_losses():
    (m, mc, _, _), tgt, _, den = combined_instance(1)
    res = combined_loss(m, mc, [m], [mc], tgt, [tgt], den)
    assert res.main_mmi == res.aux_mmi
    assert res.main_ce == res.aux_ce


def test_alpha_is_linear():
    (m, mc, a, ac), tgt, intf, den = combined_instance(2)
    r1 = combined_loss(m, mc, [a], [ac], tgt, intf, den, LossConfig(alpha=1.0))
    r2 = combined_loss(m, mc, [a], [ac], tgt, intf, den, LossConfig(alpha=2.0))
    main = r1.main_mmi + 0.1 * r1.main_ce
    assert r2.combined - main == pytest.approx(2 * (r1.combined - main), rel=1e-12)
    assert r1.combined == pytest.approx(main + r1.aux_mmi + 0.1 * r1.aux_ce, rel=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_combined_gradient(seed):
    outs, tgt, intf, den = combined_instance(seed)
    cfg = LossConfig(alpha=1.0)
    res = combined_loss(*outs[:1], outs[1], [outs[2]], [outs[3]], tgt, intf, den, cfg)
    # CE targets are Viterbi alignments, piecewise constant in the outputs
    ali = (viterbi(tgt, outs[0])[0], viterbi(intf[0], outs[2])[0])

    def f(x):
        assert (viterbi(tgt, x[0])[0], viterbi(intf[0], x[2])[0]) == ali
        return combined_loss(x[0], x[1], [x[2]], [x[3]], tgt, intf, den, cfg).combined

    fd = central_difference(f, outs)
    analytic = np.stack([res.grad_main, res.grad_main_ce, res.grad_aux[0], res.grad_aux_ce[0]])
    assert relative_error(analytic, fd) <= 1e-4


def test_loss_report_is_json():
    (m, mc, a, ac), tgt, intf, den = combined_instance(3)
    rec = json.loads(combined_loss(m, mc, [a], [ac], tgt, intf, den).report("u1"))
    assert rec["utterance_id"] == "u1" and rec["chosen_permutation"] == [0]
    assert set(rec) >= {"main_mmi", "aux_mmi", "main_ce", "aux_ce", "combined"}


@pytest.mark.parametrize("bad", [dict(alpha=-1.0), dict(ce_scale=float("nan")), dict(l2_scale=float("inf"))])
def test_loss_config_validation(bad):
    with pytest.raises(ValueError):
        LossConfig(**bad)


def test_default_scales():
    c = LossConfig()
    assert (c.alpha, c.ce_scale, c.l2_scale) == (1.0, 0.1, 0.00005)
