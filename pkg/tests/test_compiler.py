import numpy as np
import pytest

from treecell import tree as T
from treecell.compiler import (
    CellState,
    CompileError,
    cell_backward,
    cell_forward,
    compile_tree,
    lstm_reference_tree,
    zero_state,
)
from treecell.genetic import random_genome
from treecell.grammar import parse, serialize
from treecell.tree import build_tree, seed_tree, validate


from oracles import closed_form_lstm, finite_difference_check, rng_for


def test_lstm_reference_tree_is_valid_and_uses_four_inputs():
    t = lstm_reference_tree()
    assert validate(t) == []
    used = {t.nodes[n].kind for n in t.preorder() if T.is_leaf(t.nodes[n].kind)}
    assert used == {"x0", "x1", "x2", "x3", "cprev"}
    base_used = [k for k in used if k.startswith("x")]
    assert len(base_used) == 4


def test_lstm_oracle_equivalence():
    cell = compile_tree(lstm_reference_tree())
    rng = rng_for(123)
    width = 16
    worst = 0.0
    for _ in range(1000):
        base = rng.normal(0.0, 2.0, size=(8, width))
        state = CellState(rng.normal(size=width), rng.normal(size=width),
                          rng.normal(size=width))
        out = cell_forward(cell, base, state)
        h, c = closed_form_lstm(base[:4], state.c)
        worst = max(worst, np.max(np.abs(out.h - h)), np.max(np.abs(out.c - c)))
        assert np.array_equal(out.d, state.d)  # untapped: exact pass-through
    assert worst <= 1e-12


def test_lstm_forced_gates_hand_values():
    # zero preactivations force i=f=o=0.5, g=0; with c_prev=1:
    # c = 0.5, h = 0.5*tanh(0.5)
    cell = compile_tree(lstm_reference_tree())
    base = np.zeros((8, 3))
    state = CellState(np.zeros(3), np.ones(3), np.zeros(3))
    out = cell_forward(cell, base, state)
    assert out.c == pytest.approx(0.5)
    assert out.h == pytest.approx(0.5 * np.tanh(0.5))


def test_seed_tree_zero_inputs_give_zero_h():
    cell = compile_tree(seed_tree())
    out = cell_forward(cell, np.zeros((8, 4)), zero_state(4))
    assert np.all(out.h == 0.0)
    assert np.all(out.c == 0.0)


def test_compile_rejects_invalid_tree():
    bad = build_tree(("tanh", ("sigmoid", "x0")))
    with pytest.raises(CompileError):
        compile_tree(bad)


def test_input_reuse_shares_port_and_accumulates_gradient():
    t = build_tree(("tanh", ("add", ("add", ("mul", "x0", "x0"),
                                     ("add", "x0", "x1")),
                            ("add", ("add", ("add", "x2", "x3"), "x4"),
                             ("add", "cprev", "dprev")))))
    assert validate(t) == []
    cell = compile_tree(t)
    width = 5
    rng = rng_for(7)
    base = rng.normal(size=(8, width))
    state = zero_state(width)
    out, tape = cell_forward(cell, base, state, record=True)
    grads = cell_backward(cell, tape, np.ones(width), np.zeros(width), np.zeros(width))
    # d h / d x0 = (1 - h^2) * (2*x0 + 1)
    expected = (1.0 - out.h ** 2) * (2.0 * base[0] + 1.0)
    assert np.allclose(grads.base[0], expected, atol=1e-12)


def test_common_subtree_shared_once():
    repeated = ("mul", ("sigmoid", "x0"), "cprev")
    t = build_tree(("tanh", ("add",
                             ("add", repeated, ("add", repeated, ("add", "x1", "x2"))),
                             ("add", "x3", "x4"))))
    assert validate(t) == []
    cell = compile_tree(t)
    mul_ops = [op for op in cell.ops if op.func == "mul"]
    sig_ops = [op for op in cell.ops if op.func == "sigmoid"]
    assert len(sig_ops) == 1  # shared subexpression evaluated once
    assert len(mul_ops) == 1


def test_identity_path_gradient():
    # h = x0 via add with zeroed sibling is not expressible; use mul product rule
    t = build_tree(("tanh", ("add", ("mul", "x0", "x1"),
                            ("add", ("add", ("add", "x2", "x3"), "x4"),
                             ("add", "cprev", "dprev")))))
    cell = compile_tree(t)
    width = 3
    rng = rng_for(11)
    base = rng.normal(size=(8, width))
    state = zero_state(width)
    out, tape = cell_forward(cell, base, state, record=True)
    g = cell_backward(cell, tape, np.ones(width), np.zeros(width), np.zeros(width))
    scale = 1.0 - out.h ** 2
    assert np.allclose(g.base[0], scale * base[1], atol=1e-12)
    assert np.allclose(g.base[1], scale * base[0], atol=1e-12)


def test_gradients_match_finite_differences():
    for seed in range(12):
        genome = random_genome(rng_for(seed), steps=8)
        worst = finite_difference_check(genome, seed + 1000)
        assert worst < 1e-5, f"seed {seed}: fd mismatch {worst}"


def test_untapped_c_passthrough_and_skip_gradient():
    t = seed_tree()
    cell = compile_tree(t)
    rng = rng_for(3)
    width = 6
    base = rng.normal(size=(8, width))
    state = CellState(rng.normal(size=width), rng.normal(size=width),
                      rng.normal(size=width))
    out, tape = cell_forward(cell, base, state, record=True)
    assert np.array_equal(out.c, state.c)  # bit-exact pass-through
    gc = rng.normal(size=width)
    grads = cell_backward(cell, tape, np.zeros(width), gc, np.zeros(width))
    # gradient flows through the skip unchanged, plus the cprev leaf path
    leaf_contrib = cell_backward(cell, tape, np.zeros(width), np.zeros(width),
                                 np.zeros(width))
    assert np.allclose(grads.c_prev - gc, leaf_contrib.c_prev, atol=1e-15)


def test_compile_serialize_round_trip_semantics():
    rng = rng_for(29)
    for seed in range(30):
        genome = random_genome(rng_for(seed), steps=6)
        again = parse(serialize(genome))
        ca = compile_tree(genome)
        cb = compile_tree(again)
        base = rng.normal(size=(8, 5))
        state = CellState(rng.normal(size=5), rng.normal(size=5), rng.normal(size=5))
        oa = cell_forward(ca, base, state)
        ob = cell_forward(cb, base, state)
        assert np.array_equal(oa.h, ob.h)
        assert np.array_equal(oa.c, ob.c)
        assert np.array_equal(oa.d, ob.d)


def test_forward_rejects_bad_inputs():
    cell = compile_tree(seed_tree())
    with pytest.raises(ValueError):
        cell_forward(cell, np.zeros((8, 3)), zero_state(4))
    bad = np.zeros((8, 3))
    bad[0, 0] = np.nan
    with pytest.raises(ValueError):
        cell_forward(cell, bad, zero_state(3))
    with pytest.raises(ValueError):
        cell_backward(cell, None, np.zeros(3), np.zeros(3), np.zeros(3))
