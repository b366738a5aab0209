"""Genetic operators: the three mutations, rotation-aware homologous
crossover, and the structural tree distance used for speciation.

Every operator is total and validity-preserving: impossible edits are
retried a bounded number of times and then fall back to returning the
input unchanged.  All randomness comes from an explicit
numpy.random.Generator, so applications replay exactly given the seed.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import tree as T
from .tree import NodeTree

RETRY_BUDGET = 20


@dataclass(frozen=True)
class DistanceParams:
    """Weighting between the size and depth terms; beta=0.5 weighs them equally."""

    beta: float = 0.5


@dataclass(frozen=True)
class SharedRegion:
    """Top-down matched region between two rotation-sorted trees.

    ``pairs`` holds (node id in tree_a, node id in tree_b), root pair
    first; matched pairs form a connected subtree of both trees.  The
    rotated trees are carried along so callers can graft at pair points.
    """

    pairs: tuple[tuple[int, int], ...]
    n_shared: int
    depth_shared: int
    tree_a: NodeTree = field(repr=False)
    tree_b: NodeTree = field(repr=False)


def _shape_text(tree: NodeTree, sizes: dict[int, int]) -> dict[int, str]:
    """Kind-blind shape string per node: leaves 'o', unary '(u..)', binary '(b..)'.

    Children of binary nodes are sorted by (size, height, shape), so the
    ordering is invariant under element relabeling, which keeps the
    distance purely structural.
    """
    shapes: dict[int, str] = {}
    heights: dict[int, int] = {}
    for nid in tree.postorder():
        node = tree.nodes[nid]
        if not node.children:
            shapes[nid] = "o"
            heights[nid] = 1
            continue
        keys = sorted(
            ((sizes[c], heights[c], shapes[c]) for c in node.children))
        tag = "u" if len(node.children) == 1 else "b"
        shapes[nid] = "(" + tag + "".join(k[2] for k in keys) + ")"
        heights[nid] = 1 + max(heights[c] for c in node.children)
    return shapes


def rotate_by_shape(tree: NodeTree) -> NodeTree:
    """Sort add/mul children into a label-independent canonical rotation.

    Add and mul are commutative, so the rotated tree computes the same
    values; mirror-image trees rotate to the same shape and therefore
    align position by position during matching.
    """
    sizes: dict[int, int] = {}
    for nid in tree.postorder():
        sizes[nid] = 1 + sum(sizes[c] for c in tree.nodes[nid].children)
    shapes = _shape_text(tree, sizes)
    heights: dict[int, int] = {}
    for nid in tree.postorder():
        ch = tree.nodes[nid].children
        heights[nid] = 1 + max((heights[c] for c in ch), default=0)

    def rebuild(nid: int):
        node = tree.nodes[nid]
        children = list(node.children)
        if T.is_linear(node.kind):
            children.sort(key=lambda c: (sizes[c], heights[c], shapes[c]))
        return (node.kind, node.tap, tuple(rebuild(c) for c in children))

    return T.expr_to_tree(rebuild(tree.root), tree.generation_born)


def shared_region(ta: NodeTree, tb: NodeTree) -> SharedRegion:
    """Greedy top-down match after canonical rotation of both trees.

    The root pair always matches.  A matched pair descends into its
    children (pairwise, in rotated order) only when both nodes have the
    same arity; nodes paired across an arity mismatch still count but end
    the descent there.
    """
    ra = rotate_by_shape(ta)
    rb = rotate_by_shape(tb)
    pairs: list[tuple[int, int]] = []
    depth_shared = 0
    stack = [(ra.root, rb.root, 1)]
    while stack:
        na, nb, depth = stack.pop()
        pairs.append((na, nb))
        depth_shared = max(depth_shared, depth)
        ca = ra.nodes[na].children
        cb = rb.nodes[nb].children
        if len(ca) == len(cb):
            for a, b in zip(reversed(ca), reversed(cb)):
                stack.append((a, b, depth + 1))
    return SharedRegion(tuple(pairs), len(pairs), depth_shared, ra, rb)


def tree_distance(ta: NodeTree, tb: NodeTree,
                  params: DistanceParams = DistanceParams()) -> float:
    """Structural distance in [0, 1]; 0 iff the shapes match under rotation.

    delta = beta * (N - 2 n_S) / (N - 2) + (1 - beta) * (D - 2 d_S) / (D - 2)
    with N/D the summed sizes/depths of both trees and n_S/d_S those of the
    shared region.  A degenerate denominator (both trees minimal in that
    dimension) contributes 0: there is no difference left to measure.
    """
    region = shared_region(ta, tb)
    n = T.size(ta) + T.size(tb)
    d = T.height(ta) + T.height(tb)
    size_term = (n - 2 * region.n_shared) / (n - 2) if n > 2 else 0.0
    depth_term = (d - 2 * region.depth_shared) / (d - 2) if d > 2 else 0.0
    return params.beta * size_term + (1.0 - params.beta) * depth_term


# --- mutations --------------------------------------------------------------


def _edit_expr(expr, path: tuple[int, ...], replacement):
    if not path:
        return replacement
    kind, tap, children = expr
    i = path[0]
    new_children = tuple(
        _edit_expr(c, path[1:], replacement) if j == i else c
        for j, c in enumerate(children))
    return (kind, tap, new_children)


def _paths_by_id(tree: NodeTree) -> dict[int, tuple[int, ...]]:
    paths = {tree.root: ()}
    for nid in tree.preorder():
        for i, c in enumerate(tree.nodes[nid].children):
            paths[c] = paths[nid] + (i,)
    return paths


def _violation_budget(*trees: NodeTree) -> Counter:
    """Per-rule violation counts the inputs already carry.

    Valid inputs give an empty budget, so candidates must validate
    cleanly; on out-of-contract inputs the operators stay total by
    accepting any edit that introduces no new rule violations.
    """
    budget: Counter = Counter()
    for t in trees:
        budget |= Counter(v.rule for v in T.validate(t))
    return budget


def _finish(expr, generation: int, budget: Counter) -> NodeTree | None:
    candidate = T.strip_invalid_taps(T.expr_to_tree(expr, generation))
    counts = Counter(v.rule for v in T.validate(candidate))
    if counts - budget:
        return None
    return candidate


def mutate_replace(tree: NodeTree, rng: np.random.Generator) -> NodeTree:
    """Swap one element for a different kind of the same category.

    Linear swaps with linear (add <-> mul) and nonlinear with nonlinear,
    so arity never changes; leaves are not targets.  If a swap would break
    a rule the target is resampled up to the retry budget, after which the
    input is returned unchanged.
    """
    targets = list(T.iter_element_ids(tree))
    if not targets:
        return tree
    expr = T.tree_to_expr(tree)
    paths = _paths_by_id(tree)
    budget = _violation_budget(tree)
    for _ in range(RETRY_BUDGET):
        nid = targets[rng.integers(len(targets))]
        node = tree.nodes[nid]
        pool = T.LINEAR if T.is_linear(node.kind) else T.NONLINEAR
        options = [k for k in pool if k != node.kind]
        new_kind = options[rng.integers(len(options))]
        _, sub_tap, sub_children = _subexpr(expr, paths[nid])
        candidate = _finish(_edit_expr(expr, paths[nid], (new_kind, sub_tap, sub_children)),
                            tree.generation_born, budget)
        if candidate is not None:
            return candidate
    return tree


def _subexpr(expr, path: tuple[int, ...]):
    for i in path:
        expr = expr[2][i]
    return expr


def mutate_insert(tree: NodeTree, rng: np.random.Generator,
                  memory_tap_rate: float = 0.0) -> NodeTree:
    """Insert a new element above a random position.

    The displaced subtree becomes a child of the new node; a linear
    insertion additionally gains a fresh random leaf on the other side.
    The new node is tapped to c or d (uniformly) with probability
    ``memory_tap_rate``, and only when its subtree reaches a memory leaf.
    Positions whose path is already at the height cap are never chosen; if
    none qualify the input is returned unchanged.
    """
    positions = [
        nid for nid in tree.preorder()
        if tree.depth_of(nid) + tree.height_of(nid) <= T.MAX_HEIGHT
    ]
    if not positions:
        return tree
    expr = T.tree_to_expr(tree)
    paths = _paths_by_id(tree)
    budget = _violation_budget(tree)
    for _ in range(RETRY_BUDGET):
        nid = positions[rng.integers(len(positions))]
        new_kind = T.ELEMENTS[rng.integers(len(T.ELEMENTS))]
        displaced = _subexpr(expr, paths[nid])
        if T.is_linear(new_kind):
            leaf = T.LEAVES[rng.integers(len(T.LEAVES))]
            children = [displaced, (leaf, None, ())]
            if rng.integers(2):
                children.reverse()
            new_node = (new_kind, None, tuple(children))
        else:
            new_node = (new_kind, None, (displaced,))
        tap = None
        if nid != tree.root and rng.random() < memory_tap_rate:
            if _expr_has_memory(new_node):
                tap = T.TAPS[rng.integers(len(T.TAPS))]
        new_node = (new_node[0], tap, new_node[2])
        candidate = _finish(_edit_expr(expr, paths[nid], new_node),
                            tree.generation_born, budget)
        if candidate is not None:
            return candidate
    return tree


def _expr_has_memory(expr) -> bool:
    kind, _, children = expr
    return kind in T.MEMORY_LEAVES or any(_expr_has_memory(c) for c in children)


def mutate_shrink(tree: NodeTree, rng: np.random.Generator) -> NodeTree:
    """Replace a random non-root element by one of its children.

    Shrinks that would drop below the height floor (or otherwise break a
    rule) are resampled up to the retry budget, then the input is returned
    unchanged.
    """
    targets = [nid for nid in T.iter_element_ids(tree) if nid != tree.root]
    if not targets:
        return tree
    expr = T.tree_to_expr(tree)
    paths = _paths_by_id(tree)
    budget = _violation_budget(tree)
    for _ in range(RETRY_BUDGET):
        nid = targets[rng.integers(len(targets))]
        node = tree.nodes[nid]
        keep = int(rng.integers(len(node.children)))
        hoisted = _subexpr(expr, paths[nid] + (keep,))
        candidate = _finish(_edit_expr(expr, paths[nid], hoisted),
                            tree.generation_born, budget)
        if candidate is not None:
            return candidate
    return tree


def crossover_homologous(pa: NodeTree, pb: NodeTree,
                         rng: np.random.Generator) -> tuple[NodeTree, NodeTree]:
    """One-point crossover restricted to the shared region.

    A pair is drawn uniformly from the shared region (the root pair is
    excluded whenever any other pair exists) and the subtrees below the
    paired points are exchanged.  Children failing validation resample the
    point up to the retry budget; the final fallback returns the parents.
    """
    region = shared_region(pa, pb)
    candidates = region.pairs[1:] if len(region.pairs) > 1 else region.pairs
    ea = T.tree_to_expr(region.tree_a)
    eb = T.tree_to_expr(region.tree_b)
    paths_a = _paths_by_id(region.tree_a)
    paths_b = _paths_by_id(region.tree_b)
    budget = _violation_budget(pa, pb)
    for _ in range(RETRY_BUDGET):
        na, nb = candidates[rng.integers(len(candidates))]
        sub_a = _subexpr(ea, paths_a[na])
        sub_b = _subexpr(eb, paths_b[nb])
        child_a = _finish(_edit_expr(ea, paths_a[na], sub_b), pa.generation_born, budget)
        child_b = _finish(_edit_expr(eb, paths_b[nb], sub_a), pb.generation_born, budget)
        if child_a is not None and child_b is not None:
            return child_a, child_b
    return pa, pb


def mutate_pipeline(tree: NodeTree, rng: np.random.Generator, insert_rate: float,
                    shrink_rate: float, memory_tap_rate: float) -> NodeTree:
    """Apply insert and shrink independently, falling back to replace.

    Insert fires with probability ``insert_rate`` and shrink with
    ``shrink_rate``; when neither fires, a replace mutation runs so every
    call changes something when a change is possible.
    """
    applied = False
    if rng.random() < insert_rate:
        tree = mutate_insert(tree, rng, memory_tap_rate)
        applied = True
    if rng.random() < shrink_rate:
        tree = mutate_shrink(tree, rng)
        applied = True
    if not applied:
        tree = mutate_replace(tree, rng)
    return tree


def random_genome(rng: np.random.Generator, steps: int = 8,
                  memory_tap_rate: float = 0.3) -> NodeTree:
    """Random valid genome: a random operator walk away from the seed tree."""
    genome = T.seed_tree()
    for _ in range(steps):
        r = rng.random()
        if r < 0.55:
            genome = mutate_insert(genome, rng, memory_tap_rate)
        elif r < 0.8:
            genome = mutate_replace(genome, rng)
        else:
            genome = mutate_shrink(genome, rng)
    return genome
