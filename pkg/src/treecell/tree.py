"""Tree genome for gated recurrent cells.

A genome is a rooted tree whose internal nodes are arithmetic elements
(add/mul with two children, tanh/sigmoid/relu with one) and whose leaves
are the eight base inputs x0..x7 or the previous-step memory values
cprev/dprev.  The root's value is the cell's main output h; non-root
nodes may additionally be tapped into the auxiliary memory outputs c or d.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

ADD = "add"
MUL = "mul"
TANH = "tanh"
SIGMOID = "sigmoid"
RELU = "relu"

LINEAR = (ADD, MUL)                 # arity 2
NONLINEAR = (TANH, SIGMOID, RELU)   # arity 1
ELEMENTS = LINEAR + NONLINEAR

N_BASE_INPUTS = 8
BASE_INPUTS = tuple(f"x{k}" for k in range(N_BASE_INPUTS))
MEMORY_C = "cprev"
MEMORY_D = "dprev"
MEMORY_LEAVES = (MEMORY_C, MEMORY_D)
LEAVES = BASE_INPUTS + MEMORY_LEAVES

TAPS = ("c", "d")  # auxiliary outputs a non-root node may feed

MIN_HEIGHT = 6
MAX_HEIGHT = 15

ARITY = {k: 2 for k in LINEAR}
ARITY.update({k: 1 for k in NONLINEAR})
ARITY.update({k: 0 for k in LEAVES})


def is_linear(kind: str) -> bool:
    return kind in LINEAR


def is_nonlinear(kind: str) -> bool:
    return kind in NONLINEAR


def is_element(kind: str) -> bool:
    return kind in ELEMENTS


def is_leaf(kind: str) -> bool:
    return kind in LEAVES


def arity(kind: str) -> int:
    return ARITY[kind]


class StructureError(ValueError):
    """Tree is not structurally well-formed (dangling id, arity mismatch, cycle)."""


@dataclass(frozen=True)
class TreeNode:
    id: int
    kind: str
    children: tuple[int, ...] = ()
    tap: Optional[str] = None  # "c" or "d"; value also feeds that memory output


@dataclass(frozen=True)
class Violation:
    rule: str
    node_id: Optional[int]
    message: str

    def __str__(self) -> str:
        return self.message


class NodeTree:
    """Immutable genome: root id plus an id -> TreeNode map.

    Structure is checked at construction; rule conformance is checked by
    :func:`validate`.  All operations over trees are pure.
    """

    __slots__ = ("root", "nodes", "generation_born", "_order", "_depths", "_heights")

    def __init__(self, root: int, nodes: dict[int, TreeNode], generation_born: int = 0):
        object.__setattr__(self, "root", root)
        object.__setattr__(self, "nodes", dict(nodes))
        object.__setattr__(self, "generation_born", generation_born)
        object.__setattr__(self, "_order", None)
        object.__setattr__(self, "_depths", None)
        object.__setattr__(self, "_heights", None)
        _check_structure(self)

    def __setattr__(self, name, value):
        raise AttributeError("NodeTree is immutable")

    def node(self, node_id: int) -> TreeNode:
        return self.nodes[node_id]

    def children_of(self, node_id: int) -> tuple[TreeNode, ...]:
        return tuple(self.nodes[c] for c in self.nodes[node_id].children)

    def preorder(self, start: Optional[int] = None) -> list[int]:
        """Node ids in depth-first preorder (children in stored order)."""
        out: list[int] = []
        stack = [self.root if start is None else start]
        while stack:
            nid = stack.pop()
            out.append(nid)
            stack.extend(reversed(self.nodes[nid].children))
        return out

    def postorder(self) -> list[int]:
        if self._order is None:
            order = self.preorder()
            order.reverse()
            object.__setattr__(self, "_order", order)
        return list(self._order)

    def depth_of(self, node_id: int) -> int:
        """Nodes on the path root..node inclusive; the root has depth 1."""
        if self._depths is None:
            depths = {self.root: 1}
            for nid in self.preorder():
                for c in self.nodes[nid].children:
                    depths[c] = depths[nid] + 1
            object.__setattr__(self, "_depths", depths)
        return self._depths[node_id]

    def height_of(self, node_id: int) -> int:
        """Nodes on the longest node..leaf path; a leaf has height 1."""
        if self._heights is None:
            heights: dict[int, int] = {}
            for nid in self.postorder():
                ch = self.nodes[nid].children
                heights[nid] = 1 + max((heights[c] for c in ch), default=0)
            object.__setattr__(self, "_heights", heights)
        return self._heights[node_id]

    def __len__(self) -> int:
        return len(self.nodes)

    def __repr__(self) -> str:
        return f"NodeTree({node_text(self, self.root)!r})"


def _check_structure(tree: NodeTree) -> None:
    if tree.root not in tree.nodes:
        raise StructureError(f"root id {tree.root} not in node map")
    seen: set[int] = set()
    stack = [tree.root]
    while stack:
        nid = stack.pop()
        if nid in seen:
            raise StructureError(f"node {nid} reachable by two paths (cycle or shared child)")
        seen.add(nid)
        node = tree.nodes.get(nid)
        if node is None:
            raise StructureError(f"dangling child id {nid}")
        if node.id != nid:
            raise StructureError(f"node keyed {nid} carries id {node.id}")
        if node.kind not in ARITY:
            raise StructureError(f"unknown kind {node.kind!r} at node {nid}")
        if len(node.children) != ARITY[node.kind]:
            raise StructureError(
                f"arity mismatch at node {nid}: {node.kind} takes "
                f"{ARITY[node.kind]} children, has {len(node.children)}"
            )
        if node.tap is not None and node.tap not in TAPS:
            raise StructureError(f"unknown tap {node.tap!r} at node {nid}")
        stack.extend(node.children)
    if seen != set(tree.nodes):
        extra = sorted(set(tree.nodes) - seen)
        raise StructureError(f"unreachable nodes in map: {extra}")


def height(tree: NodeTree) -> int:
    """Nodes on the longest root-to-leaf path (a lone root counts 1)."""
    return tree.height_of(tree.root)


def size(tree: NodeTree) -> int:
    """Total node count."""
    return len(tree.nodes)


def has_memory_path(tree: NodeTree, node_id: int) -> bool:
    """True iff the subtree at node_id contains a cprev or dprev leaf."""
    if node_id not in tree.nodes:
        raise KeyError(f"unknown node id {node_id}")
    for nid in tree.preorder(node_id):
        if tree.nodes[nid].kind in MEMORY_LEAVES:
            return True
    return False


def validate(tree: NodeTree) -> list[Violation]:
    """Check every genome rule; an empty list means the tree is valid.

    Structural defects raise :class:`StructureError` instead of being
    reported (they are a different failure class from rule violations).
    """
    _check_structure(tree)
    report: list[Violation] = []
    h = height(tree)
    if h < MIN_HEIGHT:
        report.append(Violation("height-min", None, f"height {h} below minimum {MIN_HEIGHT}"))
    if h > MAX_HEIGHT:
        report.append(Violation("height-max", None, f"height {h} above maximum {MAX_HEIGHT}"))
    memory: dict[int, bool] = {}
    for nid in tree.postorder():
        node = tree.nodes[nid]
        memory[nid] = node.kind in MEMORY_LEAVES or any(memory[c] for c in node.children)
    for nid in tree.preorder():
        node = tree.nodes[nid]
        if is_nonlinear(node.kind):
            for c in node.children:
                if is_nonlinear(tree.nodes[c].kind):
                    report.append(Violation(
                        "consecutive-nonlinearity", nid,
                        f"consecutive nonlinearity at node {nid} ({node.kind} over "
                        f"{tree.nodes[c].kind})"))
        if node.tap is not None:
            if nid == tree.root:
                report.append(Violation("tap-on-root", nid, f"root node {nid} carries tap {node.tap}"))
            elif not memory[nid]:
                report.append(Violation(
                    "tap-without-memory", nid,
                    f"node {nid} tapped to {node.tap} but its subtree has no memory leaf"))
    return report


# --- construction helpers -------------------------------------------------

Expr = tuple  # (kind, tap, (child Expr, ...)) produced by tree_to_expr


def tree_to_expr(tree: NodeTree, node_id: Optional[int] = None) -> Expr:
    nid = tree.root if node_id is None else node_id
    node = tree.nodes[nid]
    return (node.kind, node.tap, tuple(tree_to_expr(tree, c) for c in node.children))


def expr_to_tree(expr: Expr, generation_born: int = 0) -> NodeTree:
    nodes: dict[int, TreeNode] = {}
    counter = [0]

    def build(e: Expr) -> int:
        kind, tap, children = e
        nid = counter[0]
        counter[0] += 1
        child_ids = tuple(build(c) for c in children)
        nodes[nid] = TreeNode(nid, kind, child_ids, tap)
        return nid

    root = build(expr)
    return NodeTree(root, nodes, generation_born)


def build_tree(spec, generation_born: int = 0) -> NodeTree:
    """Build a tree from nested tuples, e.g. ("tanh", ("add", "x0", "x1")).

    A kind may carry a tap suffix, e.g. "add@c".
    """

    def to_expr(s) -> Expr:
        if isinstance(s, str):
            kind, tap = _split_tap(s)
            return (kind, tap, ())
        kind, tap = _split_tap(s[0])
        return (kind, tap, tuple(to_expr(c) for c in s[1:]))

    return expr_to_tree(to_expr(spec), generation_born)


def _split_tap(token: str) -> tuple[str, Optional[str]]:
    if "@" in token:
        kind, tap = token.split("@", 1)
        return kind, tap
    return token, None


def node_text(tree: NodeTree, node_id: int) -> str:
    """Render a subtree in the genome grammar (parenthesized prefix form)."""
    node = tree.nodes[node_id]
    name = node.kind if node.tap is None else f"{node.kind}@{node.tap}"
    if not node.children:
        return name
    inner = " ".join(node_text(tree, c) for c in node.children)
    return f"({name} {inner})"


def strip_invalid_taps(tree: NodeTree) -> NodeTree:
    """Repair pass: drop taps on the root or on nodes without a memory path."""
    memory: dict[int, bool] = {}
    for nid in tree.postorder():
        node = tree.nodes[nid]
        memory[nid] = node.kind in MEMORY_LEAVES or any(memory[c] for c in node.children)
    changed = False
    nodes: dict[int, TreeNode] = {}
    for nid, node in tree.nodes.items():
        if node.tap is not None and (nid == tree.root or not memory[nid]):
            nodes[nid] = TreeNode(nid, node.kind, node.children, None)
            changed = True
        else:
            nodes[nid] = node
    if not changed:
        return tree
    return NodeTree(tree.root, nodes, tree.generation_born)


def with_generation(tree: NodeTree, generation: int) -> NodeTree:
    if tree.generation_born == generation:
        return tree
    return NodeTree(tree.root, tree.nodes, generation)


def canonicalize(tree: NodeTree) -> NodeTree:
    """Order every add/mul node's children by (subtree size, height, text).

    The result is isomorphic under child swaps to the input, idempotent,
    and identical for mirror-image trees, so it doubles as the genome's
    canonical serialization key.
    """
    sizes: dict[int, int] = {}
    for nid in tree.postorder():
        sizes[nid] = 1 + sum(sizes[c] for c in tree.nodes[nid].children)

    def rebuild(nid: int) -> tuple[Expr, int, int, str]:
        node = tree.nodes[nid]
        built = [rebuild(c) for c in node.children]
        if is_linear(node.kind):
            built.sort(key=lambda item: (item[1], item[2], item[3]))
        expr = (node.kind, node.tap, tuple(item[0] for item in built))
        hgt = 1 + max((item[2] for item in built), default=0)
        name = node.kind if node.tap is None else f"{node.kind}@{node.tap}"
        if built:
            text = "(" + name + " " + " ".join(item[3] for item in built) + ")"
        else:
            text = name
        return expr, sizes[nid], hgt, text

    expr, _, _, _ = rebuild(tree.root)
    return expr_to_tree(expr, tree.generation_born)


def canonical_text(tree: NodeTree) -> str:
    """Serialization of the canonical form; the genome identity key."""
    canon = canonicalize(tree)
    return node_text(canon, canon.root)


def leaf_kinds(tree: NodeTree) -> list[str]:
    """Multiset of leaf kinds, in preorder."""
    return [tree.nodes[n].kind for n in tree.preorder() if is_leaf(tree.nodes[n].kind)]


def seed_tree() -> NodeTree:
    """The minimal fully connected starting genome (height 6).

    All eight base inputs are pairwise summed over three add levels, that
    total is added to cprev + dprev, and a single tanh tops the tree.  No
    node is tapped, so c and d start as pure pass-throughs.
    """
    pairs = [("add", f"x{2 * k}", f"x{2 * k + 1}") for k in range(4)]
    quads = [("add", pairs[0], pairs[1]), ("add", pairs[2], pairs[3])]
    base_sum = ("add", quads[0], quads[1])
    mem_sum = ("add", MEMORY_C, MEMORY_D)
    return build_tree(("tanh", ("add", base_sum, mem_sum)))


def iter_element_ids(tree: NodeTree) -> Iterable[int]:
    for nid in tree.preorder():
        if is_element(tree.nodes[nid].kind):
            yield nid
