"""Recurrent networks built from compiled tree cells.

A layer holds one cell type across its full width (homogeneous) or
several cell types in fixed-cardinality column slots (heterogeneous).
Trainable parameters are the embedding, eight per-layer input projections
combining the layer input with the previous-step h, and the output head;
edges inside the cells carry no parameters, so the cell's memory-cell
count never changes the parameter count.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .compiler import CellState, cell_backward, cell_forward, compile_tree, zero_state
from .genetic import tree_distance
from .tree import N_BASE_INPUTS

DEFAULT_CARDINALITY = 20


@dataclass
class LayerSpec:
    width: int
    slots: list[tuple[int, int]]  # (tree index, cardinality); cardinalities sum to width


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    embedding_dim: int          # 0 for raw frame inputs
    vocab_size: int = 0         # softmax head when > 0
    io_dim: int = 0             # sigmoid head width for frame tasks
    head: str = "softmax"       # softmax | sigmoid

    @property
    def out_dim(self) -> int:
        return self.vocab_size if self.head == "softmax" else self.io_dim

    @property
    def in_dim(self) -> int:
        return self.embedding_dim if self.embedding_dim > 0 else self.io_dim


def homogeneous_spec(width: int, n_layers: int, embedding_dim: int,
                     vocab_size: int = 0, io_dim: int = 0,
                     head: str = "softmax") -> NetworkSpec:
    layers = [LayerSpec(width, [(0, width)]) for _ in range(n_layers)]
    return NetworkSpec(layers, embedding_dim, vocab_size, io_dim, head)


def heterogeneous_layer(tree_indices, cardinality: int = DEFAULT_CARDINALITY) -> LayerSpec:
    slots = [(idx, cardinality) for idx in tree_indices]
    return LayerSpec(cardinality * len(slots), slots)


class Network:
    """Compiled cells plus the trainable parameter set."""

    def __init__(self, spec: NetworkSpec, trees, rng: np.random.Generator,
                 dtype=np.float64):
        self.spec = spec
        self.dtype = dtype
        self.cells = []
        for layer in spec.layers:
            total = sum(card for _, card in layer.slots)
            if total != layer.width:
                raise ValueError(
                    f"slot cardinalities sum to {total}, layer width is {layer.width}")
            offset = 0
            compiled = []
            for tree_idx, card in layer.slots:
                compiled.append((compile_tree(trees[tree_idx]), offset, offset + card))
                offset += card
            self.cells.append(compiled)
        self.params: dict[str, np.ndarray] = {}
        in_dim = spec.in_dim
        if spec.embedding_dim > 0:
            self.params["embedding"] = self._init(rng, (spec.vocab_size, spec.embedding_dim),
                                                  spec.vocab_size)
        prev = in_dim
        for li, layer in enumerate(spec.layers):
            w = layer.width
            self.params[f"layer{li}.W"] = self._init(rng, (prev, N_BASE_INPUTS * w), prev)
            self.params[f"layer{li}.U"] = self._init(rng, (w, N_BASE_INPUTS * w), w)
            self.params[f"layer{li}.b"] = np.zeros(N_BASE_INPUTS * w, dtype=self.dtype)
            prev = w
        self.params["head.W"] = self._init(rng, (prev, spec.out_dim), prev)
        self.params["head.b"] = np.zeros(spec.out_dim, dtype=self.dtype)

    def _init(self, rng, shape, fan_in):
        limit = 1.0 / np.sqrt(max(fan_in, 1))
        return rng.uniform(-limit, limit, size=shape).astype(self.dtype)

    # -- bookkeeping -----------------------------------------------------------

    def param_count(self) -> int:
        return sum(int(np.prod(p.shape)) for p in self.params.values())

    def zero_states(self, batch: int) -> list[CellState]:
        return [zero_state((batch, layer.width), self.dtype)
                for layer in self.spec.layers]

    def detach_states(self, states):
        return [CellState(s.h.copy(), s.c.copy(), s.d.copy()) for s in states]

    # -- forward/backward over one unrolled chunk -------------------------------

    def forward_chunk(self, x, states, masks=None, record: bool = False):
        """Run ``L`` steps; returns (logits, final states, cache).

        x: (B, L) int tokens or (B, L, D) frames.  ``masks`` holds the
        per-chunk dropout masks or None for evaluation.  States are the
        carried-in CellStates per layer and are not modified in place.
        """
        spec = self.spec
        batch, length = x.shape[0], x.shape[1]
        states = self.detach_states(states)
        logits = np.empty((batch, length, spec.out_dim), dtype=self.dtype)
        cache = {"x": x, "steps": [], "masks": masks} if record else None
        for t in range(length):
            if spec.embedding_dim > 0:
                xin = self.params["embedding"][x[:, t]]
            else:
                xin = x[:, t].astype(self.dtype)
            step_cache = [] if record else None
            for li, layer in enumerate(spec.layers):
                if masks is not None:
                    xin = xin * masks["ff"][li]
                h_prev = states[li].h
                if masks is not None:
                    h_prev = h_prev * masks["rec"][li]
                pre = (xin @ self.params[f"layer{li}.W"]
                       + h_prev @ self.params[f"layer{li}.U"]
                       + self.params[f"layer{li}.b"])
                base = pre.reshape(batch, N_BASE_INPUTS, layer.width).transpose(1, 0, 2)
                h_new = np.empty((batch, layer.width), dtype=self.dtype)
                c_new = np.empty_like(h_new)
                d_new = np.empty_like(h_new)
                slot_tapes = []
                for cell, lo, hi in self.cells[li]:
                    sub_state = CellState(states[li].h[:, lo:hi],
                                          states[li].c[:, lo:hi],
                                          states[li].d[:, lo:hi])
                    result = cell_forward(cell, base[:, :, lo:hi], sub_state,
                                          record=record)
                    if record:
                        out, tape = result
                        slot_tapes.append(tape)
                    else:
                        out = result
                    h_new[:, lo:hi] = out.h
                    c_new[:, lo:hi] = out.c
                    d_new[:, lo:hi] = out.d
                if record:
                    step_cache.append({"xin": xin, "h_prev": h_prev,
                                       "tapes": slot_tapes})
                states[li] = CellState(h_new, c_new, d_new)
                xin = h_new
            if masks is not None:
                xin = xin * masks["out"]
            logits[:, t] = xin @ self.params["head.W"] + self.params["head.b"]
            if record:
                cache["steps"].append({"layers": step_cache, "top": xin})
        return logits, states, cache

    def backward_chunk(self, cache, dlogits) -> dict[str, np.ndarray]:
        """Adjoints of every parameter for one recorded chunk.

        Gradients truncate at the chunk boundary: adjoints of the carried-in
        state are dropped, matching truncated backpropagation through time.
        """
        spec = self.spec
        x = cache["x"]
        masks = cache["masks"]
        batch, length = x.shape[0], x.shape[1]
        grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        n_layers = len(spec.layers)
        carry_h = [np.zeros((batch, layer.width), dtype=self.dtype)
                   for layer in spec.layers]
        carry_c = [np.zeros_like(c) for c in carry_h]
        carry_d = [np.zeros_like(c) for c in carry_h]
        for t in range(length - 1, -1, -1):
            step = cache["steps"][t]
            top = step["top"]
            dl = dlogits[:, t]
            grads["head.W"] += top.T @ dl
            grads["head.b"] += dl.sum(axis=0)
            dtop = dl @ self.params["head.W"].T
            if masks is not None:
                dtop = dtop * masks["out"]
            dh_from_above = dtop
            for li in range(n_layers - 1, -1, -1):
                layer = spec.layers[li]
                lcache = step["layers"][li]
                dh = dh_from_above + carry_h[li]
                dbase = np.empty((N_BASE_INPUTS, batch, layer.width), dtype=self.dtype)
                dc_prev = np.empty((batch, layer.width), dtype=self.dtype)
                dd_prev = np.empty_like(dc_prev)
                for si, (cell, lo, hi) in enumerate(self.cells[li]):
                    cg = cell_backward(cell, lcache["tapes"][si],
                                       dh[:, lo:hi], carry_c[li][:, lo:hi],
                                       carry_d[li][:, lo:hi])
                    dbase[:, :, lo:hi] = cg.base
                    dc_prev[:, lo:hi] = cg.c_prev
                    dd_prev[:, lo:hi] = cg.d_prev
                dpre = dbase.transpose(1, 0, 2).reshape(batch, N_BASE_INPUTS * layer.width)
                grads[f"layer{li}.W"] += lcache["xin"].T @ dpre
                grads[f"layer{li}.U"] += lcache["h_prev"].T @ dpre
                grads[f"layer{li}.b"] += dpre.sum(axis=0)
                dxin = dpre @ self.params[f"layer{li}.W"].T
                if masks is not None:
                    dxin = dxin * masks["ff"][li]
                dh_prev = dpre @ self.params[f"layer{li}.U"].T
                if masks is not None:
                    dh_prev = dh_prev * masks["rec"][li]
                carry_h[li] = dh_prev
                carry_c[li] = dc_prev
                carry_d[li] = dd_prev
                dh_from_above = dxin
            if spec.embedding_dim > 0:
                np.add.at(grads["embedding"], x[:, t], dh_from_above)
        return grads


def build_network(spec: NetworkSpec, trees, rng: np.random.Generator,
                  dtype=np.float64) -> Network:
    """Compile trees into a trainable network per the layer/slot layout."""
    return Network(spec, trees, rng, dtype)


def select_diverse_pool(genomes, fitnesses, pool_size: int = 20,
                        top_fraction: float | None = None) -> list[int]:
    """Greedy max-min diversity selection; returns indices into ``genomes``.

    Starts from the best-fitness genome and repeatedly adds the candidate
    whose minimum tree distance to the chosen set is largest.  With
    ``top_fraction`` set, only the best fraction by fitness is eligible,
    mirroring a pool drawn from the top of a population.
    """
    if len(genomes) < pool_size:
        raise ValueError(f"need at least {pool_size} genomes, have {len(genomes)}")
    order = sorted(range(len(genomes)), key=lambda i: fitnesses[i])
    if top_fraction is not None:
        keep = max(pool_size, int(np.ceil(len(genomes) * top_fraction)))
        order = order[:keep]
    chosen = [order[0]]
    remaining = [i for i in order if i != order[0]]
    dist = {i: tree_distance(genomes[i], genomes[chosen[0]]) for i in remaining}
    while len(chosen) < pool_size and remaining:
        pick = max(remaining, key=lambda i: (dist[i], -fitnesses[i], -i))
        chosen.append(pick)
        remaining.remove(pick)
        for i in remaining:
            d = tree_distance(genomes[i], genomes[pick])
            if d < dist[i]:
                dist[i] = d
    return chosen
