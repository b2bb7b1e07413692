"""Block-wise autoregressive graph model with attentive message passing.

One generation step sees the already generated rows ("existing" nodes) plus a
block of up to ``B`` new nodes.  New nodes are wired to each other and to every
existing node (augmented edges), ``R`` rounds of gated, attention-weighted
message passing run over real + augmented edges, and a K-component mixture of
Bernoullis scores every candidate edge of the block.

Training evaluates every step of a graph at once (teacher forcing): all steps
are packed into one disjoint union and processed with a single forward pass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (
    GruParams,
    MlpParams,
    ShapeError,
    Tensor,
    clip,
    concat,
    gather,
    gru_cell,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mlp_forward,
    reduce_sum,
    segment_sum,
    sigmoid,
    softmax,
    uniform_init,
)
from .graph import Graph, OrderedRows, from_ordered_rows
from .orderings import OrderingFamily

THETA_EPS = 1e-7


@dataclass(frozen=True)
class GranConfig:
    n_max: int
    block_size: int = 1
    hidden_dim: int = 128
    num_rounds: int = 7
    num_mixtures: int = 20
    tie_rounds: bool = False
    # count every predicted block row in the loss, not only the first
    count_all_block_rows: bool = False
    train_stride: int = 1

    def __post_init__(self):
        for name in ("block_size", "hidden_dim", "num_rounds", "num_mixtures", "n_max"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_max < self.block_size:
            raise ValueError(f"n_max ({self.n_max}) must be >= block_size ({self.block_size})")
        if self.train_stride != 1:
            raise ValueError("training always uses stride 1")

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "GranConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RoundParams:
    msg: MlpParams
    att: MlpParams
    gru: GruParams

    def named_tensors(self, prefix: str) -> dict:
        out = {}
        out.update(self.msg.named_tensors(f"{prefix}msg."))
        out.update(self.att.named_tensors(f"{prefix}att."))
        out.update(self.gru.named_tensors(f"{prefix}gru."))
        return out


@dataclass
class GranParams:
    embed_w: Tensor  # (n_max, H): applied to each padded row
    embed_b: Tensor  # (H,)
    rounds: list
    alpha_head: MlpParams
    theta_head: MlpParams
    tie_rounds: bool = False
    num_rounds: int = 1

    @classmethod
    def init(cls, config: GranConfig, rng: np.random.Generator) -> "GranParams":
        H, B, K = config.hidden_dim, config.block_size, config.num_mixtures
        embed_w = uniform_init(rng, config.n_max, (config.n_max, H))
        embed_b = uniform_init(rng, config.n_max, (H,))
        n_sets = 1 if config.tie_rounds else config.num_rounds
        rounds = [
            RoundParams(
                msg=MlpParams.init(rng, H, H, H),
                att=MlpParams.init(rng, H + B, H, 1),
                gru=GruParams.init(rng, H, H),
            )
            for _ in range(n_sets)
        ]
        return cls(
            embed_w, embed_b, rounds,
            alpha_head=MlpParams.init(rng, H, H, K),
            theta_head=MlpParams.init(rng, H, H, K),
            tie_rounds=config.tie_rounds,
            num_rounds=config.num_rounds,
        )

    def round(self, r: int) -> RoundParams:
        return self.rounds[0] if self.tie_rounds else self.rounds[r]

    def named_tensors(self) -> dict:
        out = {"embed.w": self.embed_w, "embed.b": self.embed_b}
        for r, rp in enumerate(self.rounds):
            out.update(rp.named_tensors(f"round{r}."))
        out.update(self.alpha_head.named_tensors("alpha."))
        out.update(self.theta_head.named_tensors("theta."))
        return out

    def arrays(self) -> dict:
        return {k: t.data.copy() for k, t in self.named_tensors().items()}

    def load(self, arrays: dict) -> "GranParams":
        for k, t in self.named_tensors().items():
            if arrays[k].shape != t.shape:
                raise ShapeError(f"parameter {k}: stored {arrays[k].shape}, expected {t.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)
        return self

    def zero_grad(self):
        for t in self.named_tensors().values():
            t.grad = None


# ---------------------------------------------------------------------------
# single-step building blocks


@dataclass(frozen=True)
class BlockContext:
    """Indices are local to the step graph: existing nodes first, then the block."""

    t: int
    existing: int
    block_nodes: tuple
    candidate_pairs: np.ndarray  # (P, 2) rows (i, j) with i in block, j < i
    mask: np.ndarray  # (existing + block, B)


@dataclass
class BlockDistribution:
    alpha: Tensor  # (K,)
    theta: Tensor  # (P, K)


def build_augmented_graph(existing_edges, existing_count: int, block_size: int,
                          mask_width: int | None = None, t: int = 0):
    """Real edges among existing nodes plus every edge touching the new block."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    width = block_size if mask_width is None else mask_width
    if width < block_size:
        raise ValueError("mask width smaller than block")
    real = [tuple(e) for e in existing_edges]
    pairs = [(i, j) for i in range(existing_count, existing_count + block_size) for j in range(i)]
    total = existing_count + block_size
    mask = np.zeros((total, width))
    mask[np.arange(existing_count, total), np.arange(block_size)] = 1.0
    ctx = BlockContext(
        t=t,
        existing=existing_count,
        block_nodes=tuple(range(existing_count, total)),
        candidate_pairs=np.array(pairs, dtype=np.int64).reshape(-1, 2),
        mask=mask,
    )
    return real + pairs, ctx


def init_node_embeddings(rows, existing: int, block_len: int, params: GranParams,
                         config: GranConfig) -> Tensor:
    """h0 = row @ W + b for generated rows, zeros for the block being generated."""
    mat = rows.rows if isinstance(rows, OrderedRows) else np.asarray(rows)
    if mat.ndim != 2 or mat.shape[1] != config.n_max:
        raise ShapeError(f"rows of width {mat.shape[-1]} do not match n_max={config.n_max}")
    if existing < 0 or existing > mat.shape[0]:
        raise ValueError(f"existing={existing} outside [0, {mat.shape[0]}]")
    emb = matmul(Tensor(mat[:existing].astype(np.float64)), params.embed_w) + params.embed_b
    zeros = Tensor(np.zeros((block_len, config.hidden_dim)))
    return concat([emb, zeros], axis=0)


def _propagate(h: Tensor, src: np.ndarray, dst: np.ndarray, mask_diff: np.ndarray,
               rp: RoundParams) -> Tensor:
    """One round; node ``dst`` aggregates f(h_dst - h_src) weighted by attention."""
    diff = gather(h, dst) - gather(h, src)
    msg = mlp_forward(rp.msg, diff)
    att = sigmoid(mlp_forward(rp.att, concat([diff, Tensor(mask_diff)], axis=1)))
    agg = segment_sum(msg * att, dst, h.shape[0])
    return gru_cell(rp.gru, h, agg)


def _directed(edges) -> tuple[np.ndarray, np.ndarray]:
    e = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    src = np.concatenate([e[:, 0], e[:, 1]])
    dst = np.concatenate([e[:, 1], e[:, 0]])
    return src, dst


def message_passing_round(h: Tensor, edges, mask: np.ndarray, rp: RoundParams) -> Tensor:
    """Update every node from its full neighborhood over undirected ``edges``."""
    if h.ndim != 2 or mask.shape[0] != h.shape[0]:
        raise ShapeError(f"message passing: {h.shape[0]} node states but mask has {mask.shape[0]} rows")
    src, dst = _directed(edges)
    return _propagate(h, src, dst, mask[dst] - mask[src], rp)


def output_distribution(h_final: Tensor, context: BlockContext, params: GranParams) -> BlockDistribution:
    pairs = context.candidate_pairs
    K = params.alpha_head.d_out
    if len(pairs) == 0:
        return BlockDistribution(Tensor(np.full(K, 1.0 / K)), Tensor(np.zeros((0, K))))
    d = gather(h_final, pairs[:, 0]) - gather(h_final, pairs[:, 1])
    alpha = softmax(reduce_sum(mlp_forward(params.alpha_head, d), axis=0))
    theta = clip(sigmoid(mlp_forward(params.theta_head, d)), THETA_EPS, 1.0 - THETA_EPS)
    return BlockDistribution(alpha, theta)


def block_log_prob(dist: BlockDistribution, observed) -> Tensor:
    """log sum_k alpha_k prod_pairs Bernoulli(observed | theta_k)."""
    y = np.asarray(observed, dtype=np.float64).reshape(-1)
    theta = dist.theta if isinstance(dist.theta, Tensor) else Tensor(dist.theta)
    alpha = dist.alpha if isinstance(dist.alpha, Tensor) else Tensor(dist.alpha)
    if theta.shape[0] != y.shape[0]:
        raise ShapeError(f"observed vector of length {y.shape[0]} for {theta.shape[0]} candidate pairs")
    if y.shape[0] == 0:
        return Tensor(0.0)
    yc = Tensor(y[:, None])
    ll = yc * log(theta) + (1.0 - yc) * log(1.0 - theta)
    return logsumexp(log(alpha) + reduce_sum(ll, axis=0), axis=0)


def step_distribution(rows, existing: int, block_len: int, params: GranParams,
                      config: GranConfig) -> tuple[BlockDistribution, BlockContext]:
    """Run one generation step conditioned on the first ``existing`` rows."""
    mat = rows.rows if isinstance(rows, OrderedRows) else np.asarray(rows)
    ii, jj = np.nonzero(mat[:existing, :existing])
    edges, ctx = build_augmented_graph(zip(ii.tolist(), jj.tolist()), existing, block_len,
                                       mask_width=config.block_size)
    h = init_node_embeddings(mat, existing, block_len, params, config)
    src, dst = _directed(edges)
    mask_diff = ctx.mask[dst] - ctx.mask[src]
    for r in range(config.num_rounds):
        h = _propagate(h, src, dst, mask_diff, params.round(r))
    return output_distribution(h, ctx, params), ctx


# ---------------------------------------------------------------------------
# teacher-forced batch over all steps of one ordered graph


@dataclass
class StepBatch:
    num_nodes: int
    num_steps: int
    node_row: np.ndarray  # ordered row feeding h0, valid where is_existing
    is_existing: np.ndarray  # (num_nodes, 1) float
    src: np.ndarray
    dst: np.ndarray
    mask_diff: np.ndarray  # (E, B)
    pair_i: np.ndarray
    pair_j: np.ndarray
    pair_step: np.ndarray
    scored: np.ndarray  # indices of pairs entering the likelihood
    scored_label: np.ndarray  # (S, 1)
    scored_steps: np.ndarray  # steps with at least one scored pair
    rows: np.ndarray = field(repr=False, default=None)


def build_step_batch(rows: OrderedRows | np.ndarray, config: GranConfig) -> StepBatch:
    mat = rows.rows if isinstance(rows, OrderedRows) else np.asarray(rows)
    N = mat.shape[0]
    B = config.block_size
    lower = np.tril(mat[:, :N], k=-1)
    ei, ej = np.nonzero(lower)  # ei > ej, sorted by ei
    starts = range(N) if config.count_all_block_rows else range(1, N)

    node_row, existing_flag, mask_rows = [], [], []
    src, dst, mdiff = [], [], []
    pi, pj, pstep, pscored, plabel = [], [], [], [], []
    offset = 0
    eye = np.eye(B)
    for step, s in enumerate(starts):
        b = min(B, N - s)
        n_nodes = s + b
        node_row.append(np.arange(n_nodes))
        existing_flag.append(np.arange(n_nodes) < s)
        mask = np.zeros((n_nodes, B))
        mask[s:] = eye[:b]
        # real edges among existing rows
        k = np.searchsorted(ei, s, side="left")
        ru, rv = ei[:k], ej[:k]
        # augmented edges = candidate pairs of the block
        ci = np.concatenate([np.full(s + q, s + q) for q in range(b)])
        cj = np.concatenate([np.arange(s + q) for q in range(b)])
        eu = np.concatenate([ru, ci])
        ev = np.concatenate([rv, cj])
        src.append(np.concatenate([eu, ev]) + offset)
        dst.append(np.concatenate([ev, eu]) + offset)
        mdiff.append(np.concatenate([mask[ev] - mask[eu], mask[eu] - mask[ev]]))
        pi.append(ci + offset)
        pj.append(cj + offset)
        pstep.append(np.full(ci.shape[0], step))
        scored = np.ones(ci.shape[0], dtype=bool) if config.count_all_block_rows else (ci == s)
        pscored.append(scored)
        plabel.append(mat[ci, cj])
        offset += n_nodes

    def cat(parts, dtype=np.int64):
        return np.concatenate(parts).astype(dtype) if parts else np.zeros(0, dtype=dtype)

    pair_step = cat(pstep)
    scored_mask = cat(pscored, bool)
    scored = np.nonzero(scored_mask)[0]
    return StepBatch(
        num_nodes=offset,
        num_steps=len(starts),
        node_row=cat(node_row),
        is_existing=cat(existing_flag, np.float64)[:, None],
        src=cat(src),
        dst=cat(dst),
        mask_diff=np.concatenate(mdiff) if mdiff else np.zeros((0, B)),
        pair_i=cat(pi),
        pair_j=cat(pj),
        pair_step=pair_step,
        scored=scored,
        scored_label=cat(plabel, np.float64)[scored][:, None],
        scored_steps=np.unique(pair_step[scored]),
        rows=mat.astype(np.float64),
    )


def batch_log_prob(batch: StepBatch, params: GranParams, config: GranConfig) -> Tensor:
    """Sum over steps of the block log-likelihood, all steps in one pass."""
    if batch.scored.size == 0:
        return Tensor(0.0)
    emb = matmul(Tensor(batch.rows), params.embed_w) + params.embed_b
    h = gather(emb, batch.node_row) * Tensor(batch.is_existing)
    for r in range(config.num_rounds):
        h = _propagate(h, batch.src, batch.dst, batch.mask_diff, params.round(r))
    d = gather(h, batch.pair_i) - gather(h, batch.pair_j)
    log_alpha = log_softmax(segment_sum(mlp_forward(params.alpha_head, d), batch.pair_step, batch.num_steps))
    ds = gather(d, batch.scored)
    theta = clip(sigmoid(mlp_forward(params.theta_head, ds)), THETA_EPS, 1.0 - THETA_EPS)
    y = Tensor(batch.scored_label)
    ll = y * log(theta) + (1.0 - y) * log(1.0 - theta)
    step_ll = segment_sum(ll, batch.pair_step[batch.scored], batch.num_steps)
    per_step = logsumexp(log_alpha + step_ll, axis=1)
    return reduce_sum(gather(per_step, batch.scored_steps))


def graph_log_prob(rows: OrderedRows | np.ndarray, params: GranParams, config: GranConfig) -> Tensor:
    return batch_log_prob(build_step_batch(rows, config), params, config)


# ---------------------------------------------------------------------------
# ordering family objective


def family_log_probs(family, params: GranParams, config: GranConfig, batches=None) -> Tensor:
    """Per-ordering log p(A^pi), stacked into a vector."""
    if batches is None:
        members = family.rows if isinstance(family, OrderingFamily) else list(family)
        if not members:
            raise ValueError("empty ordering family")
        batches = [build_step_batch(r, config) for r in members]
    if not batches:
        raise ValueError("empty ordering family")
    return concat([batch_log_prob(b, params, config).reshape(1) for b in batches], axis=0)


def family_loss(graph: Graph | None, family, params: GranParams, config: GranConfig,
                batches=None) -> Tensor:
    """-log sum_pi p(A^pi) over the family."""
    return -logsumexp(family_log_probs(family, params, config, batches), axis=0)


def posterior_over_orderings(graph: Graph | None, family, params: GranParams,
                             config: GranConfig) -> np.ndarray:
    lps = family_log_probs(family, params, config).data
    return softmax(Tensor(lps)).data


# ---------------------------------------------------------------------------
# sampling


def num_generation_steps(n: int, block_size: int, stride: int) -> int:
    """Sequential model calls for an n-node graph; floor((n-B)/S)+1 when S divides n-B."""
    if n <= block_size:
        return 1
    return -(-(n - block_size) // stride) + 1


def sample_graph(params: GranParams, config: GranConfig, stride: int, n_target: int,
                 rng: np.random.Generator | None = None, threshold: bool = False):
    """Generate an ``n_target``-node graph; returns ``(graph, model_invocations)``.

    With ``threshold`` the edge is kept iff its mixture-averaged probability
    exceeds 0.5 and no randomness is used.
    """
    B = config.block_size
    if not 1 <= stride <= B:
        raise ValueError(f"stride must lie in [1, {B}], got {stride}")
    if not 1 <= n_target <= config.n_max:
        raise ValueError(f"n_target must lie in [1, {config.n_max}], got {n_target}")
    if rng is None and not threshold:
        raise ValueError("stochastic sampling needs a random generator")
    rows = np.zeros((n_target, config.n_max), dtype=np.uint8)
    s = 0
    calls = 0
    while s < n_target:
        b = min(B, n_target - s)
        dist, ctx = step_distribution(rows, s, b, params, config)
        calls += 1
        alpha, theta = dist.alpha.data, dist.theta.data
        if len(ctx.candidate_pairs):
            if threshold:
                edges = (theta @ alpha) > 0.5
            else:
                k = rng.choice(alpha.shape[0], p=alpha / alpha.sum())
                edges = rng.random(theta.shape[0]) < theta[:, k]
            pi, pj = ctx.candidate_pairs[:, 0], ctx.candidate_pairs[:, 1]
            rows[pi, pj] = edges.astype(np.uint8)
        keep = b if s + b >= n_target else min(stride, b)
        rows[s + keep:s + b] = 0
        s += keep
    return from_ordered_rows(rows[:, :n_target]), calls


def sample_size(train_sizes, rng: np.random.Generator) -> int:
    sizes = [g.num_nodes if isinstance(g, Graph) else int(g) for g in train_sizes]
    if not sizes:
        raise ValueError("cannot draw a size from an empty split")
    return int(sizes[int(rng.integers(len(sizes)))])
