"""Sharded forward/backward for sparse recommendation models.

The weights-rich first layer of each model is replaced by shard-local
partial operators whose aggregated results reproduce the unsharded
computation exactly. Everything above the aggregation is replicated per
worker. The collective group is the only inter-worker channel and it is
used in the forward phase only: backward consumes aggregated values every
worker already holds, so its communication is zero by construction.

Model kinds:

- ``lr``        logistic regression; one scalar partial per sample.
- ``fm``        lr plus a second-order term from two aggregated partials
                (a d-vector and a scalar per sample).
- ``wdl``       lr plus a relu tower whose first fully-connected layer is
                computed as a row-block partial product per worker.
- ``deepfm``    lr + second-order + tower, with one shared latent table.
- ``dcn-demo``  substituted embedding tower feeding a cross-layer stack;
                each cross layer needs one scalar-per-sample aggregation.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import vecmath
from .collectives import PHASE_BACKWARD, PHASE_FORWARD, PHASE_OPTIMIZER
from .errors import ConsistencyError, DimensionError, ProtocolError
from .optim import OptimizerConfig, dense_step, init_dense_state, step as optim_step
from .sparse import ShardedWeightTable, unique_with_inverse

MODEL_KINDS = ("lr", "fm", "wdl", "deepfm", "dcn-demo")
CONFIG_VERSION = 1


@dataclass
class SparseBatch:
    """A batch in flat coordinate form.

    ``sample_ids`` maps each feature occurrence to its row in [0, batch_size);
    duplicate (field, key) pairs within a sample are legal and their values
    accumulate. Labels are 0/1 floats.
    """

    labels: np.ndarray
    sample_ids: np.ndarray
    fields: np.ndarray
    keys: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.sample_ids = np.asarray(self.sample_ids, dtype=np.int64)
        self.fields = np.asarray(self.fields, dtype=np.int64)
        self.keys = np.asarray(self.keys, dtype=np.uint64)
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.labels.ndim != 1 or self.labels.shape[0] < 1:
            raise DimensionError("batch needs at least one sample")
        n = self.sample_ids.shape[0]
        if not (self.fields.shape[0] == self.keys.shape[0] == self.values.shape[0] == n):
            raise DimensionError("feature arrays must share one length")
        if n and (self.sample_ids.min() < 0 or self.sample_ids.max() >= self.batch_size):
            raise DimensionError("sample ids out of range")

    @property
    def batch_size(self):
        return self.labels.shape[0]

    def shard_slice(self, rank, n_workers):
        """The feature occurrences owned by one worker, order preserved."""
        mask = self.fields % n_workers == rank
        return BatchSlice(
            batch_size=self.batch_size,
            sample_ids=self.sample_ids[mask],
            fields=self.fields[mask],
            keys=self.keys[mask],
            values=self.values[mask],
        )

    @staticmethod
    def from_samples(labels, samples):
        """Build from one (field, key, value) list per sample."""
        sample_ids, fields, keys, values = [], [], [], []
        for i, feats in enumerate(samples):
            for f, k, v in feats:
                sample_ids.append(i)
                fields.append(f)
                keys.append(k)
                values.append(v)
        return SparseBatch(
            labels=np.asarray(labels, dtype=np.float64),
            sample_ids=np.asarray(sample_ids, dtype=np.int64),
            fields=np.asarray(fields, dtype=np.int64),
            keys=np.asarray(keys, dtype=np.uint64),
            values=np.asarray(values, dtype=np.float32),
        )


@dataclass
class BatchSlice:
    batch_size: int
    sample_ids: np.ndarray
    fields: np.ndarray
    keys: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class ModelGraph:
    """Architecture and optimizer bindings for one model."""

    kind: str
    n_fields: int
    embedding_dim: int = 8
    first_fc_width: int = 16
    hidden_widths: tuple = (16,)
    cross_depth: int = 2
    seed: int = 0
    first_order_opt: OptimizerConfig = field(default_factory=OptimizerConfig.ftrl)
    embedding_opt: OptimizerConfig = field(default_factory=OptimizerConfig.adam)
    dense_opt: OptimizerConfig = field(default_factory=OptimizerConfig.adam)

    def __post_init__(self):
        if self.kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {MODEL_KINDS}")
        if self.n_fields < 1:
            raise ValueError("need at least one field")
        if self.embedding_dim < 1 or self.first_fc_width < 1:
            raise ValueError("embedding_dim and first_fc_width must be positive")
        if self.kind == "dcn-demo" and self.cross_depth < 1:
            raise ValueError("dcn-demo needs at least one cross layer")
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))

    @property
    def uses_linear(self):
        return self.kind in ("lr", "fm", "wdl", "deepfm")

    @property
    def uses_second_order(self):
        return self.kind in ("fm", "deepfm")

    @property
    def uses_tower(self):
        return self.kind in ("wdl", "deepfm", "dcn-demo")

    @property
    def uses_mlp(self):
        return self.kind in ("wdl", "deepfm")

    @property
    def uses_cross(self):
        return self.kind == "dcn-demo"

    def aggregation_count(self):
        """Collective calls per forward pass."""
        m = 0
        if self.uses_linear:
            m += 1
        if self.uses_second_order:
            m += 2
        if self.uses_tower:
            m += 1
        if self.uses_cross:
            m += self.cross_depth
        return m

    def to_config(self):
        return {
            "version": CONFIG_VERSION,
            "kind": self.kind,
            "n_fields": self.n_fields,
            "embedding_dim": self.embedding_dim,
            "first_fc_width": self.first_fc_width,
            "hidden_widths": list(self.hidden_widths),
            "cross_depth": self.cross_depth,
            "seed": self.seed,
            "first_order_opt": self.first_order_opt.to_config(),
            "embedding_opt": self.embedding_opt.to_config(),
            "dense_opt": self.dense_opt.to_config(),
        }

    @staticmethod
    def from_config(doc):
        doc = dict(doc)
        version = doc.pop("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported model config version {version}")
        unknown = set(doc) - {f.name for f in dc_fields(ModelGraph)}
        if unknown:
            raise ValueError(f"unknown model config keys: {', '.join(sorted(unknown))}")
        for req in ("kind", "n_fields"):
            if req not in doc:
                raise ValueError(f"model config missing {req!r}")
        for name in ("first_order_opt", "embedding_opt", "dense_opt"):
            if name in doc and isinstance(doc[name], dict):
                doc[name] = OptimizerConfig.from_config(doc[name])
        doc["hidden_widths"] = tuple(doc.get("hidden_widths", (16,)))
        return ModelGraph(**doc)


# ---------------------------------------------------------------------------
# shard-local partial operators and their combiners


def linear_partial(weights, values, sample_ids, batch_size):
    """Per-sample sum of w*x over one shard's feature occurrences."""
    out = np.zeros(batch_size, dtype=weights.dtype)
    np.add.at(out, sample_ids, weights[:, 0] * values)
    return out


def second_order_partials(latents, values, sample_ids, batch_size):
    """Local sums of v*x (a d-vector) and of <v*x, v*x> (a scalar) per sample."""
    vx = latents * values[:, None]
    m1 = np.zeros((batch_size, latents.shape[1]), dtype=latents.dtype)
    np.add.at(m1, sample_ids, vx)
    m2 = np.zeros(batch_size, dtype=latents.dtype)
    np.add.at(m2, sample_ids, np.sum(vx * vx, axis=1))
    return m1, m2


def second_order_combine(agg_m1, agg_m2):
    """Pairwise-interaction value from aggregated partials.

    Uses the square-of-sum minus sum-of-squares identity, so only the two
    aggregated quantities are needed, never the individual latents.
    """
    half = agg_m1.dtype.type(0.5)
    return half * (np.sum(agg_m1 * agg_m1, axis=1) - agg_m2)


def pooled_fields(slice_, field_positions, latents, n_local_fields, dim):
    """Sum-pool embeddings into per-field slots and concatenate in field order."""
    pooled = np.zeros((slice_.batch_size, n_local_fields, dim), dtype=latents.dtype)
    if slice_.fields.size:
        np.add.at(
            pooled,
            (slice_.sample_ids, field_positions[slice_.fields]),
            latents * slice_.values[:, None],
        )
    return pooled.reshape(slice_.batch_size, n_local_fields * dim)


def tower_partial(pooled_concat, fc_rows):
    """Local row-block product with the first fully-connected layer."""
    return vecmath.matmul_rows(pooled_concat, fc_rows)


def cross_partial(x, w, lo, hi):
    """Contribution of one coordinate range to the per-sample <x, w> scalar."""
    return np.sum(x[:, lo:hi] * w[lo:hi], axis=1)


def cross_combine(x0, s, b, x):
    """One cross layer: x0 * <x, w> + b + x, with <x, w> already aggregated."""
    return x0 * s[:, None] + b + x


# ---------------------------------------------------------------------------
# replicated upper stack


def mlp_forward(params, hidden_widths, agg):
    """Relu tower above the aggregated first layer; returns (logit, cache)."""
    h = vecmath.relu(agg)
    hs = [h]
    zs = []
    for i in range(len(hidden_widths)):
        z = vecmath.matmul_rows(h, params[f"mlp{i}.w"]) + params[f"mlp{i}.b"]
        zs.append(z)
        h = vecmath.relu(z)
        hs.append(h)
    logit = vecmath.matmul_rows(h, params["out.w"])[:, 0] + params["out.b"][0]
    return logit, {"agg": agg, "hs": hs, "zs": zs}


def mlp_backward(params, hidden_widths, cache, g_logit):
    """Gradients of the relu tower; returns (grad wrt agg, dense grads)."""
    grads = {}
    h_last = cache["hs"][-1]
    grads["out.w"] = vecmath.matmul_rows(h_last.T, g_logit[:, None])
    grads["out.b"] = np.array([np.sum(g_logit)], dtype=h_last.dtype)
    g_h = g_logit[:, None] * params["out.w"][:, 0][None, :]
    for i in reversed(range(len(hidden_widths))):
        g_z = g_h * (cache["zs"][i] > 0)
        grads[f"mlp{i}.w"] = vecmath.matmul_rows(cache["hs"][i].T, g_z)
        grads[f"mlp{i}.b"] = np.sum(g_z, axis=0)
        g_h = vecmath.matmul_rows(g_z, params[f"mlp{i}.w"].T)
    g_agg = g_h * (cache["agg"] > 0)
    return g_agg, grads


def cross_forward_local(params, depth, x0, rank_range, partial_provider):
    """Cross stack where the <x, w> scalar arrives through partial_provider.

    partial_provider(k, local_scalar) must return the aggregated scalar;
    the sequential engine and the unsharded oracle plug in different
    providers but share this walk.
    """
    lo, hi = rank_range
    x = x0
    xs = [x0]
    ss = []
    for k in range(depth):
        w = params[f"cross{k}.w"]
        s = partial_provider(k, cross_partial(x, w, lo, hi))
        x = cross_combine(x0, s, params[f"cross{k}.b"], x)
        ss.append(s)
        xs.append(x)
    logit = vecmath.matmul_rows(x, params["out.w"])[:, 0] + params["out.b"][0]
    return logit, {"xs": xs, "ss": ss}


def cross_backward(params, depth, cache, g_logit):
    """Gradients of the cross stack; returns (grad wrt x0, dense grads).

    Every worker holds the full cross vectors, so this needs no
    communication: the recurrence g_k = g_{k+1} + <x0, g_{k+1}> * w_k walks
    down the stack with locally available values.
    """
    xs, ss = cache["xs"], cache["ss"]
    x0 = xs[0]
    grads = {}
    x_top = xs[depth]
    grads["out.w"] = vecmath.matmul_rows(x_top.T, g_logit[:, None])
    grads["out.b"] = np.array([np.sum(g_logit)], dtype=x_top.dtype)
    g = g_logit[:, None] * params["out.w"][:, 0][None, :]
    g_x0 = np.zeros_like(x0)
    for k in reversed(range(depth)):
        c = np.sum(x0 * g, axis=1)
        grads[f"cross{k}.w"] = vecmath.matmul_rows(c[None, :], xs[k])[0]
        grads[f"cross{k}.b"] = np.sum(g, axis=0)
        g_x0 += ss[k][:, None] * g
        g = g + c[:, None] * params[f"cross{k}.w"][None, :]
    return g_x0 + g, grads


# ---------------------------------------------------------------------------
# parameter construction


def glorot_uniform(rng, fan_in, fan_out, shape, dtype):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape).astype(dtype)


def build_dense_params(graph, dtype):
    """Replicated dense parameters, deterministic in the graph seed.

    The first fully-connected matrix is built here in full and sliced into
    per-worker row blocks by the engine, so the same (field, row) weight has
    the same value at every worker count.
    """
    rng = np.random.default_rng(np.random.SeedSequence((int(graph.seed), 1)))
    params = {}
    if graph.uses_linear:
        params["bias"] = np.zeros(1, dtype=dtype)
    full_fc = None
    if graph.uses_tower:
        fan_in = graph.n_fields * graph.embedding_dim
        h = graph.first_fc_width
        full_fc = glorot_uniform(rng, fan_in, h, (fan_in, h), dtype)
    if graph.uses_mlp:
        width = graph.first_fc_width
        for i, w_out in enumerate(graph.hidden_widths):
            params[f"mlp{i}.w"] = glorot_uniform(rng, width, w_out, (width, w_out), dtype)
            params[f"mlp{i}.b"] = np.zeros(w_out, dtype=dtype)
            width = w_out
        params["out.w"] = glorot_uniform(rng, width, 1, (width, 1), dtype)
        params["out.b"] = np.zeros(1, dtype=dtype)
    if graph.uses_cross:
        h = graph.first_fc_width
        for k in range(graph.cross_depth):
            params[f"cross{k}.w"] = glorot_uniform(rng, h, 1, (h,), dtype)
            params[f"cross{k}.b"] = np.zeros(h, dtype=dtype)
        params["out.w"] = glorot_uniform(rng, h, 1, (h, 1), dtype)
        params["out.b"] = np.zeros(1, dtype=dtype)
    return params, full_fc


# ---------------------------------------------------------------------------
# the engine


@dataclass
class ForwardPass:
    probs: np.ndarray
    logit: np.ndarray
    epoch: int
    batch: SparseBatch
    slices: list
    linear_rows: list
    latent_rows: list
    agg_m1: np.ndarray | None
    pooled: list
    mlp_caches: list
    cross_cache: dict | None


@dataclass
class Gradients:
    dense: list
    fc_blocks: list
    linear: list
    latent: list


class SubstitutedModel:
    """Executes one model graph over a worker group.

    Weights-rich state is sharded by field (linear and latent tables, plus
    each worker's row block of the first fully-connected layer); everything
    above the aggregation points is replicated and must stay bitwise
    identical across workers, which train_step verifies every iteration.
    """

    def __init__(self, graph, group, dtype=np.float32):
        self.graph = graph
        self.group = group
        self.dtype = np.dtype(dtype)
        n = group.n_workers
        self.n_workers = n

        self.linear_table = None
        if graph.uses_linear:
            self.linear_table = ShardedWeightTable(
                n, 1, seed=graph.seed, init="zeros",
                slot_widths=graph.first_order_opt.slot_widths(1),
                dtype=self.dtype, name="linear",
            )
        self.latent_table = None
        if graph.uses_second_order or graph.uses_tower:
            self.latent_table = ShardedWeightTable(
                n, graph.embedding_dim, seed=graph.seed, init="uniform",
                slot_widths=graph.embedding_opt.slot_widths(graph.embedding_dim),
                dtype=self.dtype, name="latent",
            )

        self.rank_fields = [
            [f for f in range(graph.n_fields) if f % n == r] for r in range(n)
        ]
        self._field_pos = []
        for r in range(n):
            pos = np.full(graph.n_fields, -1, dtype=np.int64)
            for i, f in enumerate(self.rank_fields[r]):
                pos[f] = i
            self._field_pos.append(pos)

        params, full_fc = build_dense_params(graph, self.dtype)
        self.dense = [copy.deepcopy(params) for _ in range(n)]
        self.dense_state = [
            {name: init_dense_state(graph.dense_opt, arr.size, self.dtype)
             for name, arr in params.items()}
            for _ in range(n)
        ]

        self.fc_blocks = [None] * n
        self.fc_state = [None] * n
        if graph.uses_tower:
            d = graph.embedding_dim
            for r in range(n):
                rows = [np.arange(f * d, (f + 1) * d) for f in self.rank_fields[r]]
                idx = np.concatenate(rows) if rows else np.empty(0, dtype=np.int64)
                self.fc_blocks[r] = full_fc[idx].copy()
                self.fc_state[r] = init_dense_state(
                    graph.dense_opt, self.fc_blocks[r].size, self.dtype
                )

        if graph.uses_cross:
            h = graph.first_fc_width
            bounds = np.linspace(0, h, n + 1).astype(int)
            self._cross_ranges = [(int(bounds[r]), int(bounds[r + 1])) for r in range(n)]

    # -- forward ----------------------------------------------------------

    def forward(self, batch):
        """Forward pass over the full batch; every aggregation is one collective."""
        graph = self.graph
        group = self.group
        group.set_phase(PHASE_FORWARD)
        n = self.n_workers
        B = batch.batch_size
        slices = [batch.shard_slice(r, n) for r in range(n)]

        logit = np.zeros(B, dtype=self.dtype)
        linear_rows = [None] * n
        latent_rows = [None] * n
        agg_m1 = None
        pooled = [None] * n
        mlp_caches = [None] * n
        cross_cache = None

        if graph.uses_linear:
            logit = logit + self.dense[0]["bias"][0]
            partials = []
            for r, sl in enumerate(slices):
                w = self.linear_table.lookup(r, sl.fields, sl.keys)
                linear_rows[r] = w
                partials.append(linear_partial(w, sl.values, sl.sample_ids, B))
            logit = logit + group.all_reduce_sum(partials, op="linear.partial")

        if self.latent_table is not None:
            for r, sl in enumerate(slices):
                latent_rows[r] = self.latent_table.lookup(r, sl.fields, sl.keys)

        if graph.uses_second_order:
            p1, p2 = [], []
            for r, sl in enumerate(slices):
                m1, m2 = second_order_partials(latent_rows[r], sl.values, sl.sample_ids, B)
                p1.append(m1)
                p2.append(m2)
            agg_m1 = group.all_reduce_sum(p1, op="fm2.m1")
            agg_m2 = group.all_reduce_sum(p2, op="fm2.m2")
            logit = logit + second_order_combine(agg_m1, agg_m2)

        if graph.uses_tower:
            d = graph.embedding_dim
            partials = []
            for r, sl in enumerate(slices):
                pooled[r] = pooled_fields(
                    sl, self._field_pos[r], latent_rows[r], len(self.rank_fields[r]), d
                )
                partials.append(tower_partial(pooled[r], self.fc_blocks[r]))
            agg_tower = group.all_reduce_sum(partials, op="tower.first_fc")

            if graph.uses_mlp:
                deep = None
                for r in range(n):
                    dl, cache = mlp_forward(self.dense[r], graph.hidden_widths, agg_tower)
                    mlp_caches[r] = cache
                    if deep is None:
                        deep = dl
                    elif not np.array_equal(deep, dl):
                        raise ConsistencyError(
                            f"replicated tower output diverged on worker {r}"
                        )
                logit = logit + deep
            else:
                cross_cache = self._cross_forward(agg_tower)
                logit = logit + cross_cache["logit"]

        probs = vecmath.sigmoid(logit)
        return ForwardPass(
            probs=probs, logit=logit, epoch=group.epoch, batch=batch, slices=slices,
            linear_rows=linear_rows, latent_rows=latent_rows, agg_m1=agg_m1,
            pooled=pooled, mlp_caches=mlp_caches, cross_cache=cross_cache,
        )

    def _cross_forward(self, x0):
        """Cross stack: each layer aggregates one scalar per sample.

        The per-layer partials are computed rank by rank from disjoint
        coordinate ranges of the (replicated) running vector; layer weights
        are replicated so backward stays local.
        """
        graph = self.graph
        group = self.group
        n = self.n_workers
        depth = graph.cross_depth
        x = x0
        xs = [x0]
        ss = []
        for k in range(depth):
            partials = []
            for r in range(n):
                lo, hi = self._cross_ranges[r]
                partials.append(cross_partial(x, self.dense[r][f"cross{k}.w"], lo, hi))
            s = group.all_reduce_sum(partials, op=f"cross.{k}")
            ss.append(s)
            x_next = None
            for r in range(n):
                cand = cross_combine(x0, s, self.dense[r][f"cross{k}.b"], x)
                if x_next is None:
                    x_next = cand
                elif not np.array_equal(x_next, cand):
                    raise ConsistencyError(f"cross layer {k} diverged on worker {r}")
            x = x_next
            xs.append(x)
        logit = None
        for r in range(n):
            cand = vecmath.matmul_rows(x, self.dense[r]["out.w"])[:, 0]
            cand = cand + self.dense[r]["out.b"][0]
            if logit is None:
                logit = cand
            elif not np.array_equal(logit, cand):
                raise ConsistencyError(f"cross head diverged on worker {r}")
        return {"xs": xs, "ss": ss, "logit": logit}

    # -- backward ---------------------------------------------------------

    def backward(self, fwd, labels=None):
        """Gradients for one forward pass. Performs no collective calls.

        Aggregation distributes the incoming gradient unchanged to every
        local partial, and each worker already holds all aggregated values,
        so everything below decomposes into shard-local work.
        """
        graph = self.graph
        group = self.group
        if fwd.epoch != group.epoch:
            raise ProtocolError(
                f"backward for epoch {fwd.epoch} but the group is at epoch {group.epoch}"
            )
        group.set_phase(PHASE_BACKWARD)
        labels = fwd.batch.labels if labels is None else np.asarray(labels, dtype=np.float64)
        B = fwd.batch.batch_size
        n = self.n_workers
        delta = ((fwd.probs - labels) / B).astype(self.dtype)

        dense_grads = [dict() for _ in range(n)]
        fc_grads = [None] * n
        linear_grads = [None] * n
        latent_grads = [None] * n

        if graph.uses_linear:
            for r in range(n):
                dense_grads[r]["bias"] = np.array([np.sum(delta)], dtype=self.dtype)
            for r, sl in enumerate(fwd.slices):
                contrib = (delta[sl.sample_ids] * sl.values)[:, None]
                uf, uk, inv = unique_with_inverse(sl.fields, sl.keys)
                g = np.zeros((len(uf), 1), dtype=self.dtype)
                np.add.at(g, inv, contrib)
                linear_grads[r] = (uf, uk, g)

        latent_contrib = [None] * n
        if graph.uses_second_order:
            for r, sl in enumerate(fwd.slices):
                rows = fwd.latent_rows[r]
                x = sl.values[:, None]
                contrib = delta[sl.sample_ids][:, None] * (fwd.agg_m1[sl.sample_ids] * x - rows * x * x)
                latent_contrib[r] = contrib

        g_x0 = None
        if graph.uses_tower:
            if graph.uses_mlp:
                for r in range(n):
                    g_agg_r, grads_r = mlp_backward(
                        self.dense[r], graph.hidden_widths, fwd.mlp_caches[r], delta
                    )
                    dense_grads[r].update(grads_r)
                    if g_x0 is None:
                        g_x0 = g_agg_r
                    elif not np.array_equal(g_x0, g_agg_r):
                        raise ConsistencyError(f"tower backward diverged on worker {r}")
            else:
                for r in range(n):
                    g_agg_r, grads_r = cross_backward(
                        self.dense[r], graph.cross_depth, fwd.cross_cache, delta
                    )
                    dense_grads[r].update(grads_r)
                    if g_x0 is None:
                        g_x0 = g_agg_r
                    elif not np.array_equal(g_x0, g_agg_r):
                        raise ConsistencyError(f"cross backward diverged on worker {r}")

            d = graph.embedding_dim
            for r, sl in enumerate(fwd.slices):
                fc_grads[r] = vecmath.matmul_rows(fwd.pooled[r].T, g_x0)
                g_pooled = vecmath.matmul_rows(g_x0, self.fc_blocks[r].T)
                g_pooled = g_pooled.reshape(B, len(self.rank_fields[r]), d)
                contrib = (
                    g_pooled[sl.sample_ids, self._field_pos[r][sl.fields]]
                    * sl.values[:, None]
                )
                if latent_contrib[r] is None:
                    latent_contrib[r] = contrib
                else:
                    latent_contrib[r] = latent_contrib[r] + contrib

        if self.latent_table is not None:
            for r, sl in enumerate(fwd.slices):
                uf, uk, inv = unique_with_inverse(sl.fields, sl.keys)
                g = np.zeros((len(uf), graph.embedding_dim), dtype=self.dtype)
                np.add.at(g, inv, latent_contrib[r])
                latent_grads[r] = (uf, uk, g)

        for r in range(1, n):
            for name, g0 in dense_grads[0].items():
                if not np.array_equal(g0, dense_grads[r][name]):
                    raise ConsistencyError(
                        f"replicated gradient for {name} diverged on worker {r}"
                    )

        return Gradients(
            dense=dense_grads, fc_blocks=fc_grads, linear=linear_grads, latent=latent_grads
        )

    # -- update -----------------------------------------------------------

    def apply_gradients(self, grads):
        """Shard-local optimizer step; replicated tensors update identically."""
        graph = self.graph
        self.group.set_phase(PHASE_OPTIMIZER)
        n = self.n_workers
        for r in range(n):
            if grads.linear[r] is not None:
                uf, uk, g = grads.linear[r]
                if len(uf):
                    w = self.linear_table.lookup(r, uf, uk)
                    slots = self.linear_table.slot_values(r, uf, uk)
                    new_w, new_slots = optim_step(graph.first_order_opt, w, slots, g)
                    self.linear_table.apply_update(r, uf, uk, new_w, new_slots)
            if grads.latent[r] is not None:
                uf, uk, g = grads.latent[r]
                if len(uf):
                    w = self.latent_table.lookup(r, uf, uk)
                    slots = self.latent_table.slot_values(r, uf, uk)
                    new_w, new_slots = optim_step(graph.embedding_opt, w, slots, g)
                    self.latent_table.apply_update(r, uf, uk, new_w, new_slots)
            if grads.fc_blocks[r] is not None and self.fc_blocks[r].size:
                self.fc_blocks[r], self.fc_state[r] = dense_step(
                    graph.dense_opt, self.fc_blocks[r], self.fc_state[r], grads.fc_blocks[r]
                )
            for name, g in grads.dense[r].items():
                self.dense[r][name], self.dense_state[r][name] = dense_step(
                    graph.dense_opt, self.dense[r][name], self.dense_state[r][name], g
                )

    def check_replicas(self):
        """Replicated tensors must stay bitwise identical across workers."""
        for r in range(1, self.n_workers):
            for name, ref in self.dense[0].items():
                if not np.array_equal(ref, self.dense[r][name]):
                    raise ConsistencyError(
                        f"replica of {name} on worker {r} diverged from worker 0"
                    )

    def train_step(self, batch):
        """Forward, backward, update, replica check, epoch barrier."""
        fwd = self.forward(batch)
        grads = self.backward(fwd)
        self.apply_gradients(grads)
        self.check_replicas()
        self.group.advance_epoch()
        return fwd

    # -- persistence ------------------------------------------------------

    def save_checkpoint(self, directory):
        """Tables as shard files, dense replicas (worker 0) as .npy tensors."""
        import os

        os.makedirs(directory, exist_ok=True)
        paths = []
        if self.linear_table is not None:
            paths += self.linear_table.save(directory)
        if self.latent_table is not None:
            paths += self.latent_table.save(directory)
        for r in range(self.n_workers):
            if self.fc_blocks[r] is not None:
                p = os.path.join(directory, f"fc-block-{r:04d}.npy")
                np.save(p, self.fc_blocks[r])
                paths.append(p)
        for name, arr in self.dense[0].items():
            p = os.path.join(directory, f"dense-{name.replace('.', '_')}.npy")
            np.save(p, arr)
            paths.append(p)
        return sorted(paths)
