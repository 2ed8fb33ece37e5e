"""Synchronous training loop, evaluation, and the communication benchmark.

Every iteration follows the same locked sequence: route the global batch to
shards, aggregate the substituted forward, compute loss, run the
communication-free backward, apply shard-local and replicated updates, check
replica integrity, and cross the epoch barrier. The loop is deterministic:
a config and seed fully determine every metric, ledger entry, and
checkpoint byte.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from .collectives import PHASE_BACKWARD, PHASE_FORWARD, WorkerGroup
from .costmodel import (
    COMPONENT_KINDS,
    CommReportRow,
    CostInputs,
    REFERENCE_UNIQ_FEATS,
    component_payload_sizes,
    q_des,
    q_mesh,
    saving_ratio,
)
from .data import SyntheticSpec, gen_synthetic, read_criteo_batches
from .metrics import auc as auc_metric, logloss as logloss_metric
from .models import ModelGraph, SubstitutedModel
from .errors import MetricError

RUN_CONFIG_VERSION = 1


@dataclass
class RunConfig:
    graph: ModelGraph
    n_workers: int = 1
    batch_size: int = 512
    epochs: int = 1
    seed: int = 0
    data: str = "synthetic"
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)
    train_samples: int = 50000
    test_samples: int = 5000
    out_dir: str | None = None

    def __post_init__(self):
        if self.n_workers < 1 or self.batch_size < 1:
            raise ValueError("need positive worker count and batch size")
        if self.epochs < 0:
            raise ValueError("epochs must be nonnegative")

    def to_json(self):
        doc = {
            "version": RUN_CONFIG_VERSION,
            "graph": self.graph.to_config(),
            "n_workers": self.n_workers,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "data": self.data,
            "synthetic": self.synthetic.to_config(),
            "train_samples": self.train_samples,
            "test_samples": self.test_samples,
            "out_dir": self.out_dir,
        }
        return json.dumps(doc, indent=2) + "\n"

    @staticmethod
    def from_json(text):
        doc = json.loads(text)
        version = doc.pop("version", RUN_CONFIG_VERSION)
        if version != RUN_CONFIG_VERSION:
            raise ValueError(f"unsupported run config version {version}")
        unknown = set(doc) - {f.name for f in dc_fields(RunConfig)}
        if unknown:
            raise ValueError(f"unknown run config keys: {', '.join(sorted(unknown))}")
        if "graph" not in doc:
            raise ValueError("run config missing 'graph'")
        doc["graph"] = ModelGraph.from_config(doc["graph"])
        doc["synthetic"] = SyntheticSpec.from_config(doc.get("synthetic", {}))
        return RunConfig(**doc)


@dataclass
class MetricsSnapshot:
    step: int
    auc: float
    logloss: float
    fwd_bytes: int
    bwd_bytes: int
    wall_ms: float

    def to_dict(self):
        return {
            "step": self.step,
            "auc": self.auc,
            "logloss": self.logloss,
            "fwd_bytes": self.fwd_bytes,
            "bwd_bytes": self.bwd_bytes,
            "wall_ms": self.wall_ms,
        }

    def deterministic_fields(self):
        """Everything except wall time, which is not reproducible."""
        return (self.step, self.auc, self.logloss, self.fwd_bytes, self.bwd_bytes)


METRICS_COLUMNS = ("step", "auc", "logloss", "fwd_bytes", "bwd_bytes", "wall_ms")


def metrics_to_tsv(snapshots):
    lines = ["\t".join(METRICS_COLUMNS)]
    for s in snapshots:
        d = s.to_dict()
        cells = []
        for c in METRICS_COLUMNS:
            v = d[c]
            cells.append(f"{v:.17g}" if isinstance(v, float) else str(v))
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    config: RunConfig
    snapshots: list
    engine: SubstitutedModel
    group: WorkerGroup
    checkpoint_dir: str | None = None


def load_batches(cfg, split):
    """Materialized batch list for one split; identical across calls."""
    if cfg.data == "synthetic":
        if split == "train":
            return list(gen_synthetic(cfg.synthetic, cfg.train_samples, cfg.batch_size, cfg.seed))
        return list(
            gen_synthetic(cfg.synthetic, cfg.test_samples, cfg.batch_size, cfg.seed + 1)
        )
    return list(read_criteo_batches(cfg.data, cfg.batch_size, split=split))


def evaluate(engine, batches):
    """Held-out AUC and log loss through the engine's own forward."""
    probs, labels = [], []
    for batch in batches:
        fwd = engine.forward(batch)
        probs.append(fwd.probs)
        labels.append(batch.labels)
    p = np.concatenate(probs)
    y = np.concatenate(labels)
    return auc_metric(p, y), logloss_metric(p, y)


def train(cfg):
    """Run the synchronous loop; snapshot held-out metrics after each epoch."""
    group = WorkerGroup(cfg.n_workers)
    engine = SubstitutedModel(cfg.graph, group)
    train_batches = load_batches(cfg, "train")
    test_batches = load_batches(cfg, "test")

    snapshots = []
    step = 0
    t0 = time.perf_counter()
    for _ in range(cfg.epochs):
        for batch in train_batches:
            engine.train_step(batch)
            step += 1
        test_auc, test_ll = evaluate(engine, test_batches)
        snapshots.append(
            MetricsSnapshot(
                step=step,
                auc=test_auc,
                logloss=test_ll,
                fwd_bytes=group.ledger.total_bytes(phase=PHASE_FORWARD),
                bwd_bytes=group.ledger.total_bytes(phase=PHASE_BACKWARD),
                wall_ms=(time.perf_counter() - t0) * 1000.0,
            )
        )

    checkpoint_dir = None
    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        checkpoint_dir = os.path.join(cfg.out_dir, "checkpoint")
        engine.save_checkpoint(checkpoint_dir)
        with open(os.path.join(cfg.out_dir, "metrics.tsv"), "w", encoding="utf-8") as fh:
            fh.write(metrics_to_tsv(snapshots))
        with open(os.path.join(cfg.out_dir, "metrics.json"), "w", encoding="utf-8") as fh:
            doc = {"version": 1, "rows": [s.to_dict() for s in snapshots]}
            fh.write(json.dumps(doc, indent=2) + "\n")
        with open(os.path.join(cfg.out_dir, "config.json"), "w", encoding="utf-8") as fh:
            fh.write(cfg.to_json())

    return TrainResult(
        config=cfg, snapshots=snapshots, engine=engine, group=group,
        checkpoint_dir=checkpoint_dir,
    )


# ---------------------------------------------------------------------------
# communication benchmark

_COMPONENT_GRAPH_KIND = {"lr": "lr", "fm": "fm", "dnn": "wdl"}
_COMPONENT_OPS = {
    "lr": ("linear.partial",),
    "fm": ("fm2.m1", "fm2.m2"),
    "dnn": ("tower.first_fc",),
}


def bench_comm(n_workers=4, dim=8, first_fc_width=16, rows=None, n_fields=10, seed=0):
    """Predicted vs measured bytes for each component and batch size.

    Each cell runs one real engine iteration and reads the component's
    aggregation ops out of the forward ledger. Aggregated payloads depend
    only on batch size and widths, so the unique-feature count of the
    reference workload enters the predictions, not the run.
    """
    if rows is None:
        rows = sorted(REFERENCE_UNIQ_FEATS.items())
    reports = []
    for kind in COMPONENT_KINDS:
        for batch_size, uniq in rows:
            c = CostInputs(
                n_workers=n_workers, batch_size=batch_size, uniq_feats=uniq,
                dim=dim, first_fc_width=first_fc_width, n_fields=n_fields,
            )
            graph = ModelGraph(
                kind=_COMPONENT_GRAPH_KIND[kind], n_fields=n_fields,
                embedding_dim=dim, first_fc_width=first_fc_width, seed=seed,
            )
            group = WorkerGroup(n_workers)
            engine = SubstitutedModel(graph, group)
            spec = SyntheticSpec(
                n_fields=n_fields, vocab_per_field=100,
                min_active_fields=n_fields, max_active_fields=n_fields,
            )
            batch = next(gen_synthetic(spec, batch_size, batch_size, seed))
            engine.train_step(batch)

            per_rank = [
                group.ledger.per_rank_bytes(n_workers, phase=PHASE_FORWARD, op=op)
                for op in _COMPONENT_OPS[kind]
            ]
            totals = [sum(col) for col in zip(*per_rank)]
            if len(set(totals)) != 1:
                raise MetricError(f"per-rank forward bytes are not uniform: {totals}")
            measured = totals[0]
            predicted = q_des(kind, c)
            reports.append(
                CommReportRow(
                    model=kind,
                    batch_size=batch_size,
                    n_workers=n_workers,
                    uniq_feats=uniq,
                    q_mesh=q_mesh(kind, c),
                    q_des=predicted,
                    ratio=saving_ratio(kind, c),
                    measured_bytes=measured,
                    deviation=(measured - predicted) / predicted if predicted else 0.0,
                )
            )
    return reports
