"""Round orchestration: sample clients, train locally, aggregate.

One communication round distributes the global parameters to a sampled
subset of clients, runs E local epochs of mini-batch SGD per client under
the configured strategy, and averages the returned parameters weighted by
client sample counts (weights renormalized over the participants).

Every random draw comes from a named stream keyed by (master seed, role,
round, client), so runs are bit-reproducible, clients can train in any
order or in parallel without changing results, and switching strategy
never shifts the draws of unrelated components.
"""

from __future__ import annotations

import json
import math
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__, anchor, nn
from .config import ExperimentConfig, StrategyConfig
from .data import (ClientShard, LabeledDataset, PartitionSpec, apply_reduction_schedule,
                   dirichlet_partition, load_assignments, load_idx, synth_blobs)
from .metrics import (MetricsWriter, RoundRecord, classwise_accuracy, global_accuracy,
                      measure_local_forgetting, write_summary)
from .rng import as_generator, stream


class RunError(RuntimeError):
    """A round failed; the message names the round and client."""


@dataclass(frozen=True)
class RoundPlan:
    round_index: int
    participants: tuple[int, ...]
    epochs: int
    batch_size: int
    lr: float
    momentum: float
    weight_decay: float
    master_seed: int
    keep_epoch_states: bool = False

    def __post_init__(self):
        if not self.participants:
            raise ValueError("a round needs at least one participant")


@dataclass
class ClientUpdate:
    client_id: int
    state: nn.ModelState
    sample_count: int
    loss_trace: tuple[float, ...]
    anchor_log: tuple[tuple, ...] = ()       # (class, source, sample_id) rows
    epoch_states: tuple[nn.ModelState, ...] = ()

    def __post_init__(self):
        if self.sample_count <= 0:
            raise ValueError("client updates need a positive sample count")


def sample_participants(client_ids, ratio: float, rng) -> tuple[int, ...]:
    """ceil(ratio * N) distinct clients, uniform without replacement."""
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"participation ratio must lie in (0, 1], got {ratio}")
    ids = sorted(client_ids)
    count = min(len(ids), max(1, math.ceil(ratio * len(ids))))
    rng = as_generator(rng)
    picked = rng.choice(len(ids), size=count, replace=False)
    return tuple(sorted(ids[i] for i in picked))


def local_train(
    shard: ClientShard,
    global_state: nn.ModelState,
    plan: RoundPlan,
    strategy: StrategyConfig,
    spec: nn.NetworkSpec,
    dataset: LabeledDataset,
    shared: anchor.SharedDataset | None = None,
) -> ClientUpdate:
    """Train a fresh copy of the global model on one client's shard.

    The copy starts with zeroed momentum. Proximal and anchor terms are
    evaluated only when their weights are nonzero, so a zero-weight run is
    bit-identical to plain averaging; the anchor itself is still built (it
    has its own stream, and the audit trail stays meaningful).
    """
    if strategy.kind not in ("fedavg", "fedprox", "fedka"):
        raise ValueError(f"unknown strategy {strategy.kind!r}")
    if strategy.kind == "fedka" and shared is None:
        raise ValueError("fedka training needs the shared one-per-class dataset")
    state = global_state.fresh_local()

    built = None
    teacher_logits = None
    anchor_log: tuple[tuple, ...] = ()
    if strategy.kind == "fedka":
        arng = stream(plan.master_seed, "anchor", plan.round_index, shard.client_id)
        chooser = anchor.select_anchor_strategy(
            shard, strategy.selection, dataset, global_state, spec)
        built = anchor.build_anchor(
            shard, shared, dataset, plan.round_index, arng,
            variant=strategy.variant, chooser=chooser)
        built = anchor.downsample_anchor(built, strategy.mu_anchor, arng)
        anchor_log = tuple((e.label, e.source, e.sample_id) for e in built.entries)
        use_anchor = strategy.beta > 0.0 and len(built) > 0
        if use_anchor and strategy.cache_teacher_logits:
            teacher_logits = nn.forward_logits(global_state, spec, built.inputs())
    else:
        use_anchor = False

    inputs, labels = dataset.take(shard.indices)
    n = len(shard)
    brng = stream(plan.master_seed, "batch", plan.round_index, shard.client_id)
    trace = []
    epoch_states = []
    for _ in range(plan.epochs):
        order = brng.permutation(n)
        step_losses = []
        for start in range(0, n, plan.batch_size):
            sel = order[start:start + plan.batch_size]
            loss, grad = nn.ce_loss_and_grad(state, spec, nn.Batch(inputs[sel], labels[sel]))
            if strategy.kind == "fedprox" and strategy.mu > 0.0:
                diff = state.params - global_state.params
                loss += 0.5 * strategy.mu * float(diff @ diff)
                grad = grad + strategy.mu * diff
            if use_anchor:
                ka_loss, ka_grad = anchor.ka_loss_and_grad(
                    built, global_state, state, spec, teacher_logits)
                loss += strategy.beta * ka_loss
                grad = grad + strategy.beta * ka_grad
            state = nn.sgd_step(state, grad, plan.lr, plan.momentum, plan.weight_decay)
            step_losses.append(loss)
        trace.append(float(np.mean(step_losses)))
        if plan.keep_epoch_states:
            epoch_states.append(state.copy())
    return ClientUpdate(shard.client_id, state, n, tuple(trace), anchor_log,
                        tuple(epoch_states))


def aggregate(updates: list[ClientUpdate]) -> nn.ModelState:
    """Sample-count-weighted mean of participant parameters.

    Output momentum is zero: the server holds parameters, not optimizer
    state. Weights must form a convex combination to 1e-12.
    """
    if not updates:
        raise ValueError("nothing to aggregate")
    spec_hash = updates[0].state.spec_hash
    if any(u.state.spec_hash != spec_hash for u in updates):
        raise nn.ShapeError("cannot aggregate states built for different specs")
    total = sum(u.sample_count for u in updates)
    if total <= 0:
        raise ValueError("total sample count is zero")
    weights = [u.sample_count / total for u in updates]
    drift = abs(sum(weights) - 1.0)
    if drift > 1e-12:
        raise ArithmeticError(f"aggregation weights sum off by {drift:.3e}")
    params = np.zeros_like(updates[0].state.params)
    for w, u in zip(weights, updates):
        params += w * u.state.params
    return nn.ModelState(params, np.zeros_like(params), spec_hash)


# ---------------------------------------------------------------------------
# Experiment runner
# ---------------------------------------------------------------------------


def build_datasets(cfg: ExperimentConfig) -> tuple[LabeledDataset, LabeledDataset]:
    d = cfg.dataset
    if d.kind == "synth":
        train = synth_blobs(d.classes, d.per_class, d.dims, d.separation, d.seed)
        test = synth_blobs(d.classes, d.test_per_class, d.dims, d.separation, d.test_seed)
        return train, test
    train = load_idx(d.train_images, d.train_labels, d.classes or None)
    test = load_idx(d.test_images, d.test_labels, train.class_count)
    return train, test


def build_model_spec(cfg: ExperimentConfig, sample_shape: tuple[int, ...], class_count: int) -> nn.NetworkSpec:
    m = cfg.model
    if m.preset == "t_cnn":
        if len(sample_shape) != 3:
            raise ValueError(f"t_cnn wants (C, H, W) samples, dataset has {sample_shape}")
        return nn.tcnn_spec(sample_shape, class_count, m.conv_kernel)
    if len(sample_shape) == 1:
        return nn.mlp_spec(sample_shape[0], m.hidden, class_count)
    layers: list = [nn.Flatten()]
    prev = int(np.prod(sample_shape))
    for width in m.hidden:
        layers += [nn.Dense(prev, width), nn.Relu()]
        prev = width
    layers.append(nn.Dense(prev, class_count))
    return nn.NetworkSpec(tuple(layers), sample_shape, class_count)


def build_shards(cfg: ExperimentConfig, train: LabeledDataset) -> list[ClientShard]:
    p = cfg.partition
    if p.file:
        return load_assignments(p.file, train, p.gamma)
    spec = PartitionSpec(p.clients, p.alpha, p.seed, p.min_samples_per_client)
    return dirichlet_partition(train, spec, gamma=p.gamma)


def _schedules_by_client(cfg: ExperimentConfig) -> dict[int, list[tuple[int, int, int]]]:
    out: dict[int, list[tuple[int, int, int]]] = {}
    for client, rnd, klass, keep in cfg.reduction:
        out.setdefault(client, []).append((rnd, klass, keep))
    return out


def run_experiment(cfg: ExperimentConfig, progress=None, force: bool = False) -> Path:
    """Execute the configured experiment; returns the artifact directory.

    Refuses to overwrite a directory holding a finished run (manifest
    present) unless forced. On error, metrics written so far stay on disk.
    """
    out = Path(cfg.output_dir)
    if (out / "manifest.json").exists() and not force:
        raise RunError(f"{out} already holds a finished run (use force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()

    train, test = build_datasets(cfg)
    spec = build_model_spec(cfg, train.inputs.shape[1:], train.class_count)
    base_shards = build_shards(cfg, train)
    schedules = _schedules_by_client(cfg)
    for client in schedules:
        if client not in {s.client_id for s in base_shards}:
            raise RunError(f"reduction schedule names unknown client {client}")

    global_state = nn.init_state(spec, stream(cfg.master_seed, "init"))
    shared = None
    if cfg.strategy.kind == "fedka":
        shared = anchor.build_shared_dataset(train, cfg.master_seed)

    (out / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    spec.save(out / "model.json")
    checkpoints = out / "checkpoints"
    checkpoints.mkdir(exist_ok=True)

    t = cfg.training
    rounds_curve: list[tuple[int, float]] = []
    final_record: RoundRecord | None = None
    anchors_fh = None
    epoch_fh = None
    try:
        writer = MetricsWriter(out / "metrics", train.class_count)
    except OSError as exc:
        raise RunError(f"cannot open metric files: {exc}") from None
    try:
        if cfg.strategy.kind == "fedka":
            anchors_fh = open(out / "anchors.csv", "w", newline="")
            anchors_fh.write("round,client,class,source,sample_id,strategy\n")
        if cfg.metrics.epoch_forgetting:
            epoch_fh = open(out / "metrics" / "forgetting_epochs.csv", "w", newline="")
            epoch_fh.write("round,epoch,client,class,role,acc_global,acc_local,tau\n")

        teacher_acc = classwise_accuracy(global_state, spec, test)
        all_ids = [s.client_id for s in base_shards]
        for r in range(1, t.rounds + 1):
            shards = {}
            for s in base_shards:
                sched = schedules.get(s.client_id)
                shards[s.client_id] = (
                    apply_reduction_schedule(s, sched, train, upto_round=r) if sched else s
                )
            participants = sample_participants(
                all_ids, t.participation_ratio, stream(cfg.master_seed, "participants", r))
            plan = RoundPlan(
                round_index=r, participants=participants, epochs=t.local_epochs,
                batch_size=t.batch_size, lr=t.lr, momentum=t.momentum,
                weight_decay=t.weight_decay, master_seed=cfg.master_seed,
                keep_epoch_states=cfg.metrics.epoch_forgetting,
            )

            def train_one(cid: int) -> ClientUpdate:
                try:
                    return local_train(shards[cid], global_state, plan,
                                       cfg.strategy, spec, train, shared)
                except Exception as exc:
                    raise RunError(f"round {r}, client {cid}: {exc}") from exc

            if t.parallel_clients > 1 and len(participants) > 1:
                with ThreadPoolExecutor(max_workers=t.parallel_clients) as pool:
                    results = list(pool.map(train_one, participants))
            else:
                results = [train_one(cid) for cid in participants]
            updates = sorted(results, key=lambda u: u.client_id)

            global_state = aggregate(updates)
            post_acc = classwise_accuracy(global_state, spec, test)
            acc = global_accuracy(post_acc, test)
            rounds_curve.append((r, acc))

            for u in updates:
                records = measure_local_forgetting(
                    shards[u.client_id], teacher_acc, u.state, spec, test, r, cfg.metrics.xi)
                writer.write_forgetting(records)
                if anchors_fh is not None:
                    for klass, source, sample_id in u.anchor_log:
                        anchors_fh.write(f"{r},{u.client_id},{klass},{source},{sample_id},"
                                         f"{cfg.strategy.selection}\n")
                if epoch_fh is not None:
                    for e, st in enumerate(u.epoch_states, start=1):
                        for rec in measure_local_forgetting(
                                shards[u.client_id], teacher_acc, st, spec, test, r, cfg.metrics.xi):
                            epoch_fh.write(",".join([
                                str(r), str(e), str(rec.client), str(rec.klass), rec.role,
                                f"{rec.acc_global:.10g}", f"{rec.acc_local:.10g}", f"{rec.tau:.10g}",
                            ]) + "\n")

            record = RoundRecord(
                round=r, global_acc=acc, class_acc=tuple(post_acc),
                participants=participants,
                client_losses={u.client_id: float(np.mean(u.loss_trace)) for u in updates
                               if u.loss_trace},
            )
            if r % cfg.metrics.eval_interval == 0 or r == t.rounds:
                writer.write_round(record, [(cid, len(shards[cid])) for cid in all_ids])
                final_record = record
            if cfg.metrics.checkpoint_interval and r % cfg.metrics.checkpoint_interval == 0:
                nn.save_state(global_state, checkpoints / f"round_{r:05d}.bin")
            teacher_acc = post_acc
            if progress is not None:
                progress(r, t.rounds, acc)
    finally:
        writer.close()
        for fh in (anchors_fh, epoch_fh):
            if fh is not None:
                fh.close()

    nn.save_state(global_state, checkpoints / "final.bin")
    written_curve = [(r, a) for r, a in rounds_curve
                     if r % cfg.metrics.eval_interval == 0 or r == t.rounds]
    write_summary(out / "summary.json", final_record, written_curve,
                  targets=[round(0.1 * k, 1) for k in range(1, 10)])
    manifest = {
        "config": cfg.to_dict(),
        "versions": {
            "package": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "dataset_hash": train.content_hash(),
        "test_hash": test.content_hash(),
        "model_spec_hash": spec.spec_hash,
        "completed_rounds": t.rounds,
        "wall_time_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out
