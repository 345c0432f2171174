"""The federated round engine.

Each round: sample participants, broadcast the global model, run local SGD
on every participant's shard, average the returned trainable factors and
biases (ascending client id, so results are independent of scheduling),
fold updates into the frozen bases at reset boundaries, evaluate, and emit
a report.  Every random choice is keyed off the experiment seed through
per-purpose derived streams, so a run is a pure function of its config.
"""

from __future__ import annotations

import copy
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import decomp, metrics
from .data import Dataset, Partition
from .model import LayerSpec, Model, build_model
from .rng import (
    Rng,
    derive_seed,
    STREAM_CLIENT,
    STREAM_MERGE,
    STREAM_SAMPLING,
)

log = logging.getLogger(__name__)

METHODS = (
    "fedavg",
    "fedlmt",
    "fedmud",
    "fedmud_bkd",
    "fedmud_aad",
    "fedmud_bkd_aad",
    "fedmud_f",
)

_MIDDLE_SCHEME = {
    "fedlmt": "lowrank",
    "fedmud": "lowrank",
    "fedmud_bkd": "bkd",
    "fedmud_aad": "lowrank_aad",
    "fedmud_bkd_aad": "bkd_aad",
    "fedmud_f": "frozen_lowrank",
}


@dataclass
class FedConfig:
    rounds: int = 100
    clients: int = 100
    participants: int = 10
    local_epochs: int = 3
    batch_size: int = 64
    lr: float = 0.1
    reset_interval: int = 1
    method: str = "fedmud"
    ratio: float = 1.0 / 32.0
    init_bound: float = 0.3
    seed: int = 0
    weighting: str = "uniform"
    zero_compressed_base: bool = False
    random_v_init: bool = False
    bytes_per_param: int = 8
    parallel_clients: int = 1

    def validate(self) -> None:
        problems = []
        if self.rounds < 1:
            problems.append("rounds must be >= 1")
        if not 1 <= self.participants <= self.clients:
            problems.append("need 1 <= participants <= clients")
        if self.local_epochs < 1:
            problems.append("local_epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.lr < 0:
            problems.append("lr must be >= 0")
        if self.reset_interval < 1:
            problems.append("reset_interval must be >= 1")
        if self.method not in METHODS:
            problems.append(f"unknown method {self.method!r}")
        if not 0 < self.ratio <= 1:
            problems.append("ratio must be in (0, 1]")
        if self.init_bound < 0:
            problems.append("init_bound must be >= 0")
        if self.weighting not in ("uniform", "by_samples"):
            problems.append(f"unknown weighting {self.weighting!r}")
        if self.bytes_per_param not in (4, 8):
            problems.append("bytes_per_param must be 4 or 8")
        if self.parallel_clients < 1:
            problems.append("parallel_clients must be >= 1")
        if problems:
            raise ValueError("invalid federation config: " + "; ".join(problems))


@dataclass
class RoundReport:
    round: int
    train_loss: float
    test_loss: float
    test_acc: float
    uplink_bytes: int
    downlink_bytes: int
    merged: bool
    u_norm_max: float
    v_norm_max: float
    sigma_min_min: float
    catchup_downlink_bytes: int = 0
    participants: tuple[int, ...] = ()


@dataclass
class CommCost:
    """Per-client, per-direction byte costs for one round."""

    weight_bytes: int
    bias_bytes: int
    seed_bytes: int = 8  # extra downlink on reset rounds: the fresh init seed

    @property
    def uplink(self) -> int:
        return self.weight_bytes + self.bias_bytes

    def downlink(self, merged: bool) -> int:
        return self.weight_bytes + self.bias_bytes + (self.seed_bytes if merged else 0)


def layer_specs_for_method(
    method: str,
    dims: list[int],
    ratio: float,
    init_bound: float,
) -> list[LayerSpec]:
    """Per-layer schemes for a method preset over an MLP with the given
    dimension chain.  The first and last layers always stay dense; the
    compressed methods therefore need at least three layers."""
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    n_layers = len(dims) - 1
    if n_layers < 1:
        raise ValueError("need at least one layer")
    specs = []
    for i in range(n_layers):
        last = i == n_layers - 1
        if method == "fedavg" or i == 0 or last:
            scheme = "dense_update"
        else:
            scheme = _MIDDLE_SCHEME[method]
        specs.append(
            LayerSpec(
                in_dim=dims[i],
                out_dim=dims[i + 1],
                activation="none" if last else "relu",
                scheme=scheme,
                ratio=ratio,
                init_bound=init_bound,
            )
        )
    if method != "fedavg" and all(s.scheme == "dense_update" for s in specs):
        raise ValueError(
            f"method {method!r} compresses middle layers only; this model has none"
        )
    return specs


def account_communication(cfg: FedConfig, model: Model) -> CommCost:
    """Recurring per-round traffic.  Only trainable factors and dense biases
    travel; fixed factors move as one seed and frozen bases are already
    held by the clients."""
    bpp = cfg.bytes_per_param
    return CommCost(
        weight_bytes=model.trainable_weight_params() * bpp,
        bias_bytes=model.bias_params() * bpp,
    )


# ---------------------------------------------------------------------------
# client side
# ---------------------------------------------------------------------------


@dataclass
class ClientResult:
    updates: list[decomp.UpdateParam | None]
    biases: list[np.ndarray]
    train_loss: float
    n_samples: int


def client_update(
    global_model: Model,
    features: np.ndarray,
    labels: np.ndarray,
    cfg: FedConfig,
    rng: Rng,
) -> ClientResult:
    """Local training on one client's shard.

    Trains a private copy for ``local_epochs`` passes of seeded minibatch
    SGD and returns the trained trainables; the copy's base weights are
    returned untouched (they are frozen during local training).
    """
    if len(features) == 0:
        raise ValueError("client shard is empty")
    local = copy.deepcopy(global_model)
    losses = []
    for _ in range(cfg.local_epochs):
        order = rng.permutation(len(features))
        for start in range(0, len(order), cfg.batch_size):
            sel = order[start : start + cfg.batch_size]
            loss, grads = local.loss_and_backward(features[sel], labels[sel])
            local.sgd_step(grads, cfg.lr)
            losses.append(loss)
    return ClientResult(
        updates=[layer.update for layer in local.layers],
        biases=[layer.bias for layer in local.layers],
        train_loss=float(np.mean(losses)),
        n_samples=len(features),
    )


def _aggregate_into(model: Model, results: list[ClientResult], weighting: str) -> None:
    """Average client results into the global model, in presentation order
    (callers pass results sorted by client id)."""
    weights = None
    if weighting == "by_samples":
        weights = [float(r.n_samples) for r in results]
    for i, layer in enumerate(model.layers):
        if layer.update is not None:
            layer.update = decomp.aggregate(
                [r.updates[i] for r in results], weights=weights
            )
        stack = np.stack([r.biases[i] for r in results])
        if weights is None:
            layer.bias = np.add.reduce(stack, axis=0) / len(results)
        else:
            acc = np.zeros_like(stack[0])
            for w, b in zip(weights, stack):
                acc += w * b
            layer.bias = acc / float(sum(weights))


def _check_broadcast_consistency(server: Model, clients: list[Model]) -> None:
    """Seed-sharing invariant: every client's regenerated fixed factors (and
    zero-start trainables right after a reset) must match the server's."""
    reference = [
        decomp.fixed_checksum(l.update) for l in server.layers if l.update is not None
    ]
    for cm in clients:
        got = [decomp.fixed_checksum(l.update) for l in cm.layers if l.update is not None]
        if got != reference:
            raise decomp.ProtocolError("broadcast copies disagree on fixed factors")


def run(
    cfg: FedConfig,
    layer_specs: list[LayerSpec],
    train: Dataset,
    partition: Partition,
    test: Dataset,
    round_hook=None,
    merge_hook=None,
    sigma_diag: bool = False,
) -> list[RoundReport]:
    """Execute the full federated run and return one report per round.

    ``round_hook(t, model, report)`` fires after each round;
    ``merge_hook(t, phase, model)`` fires with phase "before"/"after"
    around every reset boundary.
    """
    cfg.validate()
    if partition.num_clients != cfg.clients:
        raise ValueError(
            f"partition has {partition.num_clients} clients, config says {cfg.clients}"
        )
    model = build_model(
        layer_specs,
        cfg.seed,
        zero_compressed_base=cfg.zero_compressed_base,
        random_v=cfg.random_v_init,
    )
    shards = [
        (train.features[idx], train.labels[idx]) for idx in partition.client_indices
    ]
    cost = account_communication(cfg, model)
    reports = []
    for t in range(1, cfg.rounds + 1):
        sampler = Rng(derive_seed(cfg.seed, STREAM_SAMPLING, t))
        chosen = sorted(
            sampler.sample_without_replacement(cfg.clients, cfg.participants).tolist()
        )

        copies = {cid: copy.deepcopy(model) for cid in chosen}
        _check_broadcast_consistency(model, list(copies.values()))

        def train_one(cid: int) -> ClientResult:
            x, y = shards[cid]
            return client_update(
                copies[cid], x, y, cfg, Rng(derive_seed(cfg.seed, STREAM_CLIENT, t, cid))
            )

        if cfg.parallel_clients > 1:
            with ThreadPoolExecutor(max_workers=cfg.parallel_clients) as pool:
                trained = list(pool.map(train_one, chosen))
            results = dict(zip(chosen, trained))
        else:
            results = {cid: train_one(cid) for cid in chosen}

        _aggregate_into(model, [results[cid] for cid in chosen], cfg.weighting)
        u_max, v_max, s_min = metrics.factor_diagnostics(model, with_sigma=sigma_diag)

        merged = t % cfg.reset_interval == 0
        if merged:
            if merge_hook is not None:
                merge_hook(t, "before", model)
            model.merge_updates(derive_seed(cfg.seed, STREAM_MERGE, t))
            if merge_hook is not None:
                merge_hook(t, "after", model)

        test_loss, test_acc = metrics.evaluate(model, test.features, test.labels)
        report = RoundReport(
            round=t,
            train_loss=float(np.mean([results[cid].train_loss for cid in chosen])),
            test_loss=test_loss,
            test_acc=test_acc,
            uplink_bytes=cost.uplink,
            downlink_bytes=cost.downlink(merged),
            merged=merged,
            u_norm_max=u_max,
            v_norm_max=v_max,
            sigma_min_min=s_min,
            catchup_downlink_bytes=(cfg.clients - cfg.participants)
            * cost.downlink(merged),
            participants=tuple(chosen),
        )
        reports.append(report)
        if round_hook is not None:
            round_hook(t, model, report)
        log.debug(
            "round %d: train %.4f test %.4f acc %.4f%s",
            t,
            report.train_loss,
            report.test_loss,
            report.test_acc,
            " [merged]" if merged else "",
        )
    return reports
