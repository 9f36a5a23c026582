"""Simulated federated training: Local, Centralized, FedAvg, iFedAvg and APFL.

Every client owns a random stream keyed by ``(seed, client, round)``, so the
order in which clients are visited inside a round does not matter. The
server only ever sees :class:`ClientUpdate` objects, which carry the shared
block and nothing else.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import ClientDataset, DataError, class_weights, client_key, ordered_labels, with_split
from .metrics import ClientScore, score_predictions
from .nn import (
    INIT_SCHEMES,
    OptimizerState,
    PersonalParams,
    SharedParams,
    backward,
    forward,
    iter_batches,
    lr_schedule,
    softmax,
    sgd_step,
    trainable_arrays,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("local", "central", "fedavg", "ifedavg", "apfl")
FOUT_MODES = ("none", "bias", "weight", "both", "scalar-weight")
DEFAULT_SEEDS = (2934384, 10231938, 8273, 2019231, 62739)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    algorithm: str = "ifedavg"
    rounds: int = 1000
    lr: float = 0.002
    momentum: float = 0.5
    alpha: float = 0.5
    batch_size: int = 32  # 0 means full batch
    seeds: Tuple[int, ...] = DEFAULT_SEEDS
    fout: str = "none"
    fin: bool = True
    standardize: str = "per-client"
    shift_spec: Optional[str] = None
    reset_momentum: bool = False
    eval_every: int = 0
    dataset: str = "dataset"
    init: str = "uniform"

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {', '.join(ALGORITHMS)}")
        if self.fout not in FOUT_MODES:
            raise ConfigError(f"unknown f_out mode {self.fout!r}; choose from {', '.join(FOUT_MODES)}")
        if self.init not in INIT_SCHEMES:
            raise ConfigError(f"unknown init scheme {self.init!r}; choose from {', '.join(INIT_SCHEMES)}")
        if self.standardize not in ("per-client", "global"):
            raise ConfigError(f"unknown standardization mode {self.standardize!r}")
        if self.rounds < 0:
            raise ConfigError("rounds must be >= 0")
        if not self.lr > 0:
            raise ConfigError("lr must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError("alpha must lie in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 0:
            raise ConfigError("batch size must be >= 0")
        if not self.seeds:
            raise ConfigError("at least one seed is required")

    @property
    def effective_momentum(self) -> float:
        # APFL runs without momentum
        return 0.0 if self.algorithm == "apfl" else self.momentum

    def as_dict(self) -> Dict[str, object]:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["seeds"] = list(self.seeds)
        return out


@dataclass(frozen=True)
class ClientUpdate:
    """What a client discloses after its local epoch: the shared block only."""

    client: str
    n_samples: int
    shared: SharedParams


@dataclass
class ClientState:
    data: ClientDataset
    shared: SharedParams
    personal: PersonalParams
    opt: OptimizerState
    weights: np.ndarray
    local: Optional[SharedParams] = None  # APFL private model
    local_opt: Optional[OptimizerState] = None

    @property
    def label(self) -> str:
        return self.data.client

    @property
    def key(self) -> int:
        return client_key(self.data.client)


@dataclass
class FederationState:
    config: ExperimentConfig
    seed: int
    shared: SharedParams
    clients: List[ClientState]
    datasets: List[ClientDataset]  # per-client data with splits, for evaluation
    round: int = 0


def make_personal(cfg: ExperimentConfig, n_features: int, n_classes: int) -> PersonalParams:
    personalized = cfg.algorithm == "ifedavg"
    fout = cfg.fout if personalized else "none"
    return PersonalParams.identity(
        n_features,
        n_classes,
        scalar_w_out=fout == "scalar-weight",
        train_b_in=personalized and cfg.fin,
        train_w_in=personalized and cfg.fin,
        train_b_out=fout in ("bias", "both", "scalar-weight"),
        train_w_out=fout in ("weight", "both", "scalar-weight"),
    )


def round_rng(seed: int, key: int, t: int, stream: int = 2) -> np.random.Generator:
    return np.random.default_rng([seed, stream, key, t])


def local_epoch(state: ClientState, shared: SharedParams, lr: float, rng: np.random.Generator,
                batch_size: Optional[int]) -> ClientUpdate:
    """One pass over the client's training rows, updating shared and personal layers jointly."""
    X, y = state.data.X_train, state.data.y_train
    if len(y) == 0:
        raise DataError(f"client {state.label!r} has no training rows")
    model = shared.copy()
    state.opt.lr = lr
    params = trainable_arrays(model, state.personal)
    for idx in iter_batches(len(y), batch_size, rng):
        _, cache = forward(model, state.personal, X[idx], True, rng)
        grads = backward(model, state.personal, cache, y[idx], state.weights)
        sgd_step(params, grads, state.opt)
    state.shared = model
    return ClientUpdate(state.label, len(y), model.copy())


def blend(local: SharedParams, glob: SharedParams, alpha: float) -> SharedParams:
    lv, gv = local.arrays(), glob.arrays()
    return SharedParams(**{k: alpha * lv[k] + (1.0 - alpha) * gv[k] for k in lv})


def apfl_step(state: ClientState, shared: SharedParams, alpha: float, lr: float,
              rng: np.random.Generator, rng_local: np.random.Generator,
              batch_size: Optional[int]) -> ClientUpdate:
    """APFL local epoch with fixed mixing weight.

    Per batch the global copy ``w`` steps on the local loss and the private
    model ``v`` steps on the loss of ``alpha*v + (1-alpha)*w``; both gradients
    are taken at the pre-step parameters. The private model's dropout masks
    come from ``rng_local`` so that ``w`` follows the same trajectory FedAvg
    would on ``rng``.
    """
    X, y = state.data.X_train, state.data.y_train
    if len(y) == 0:
        raise DataError(f"client {state.label!r} has no training rows")
    w = shared.copy()
    v = state.local
    state.opt.lr = lr
    state.local_opt.lr = lr
    w_params, v_params = w.arrays(), v.arrays()
    for idx in iter_batches(len(y), batch_size, rng):
        _, cache = forward(w, None, X[idx], True, rng)
        gw = backward(w, None, cache, y[idx], state.weights)
        mixed = blend(v, w, alpha)
        _, cache = forward(mixed, None, X[idx], True, rng_local)
        gv = {k: alpha * g for k, g in backward(mixed, None, cache, y[idx], state.weights).items()}
        sgd_step(w_params, gw, state.opt)
        sgd_step(v_params, gv, state.local_opt)
    state.shared = w
    return ClientUpdate(state.label, len(y), w.copy())


def aggregate_uniform(updates: Sequence[ClientUpdate]) -> SharedParams:
    """Unweighted parameter-wise mean; sample counts are ignored."""
    if not updates:
        raise ValueError("nothing to aggregate")
    # fixed summation order, so the result does not depend on client scheduling
    rank = {c: i for i, c in enumerate(ordered_labels([u.client for u in updates]))}
    updates = sorted(updates, key=lambda u: rank[u.client])
    first = updates[0].shared.arrays()
    out = {}
    for name, ref in first.items():
        stack = []
        for u in updates:
            arr = u.shared.arrays()[name]
            if arr.shape != ref.shape:
                raise ValueError(f"{name}: update from {u.client!r} has shape {arr.shape}, expected {ref.shape}")
            stack.append(arr)
        out[name] = np.mean(stack, axis=0) if len(stack) > 1 else stack[0].copy()
    return SharedParams(**out)


def _client_state(cfg: ExperimentConfig, ds: ClientDataset, shared: SharedParams) -> ClientState:
    try:
        weights = class_weights(ds.y_train, ds.n_classes)
    except DataError as exc:
        raise DataError(f"client {ds.client!r}: {exc}") from None
    state = ClientState(
        data=ds,
        shared=shared.copy(),
        personal=make_personal(cfg, ds.X.shape[1], ds.n_classes),
        opt=OptimizerState(cfg.lr, cfg.effective_momentum),
        weights=weights,
    )
    if cfg.algorithm == "apfl":
        state.local = shared.copy()
        state.local_opt = OptimizerState(cfg.lr, 0.0)
    return state


def pooled_dataset(datasets: Sequence[ClientDataset]) -> ClientDataset:
    """Concatenated training rows of all clients, as one pseudo-client."""
    X = np.vstack([d.X_train for d in datasets])
    y = np.concatenate([d.y_train for d in datasets])
    first = datasets[0]
    return ClientDataset(
        "+".join(d.client for d in datasets), X, y, list(first.features), list(first.kinds),
        first.n_classes, train_idx=np.arange(len(y)), test_idx=np.arange(0),
    )


def init_federation(cfg: ExperimentConfig, datasets: Sequence[ClientDataset], seed: int) -> FederationState:
    cfg.validate()
    if not datasets:
        raise ConfigError("at least one client dataset is required")
    dims = {(d.X.shape[1], d.n_classes) for d in datasets}
    if len(dims) != 1:
        raise DataError(f"clients disagree on (features, classes): {sorted(dims)}")
    split = [d if d.train_idx is not None else with_split(d, seed) for d in datasets]
    D, K = dims.pop()
    shared = SharedParams.init(D, K, np.random.default_rng([seed, 1]), cfg.init)
    members = [pooled_dataset(split)] if cfg.algorithm == "central" else split
    clients = [_client_state(cfg, ds, shared) for ds in members]
    return FederationState(cfg, seed, shared, clients, split)


def run_round(state: FederationState) -> FederationState:
    cfg = state.config
    lr = lr_schedule(state.round, cfg.lr, max(cfg.rounds, 1))
    batch = cfg.batch_size or None
    updates = []
    for c in state.clients:
        if cfg.reset_momentum:
            c.opt.reset()
        rng = round_rng(state.seed, c.key, state.round)
        start = c.shared if cfg.algorithm == "local" else state.shared
        if cfg.algorithm == "apfl":
            rng_local = round_rng(state.seed, c.key, state.round, stream=3)
            updates.append(apfl_step(c, start, cfg.alpha, lr, rng, rng_local, batch))
        else:
            updates.append(local_epoch(c, start, lr, rng, batch))
    if cfg.algorithm == "central":
        state.shared = updates[0].shared
    elif cfg.algorithm != "local":
        state.shared = aggregate_uniform(updates)
        for c in state.clients:
            c.shared = state.shared.copy()
    state.round += 1
    return state


def client_predictor(state: FederationState, i: int) -> Tuple[SharedParams, Optional[PersonalParams]]:
    """Model used to score client ``i`` on its hold-out rows."""
    algo = state.config.algorithm
    if algo == "central":
        return state.shared, None
    c = state.clients[i]
    if algo == "local":
        return c.shared, None
    if algo == "apfl":
        return blend(c.local, state.shared, state.config.alpha), None
    if algo == "ifedavg":
        return state.shared, c.personal
    return state.shared, None


def evaluate(state: FederationState) -> List[ClientScore]:
    cfg = state.config
    scores = []
    for i, ds in enumerate(state.datasets):
        shared, personal = client_predictor(state, i)
        logits, _ = forward(shared, personal, ds.X_test)
        scores.append(score_predictions(ds.y_test, softmax(logits), ds.n_classes,
                                        dataset=cfg.dataset, algorithm=cfg.algorithm,
                                        seed=state.seed, client=ds.client))
    return scores


@dataclass
class SeedRun:
    seed: int
    shared: SharedParams
    personal: Dict[str, PersonalParams]
    scores: List[ClientScore]
    trace: List[Tuple[int, List[ClientScore]]] = field(default_factory=list)
    apfl_local: Dict[str, SharedParams] = field(default_factory=dict)
    client_models: Dict[str, SharedParams] = field(default_factory=dict)


@dataclass
class RunArtifacts:
    config: ExperimentConfig
    runs: List[SeedRun]

    @property
    def scores(self) -> List[ClientScore]:
        return [s for r in self.runs for s in r.scores]


def train(state: FederationState) -> SeedRun:
    """Run all configured rounds on an initialized federation."""
    cfg = state.config
    trace = []
    while state.round < cfg.rounds:
        run_round(state)
        if cfg.eval_every and state.round % cfg.eval_every == 0 and state.round < cfg.rounds:
            trace.append((state.round, evaluate(state)))
        log.debug("seed %d round %d done", state.seed, state.round)
    run = SeedRun(state.seed, state.shared.copy(), {}, evaluate(state), trace)
    if cfg.algorithm == "ifedavg":
        run.personal = {c.label: c.personal.copy() for c in state.clients}
    elif cfg.algorithm == "apfl":
        run.apfl_local = {c.label: c.local.copy() for c in state.clients}
    elif cfg.algorithm == "local":
        run.client_models = {c.label: c.shared.copy() for c in state.clients}
    return run


def run_experiment(cfg: ExperimentConfig, datasets: Sequence[ClientDataset]) -> RunArtifacts:
    cfg.validate()
    if not datasets:
        raise ConfigError("at least one client dataset is required")
    runs = []
    for seed in cfg.seeds:
        log.info("%s: seed %d, %d rounds, %d clients", cfg.algorithm, seed, cfg.rounds, len(datasets))
        runs.append(train(init_federation(cfg, datasets, seed)))
    return RunArtifacts(cfg, runs)
